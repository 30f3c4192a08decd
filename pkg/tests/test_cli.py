import json
import os

import pytest

from advshield.cli import main
from advshield.diffnet import NetConfig, build_net, load_net, save_net

SPEC = """num_classes = 3
image_dims = 8,8,1
noise = 0.05
amplitude = 0.15
samples_per_class = 300
seed = 1
"""

TRAIN = """epochs = 12
warmup_epochs = 4
batch_size = 16
lr = 0.02
train_eps = 0.05, 0.1
hidden = 16
"""


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "synth.spec").write_text(SPEC)
    (d / "train.cfg").write_text(TRAIN)
    assert main(["data", "gen", "--spec", str(d / "synth.spec"), "--out", str(d / "pool")]) == 0
    assert main(["data", "split", "--data", str(d / "pool"), "--train", "600", "--unlabeled", "150",
                 "--test", "150", "--seed", "1", "--out", str(d / "split")]) == 0
    assert main(["train", "--regime", "ssat", "--config", str(d / "train.cfg"), "--data", str(d / "split"),
                 "--out", str(d / "m.adsh")]) == 0
    return d


def test_data_and_train_outputs(ws):
    manifest = json.loads((ws / "split" / "manifest.json").read_text())
    assert manifest["counts"]["train"] == [200, 200, 200]
    trace = (ws / "m.adsh.trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,sup_loss,unsup_loss,total" and len(trace) == 13
    assert load_net(ws / "m.adsh").config.hidden_layers == (16,)


def test_attack_detector_eval(ws, capsys):
    d = str(ws)
    assert main(["attack", "--model", f"{d}/m.adsh", "--data", f"{d}/split", "--method", "pgd", "--eps", "0.15",
                 "--out", f"{d}/adv.adtn"]) == 0
    assert main(["fit-uad", "--model", f"{d}/m.adsh", "--data", f"{d}/split", "--out", f"{d}/det.adud"]) == 0
    assert main(["calibrate", "--model", f"{d}/m.adsh", "--detector", f"{d}/det.adud", "--data", f"{d}/split"]) == 0
    capsys.readouterr()
    assert main(["eval", "--model", f"{d}/m.adsh", "--detector", f"{d}/det.adud", "--data", f"{d}/split",
                 "--adv", f"{d}/adv.adtn", "--out", f"{d}/eval.json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report == json.loads((ws / "eval.json").read_text())
    led = report["ledger_without_uad"]
    assert led["N"] == 150 and led["N_cln_rej"] == 0
    assert report["risk_without_uad"] == pytest.approx((led["N_cln_inc"] + led["N_adv_inc"]) / 150)
    assert main(["infer", "--model", f"{d}/m.adsh", "--detector", f"{d}/det.adud", "--data", f"{d}/adv.adtn",
                 "--out", f"{d}/dec.csv"]) == 0
    lines = (ws / "dec.csv").read_text().splitlines()
    assert lines[0] == "index,decision,label,score" and len(lines) == 151
    assert main(["project", "--model", f"{d}/m.adsh", "--data", f"{d}/split/test.adtn", "--adv",
                 f"{d}/adv.adtn", "--out", f"{d}/proj.csv"]) == 0
    assert len((ws / "proj.csv").read_text().splitlines()) == 301


def test_run_and_curves(ws, tmp_path):
    plan = tmp_path / "p.plan"
    plan.write_text(f"data = {ws}/split\nregimes = nt\nattacks = pgd: 0, 0.1, 0.2\nhidden = 16\n"
                    "train.epochs = 5\ntrain.batch_size = 16\n")
    out = tmp_path / "run"
    assert main(["run", "--config", str(plan), "--out", str(out)]) == 0
    os.remove(out / "curves" / "nt_pgd.csv")
    assert main(["curves", "--run", str(out)]) == 0
    lines = (out / "curves" / "nt_pgd.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=") and len(lines) == 5


def test_exit_codes(ws, tmp_path, capsys):
    d = str(ws)
    bad = tmp_path / "bad.cfg"
    bad.write_text("lambda = -1\n")
    assert main(["train", "--regime", "ssat", "--config", str(bad), "--data", f"{d}/split",
                 "--out", str(tmp_path / "x.adsh")]) == 2
    data = (ws / "m.adsh").read_bytes()
    (tmp_path / "t.adsh").write_bytes(data[:40])
    assert main(["infer", "--model", str(tmp_path / "t.adsh"), "--data", f"{d}/split/test.adtn"]) == 3
    assert main(["infer", "--model", f"{d}/missing.adsh", "--data", f"{d}/split/test.adtn"]) == 3
    # a net whose hidden units are all dead has constant features: no covariance without regularisation
    net = build_net(NetConfig((8, 8, 1), (4,), 3))
    net.params[0][:] = 0
    net.params[1][:] = -1
    save_net(net, tmp_path / "dead.adsh")
    assert main(["fit-uad", "--model", str(tmp_path / "dead.adsh"), "--data", f"{d}/split",
                 "--diag-reg", "0", "--out", str(tmp_path / "d.adud")]) == 4
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["attack"])
    assert info.value.code == 2
