"""Natural, adversarial and semi-supervised adversarial training.

SSAT minimises ``L_sup + lam * L_unsup``: both terms are cross-entropy on
minibatches whose adversarial share is crafted with FGSM at a per-sample
budget drawn from ``train_eps``; the unlabeled term uses frozen
pseudo-labels assigned after the warm-up epochs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .attacks import fgsm
from .data import LabeledSet, UnlabeledSet
from .diffnet import Batch, DiffNet, predict, sgd_step, value_and_param_gradient
from .errors import ConfigError

log = logging.getLogger(__name__)

REGIMES = ("nt", "at", "ssat")


@dataclass
class TrainConfig:
    regime: str = "nt"
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    lam: float = 5.0
    train_eps: tuple[float, float] = (0.001, 0.003)
    adv_fraction: float = 0.5
    craft_method: str = "fgsm"
    warmup_epochs: int = 2
    seed: int = 0

    def __post_init__(self):
        self.regime = self.regime.lower()
        self.train_eps = tuple(float(e) for e in self.train_eps)
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        lo, hi = self.train_eps
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad training epsilon range {self.train_eps}")
        if not 0 < self.adv_fraction <= 1:
            raise ConfigError(f"adv_fraction must lie in (0, 1], got {self.adv_fraction}")
        if self.craft_method != "fgsm":
            raise ConfigError(f"unsupported training-time attack {self.craft_method!r}")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")

    @classmethod
    def from_mapping(cls, kv: dict, **overrides) -> "TrainConfig":
        """Build from flat string key/values; unknown keys are a configuration error."""
        known = {f.name: f for f in fields(cls)}
        args = {}
        for key, val in {**kv, **overrides}.items():
            key = {"lambda": "lam", "train_eps_range": "train_eps"}.get(key, key)
            if key not in known:
                raise ConfigError(f"unknown training option {key!r}")
            if key == "train_eps":
                if isinstance(val, str):
                    val = tuple(float(v) for v in val.replace(",", " ").split())
                args[key] = tuple(val)
            elif key in ("regime", "craft_method"):
                args[key] = str(val)
            elif key in ("epochs", "batch_size", "warmup_epochs", "seed"):
                args[key] = int(val)
            else:
                args[key] = float(val)
        return cls(**args)


@dataclass
class EpochLoss:
    epoch: int
    sup_loss: float
    unsup_loss: float
    total: float


@dataclass
class PseudoLabeledSet:
    x: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.x)


def pseudo_label(net: DiffNet, unlabeled: UnlabeledSet) -> PseudoLabeledSet:
    """Argmax predictions, lowest class index on ties."""
    x = unlabeled.x
    if len(x) == 0:
        return PseudoLabeledSet(x, np.zeros(0, dtype=np.int64))
    return PseudoLabeledSet(x, predict(net, x))


def pseudo_label_accuracy(pseudo: PseudoLabeledSet, unlabeled: UnlabeledSet) -> Optional[float]:
    if unlabeled.audit is None or len(pseudo) == 0:
        return None
    return float(np.mean(pseudo.labels == unlabeled.audit.labels))


def adversarial_minibatch(net: DiffNet, batch: Batch, eps_range, rng: np.random.Generator,
                          adv_fraction: float = 0.5) -> tuple[Batch, np.ndarray]:
    """Replace the trailing ``floor(B * adv_fraction)`` samples by FGSM versions.

    Each adversarial sample gets its own budget drawn uniformly from
    ``eps_range``; labels are carried over.  Returns the mixed batch and the
    drawn budgets.
    """
    x = np.asarray(batch.x, dtype=np.float64)
    B = len(x)
    n_adv = int(math.floor(B * adv_fraction))
    lo, hi = eps_range
    eps = rng.uniform(lo, hi, size=n_adv)
    if n_adv == 0:
        return Batch(x, batch.y), eps
    n_clean = B - n_adv
    adv = fgsm(net, Batch(x[n_clean:], batch.y[n_clean:]), eps)
    mixed = np.concatenate([x[:n_clean], adv.x_adv])
    return Batch(mixed, batch.y), eps


def ssat_objective(net: DiffNet, sup_batch: Batch, unsup_batch: Batch, lam: float):
    """``(L_sup, L_unsup, L_sup + lam * L_unsup)`` and the matching gradient."""
    ls, gs = value_and_param_gradient(net, sup_batch, "xent")
    lu, gu = value_and_param_gradient(net, unsup_batch, "xent")
    grads = [a + lam * b for a, b in zip(gs, gu)]
    return ls, lu, ls + lam * lu, grads


def train(net: DiffNet, labeled: LabeledSet, unlabeled: Optional[UnlabeledSet],
          cfg: TrainConfig, on_epoch=None) -> tuple[DiffNet, list[EpochLoss]]:
    """Run ``cfg.epochs`` epochs of SGD and return the net with its loss trace.

    AT and SSAT spend their first ``cfg.warmup_epochs`` epochs on natural
    training; SSAT assigns pseudo-labels once after the warm-up and keeps
    them fixed.  The labeled and unlabeled streams draw shuffles and budgets
    from independent generators derived from ``cfg.seed``, so SSAT with
    ``lam = 0`` follows the AT trajectory exactly.
    """
    ssat = cfg.regime == "ssat"
    if ssat and cfg.lam > 0 and (unlabeled is None or len(unlabeled) == 0):
        raise ConfigError("SSAT with lambda > 0 needs a non-empty unlabeled pool")
    if len(labeled) == 0:
        raise ConfigError("empty labeled training set")

    lab_order, lab_eps, unl_order, unl_eps = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(4))
    use_unl = ssat and unlabeled is not None and len(unlabeled) > 0
    x, y = labeled.x, np.asarray(labeled.y)
    N = len(x)
    steps = math.ceil(N / cfg.batch_size)
    pseudo: Optional[PseudoLabeledSet] = None
    trace: list[EpochLoss] = []

    for epoch in range(cfg.epochs):
        warm = cfg.regime == "nt" or epoch < cfg.warmup_epochs
        if use_unl and not warm and pseudo is None:
            pseudo = pseudo_label(net, unlabeled)
            acc = pseudo_label_accuracy(pseudo, unlabeled)
            log.info("pseudo-labels assigned at epoch %d (audit accuracy %s)", epoch, acc)
        order = lab_order.permutation(N)
        if pseudo is not None:
            u_order = unl_order.permutation(len(pseudo))
            bu = math.ceil(len(pseudo) / steps)
        sup_sum = unsup_sum = tot_sum = 0.0
        for k in range(steps):
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            batch = Batch(x[idx], y[idx])
            if warm:
                loss, grads = value_and_param_gradient(net, batch, "xent")
                lu, total = 0.0, loss
            else:
                mixed, _ = adversarial_minibatch(net, batch, cfg.train_eps, lab_eps, cfg.adv_fraction)
                if pseudo is None:
                    loss, grads = value_and_param_gradient(net, mixed, "xent")
                    lu, total = 0.0, loss
                else:
                    uidx = u_order[(k * bu) % len(pseudo):][:bu]
                    ubatch = Batch(pseudo.x[uidx], pseudo.labels[uidx])
                    umixed, _ = adversarial_minibatch(net, ubatch, cfg.train_eps, unl_eps, cfg.adv_fraction)
                    loss, lu, total, grads = ssat_objective(net, mixed, umixed, cfg.lam)
            net = sgd_step(net, grads, cfg.lr)
            sup_sum += loss
            unsup_sum += lu
            tot_sum += total
        rec = EpochLoss(epoch + 1, sup_sum / steps, unsup_sum / steps, tot_sum / steps)
        trace.append(rec)
        log.info("%s epoch %d: sup %.4f unsup %.4f total %.4f", cfg.regime, rec.epoch,
                 rec.sup_loss, rec.unsup_loss, rec.total)
        if on_epoch is not None:
            on_epoch(epoch + 1, net)
    return net, trace


def trace_csv(trace: list[EpochLoss]) -> str:
    lines = ["epoch,sup_loss,unsup_loss,total"]
    lines += [f"{r.epoch},{r.sup_loss:.8f},{r.unsup_loss:.8f},{r.total:.8f}" for r in trace]
    return "\n".join(lines) + "\n"

