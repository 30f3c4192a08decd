"""Accuracy, detection AUPRC and the adversarial risk counts.

Risk counts three kinds of loss over an evaluation run: clean inputs that
are accepted but misclassified, clean inputs the detector rejects, and
adversarial inputs that get through and are misclassified.  Without a
detector the middle term is zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attacks import AdvBatch, filter_successful
from .data import LabeledSet
from .diffnet import DiffNet, predict
from .errors import ConfigError, InputError, StateError, UndefinedMetricError
from .uad import UadModel, defend, score_inputs


def accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise InputError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    if p.size == 0:
        raise InputError("accuracy of an empty set is undefined")
    return float(np.mean(p == y))


# -- detection ------------------------------------------------------------------

@dataclass
class DetectionScores:
    """Per-sample anomaly score (negative log-likelihood), adversarial flag and predicted class."""

    score: np.ndarray
    is_adversarial: np.ndarray
    predicted_class: np.ndarray

    def __post_init__(self):
        self.score = np.asarray(self.score, dtype=np.float64)
        self.is_adversarial = np.asarray(self.is_adversarial, dtype=bool)
        self.predicted_class = np.asarray(self.predicted_class, dtype=np.int64)
        if not (self.score.shape == self.is_adversarial.shape == self.predicted_class.shape):
            raise InputError("detection score arrays differ in length")
        if not np.all(np.isfinite(self.score)):
            raise InputError("non-finite detection score")


def average_precision(labels, scores) -> float:
    """``sum_k (R_k - R_{k-1}) P_k`` over distinct score thresholds, highest first.

    Samples with equal scores enter the ranking together.
    """
    y = np.asarray(labels, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError(f"need both positives and negatives, got {n_pos} of {y.size}")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of every block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[ends]
    precision = tp / (ends + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def auprc(scores: DetectionScores, group: Optional[int] = None) -> float:
    """Average precision with adversarial samples as positives, optionally
    restricted to samples predicted as class ``group``."""
    m = slice(None) if group is None else scores.predicted_class == group
    try:
        return average_precision(scores.is_adversarial[m], scores.score[m])
    except UndefinedMetricError as exc:
        where = "all samples" if group is None else f"predicted class {group}"
        raise UndefinedMetricError(f"AUPRC undefined for {where}: {exc}") from None


def per_class_auprc(scores: DetectionScores, num_classes: int) -> tuple[list[Optional[float]], Optional[float]]:
    """Per predicted class AUPRC (``None`` where undefined) and their macro mean
    over the defined classes."""
    vals = []
    for k in range(num_classes):
        try:
            vals.append(auprc(scores, k))
        except UndefinedMetricError:
            vals.append(None)
    defined = [v for v in vals if v is not None]
    return vals, (float(np.mean(defined)) if defined else None)


def detection_scores(net: DiffNet, uad: UadModel, clean_x, adv_x) -> DetectionScores:
    """Score a clean pool and an adversarial pool under the detector."""
    pc, sc = score_inputs(net, uad, clean_x)
    if len(adv_x):
        pa, sa = score_inputs(net, uad, adv_x)
    else:
        pa, sa = np.zeros(0, np.int64), np.zeros(0)
    return DetectionScores(-np.r_[sc, sa], np.r_[np.zeros(len(sc), bool), np.ones(len(sa), bool)],
                           np.r_[pc, pa])


# -- risk -----------------------------------------------------------------------

@dataclass(frozen=True)
class RiskWeights:
    r_cln_prd: float = 1.0
    r_cln_uad: float = 1.0
    r_adv_prd: float = 1.0

    def __post_init__(self):
        for name in ("r_cln_prd", "r_cln_uad", "r_adv_prd"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"risk weight {name} must be >= 0")


@dataclass(frozen=True)
class RiskLedger:
    N_cln_inc: int = 0
    N_cln_rej: int = 0
    N_adv_inc: int = 0
    N: int = 1

    def __post_init__(self):
        for name in ("N_cln_inc", "N_cln_rej", "N_adv_inc", "N"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be >= 0")

    def as_dict(self) -> dict:
        return {"N_cln_inc": self.N_cln_inc, "N_cln_rej": self.N_cln_rej,
                "N_adv_inc": self.N_adv_inc, "N": self.N}


def risk_components(ledger: RiskLedger, w: RiskWeights = RiskWeights(),
                    with_uad: bool = True) -> tuple[float, float]:
    """Clean and adversarial parts of the total risk ``R``."""
    r_cln = w.r_cln_prd * ledger.N_cln_inc
    if with_uad:
        r_cln += w.r_cln_uad * ledger.N_cln_rej
    return r_cln, w.r_adv_prd * ledger.N_adv_inc


def _average(ledger: RiskLedger, w: RiskWeights, with_uad: bool) -> float:
    if ledger.N == 0:
        raise InputError("risk normaliser N must be positive")
    r_cln, r_adv = risk_components(ledger, w, with_uad)
    return (r_cln + r_adv) / ledger.N


def risk_without_uad(ledger: RiskLedger, w: RiskWeights = RiskWeights()) -> float:
    """Average risk ``R(f) / N`` of the bare classifier."""
    if ledger.N_cln_rej != 0:
        raise InputError("a ledger without a detector cannot have clean rejections")
    return _average(ledger, w, with_uad=False)


def risk_with_uad(ledger: RiskLedger, w: RiskWeights = RiskWeights()) -> float:
    """Average risk ``R(f, g) / N`` of the classifier behind the detector."""
    return _average(ledger, w, with_uad=True)


def risk_ledger_from_run(net: DiffNet, uad: Optional[UadModel], clean_eval: LabeledSet,
                         adv_eval: AdvBatch, filtered: bool = True) -> RiskLedger:
    """Count the decision paths over a clean evaluation set and its attacks.

    With ``filtered`` the attacks are first reduced to the successful ones;
    otherwise every crafted input counts.  ``N`` is the clean count.
    """
    if uad is not None and not uad.calibrated:
        raise StateError("detector has no calibrated thresholds")
    if len(clean_eval) == 0:
        raise InputError("empty clean evaluation set")
    adv = filter_successful(adv_eval, net) if filtered else adv_eval
    y = np.asarray(clean_eval.y)
    if uad is None:
        wrong = predict(net, clean_eval.x) != y
        cln_inc, cln_rej = int(wrong.sum()), 0
        adv_inc = int((predict(net, adv.x_adv) != adv.y).sum()) if len(adv) else 0
    else:
        acc, pred, _ = defend(net, uad, clean_eval.x)
        cln_inc = int((acc & (pred != y)).sum())
        cln_rej = int((~acc).sum())
        adv_inc = 0
        if len(adv):
            acc_a, pred_a, _ = defend(net, uad, adv.x_adv)
            adv_inc = int((acc_a & (pred_a != adv.y)).sum())
    return RiskLedger(cln_inc, cln_rej, adv_inc, len(y))
