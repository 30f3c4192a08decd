"""White-box attacks: FGSM, L-inf PGD and the C&W L2 margin attack."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import load_tensor, save_tensor
from .diffnet import Batch, DiffNet, atomic_write, cw_margin, forward, input_gradient, predict
from .errors import ConfigError, FormatError, NumericError

METHODS = ("fgsm", "pgd", "cw")
CHUNK = 512


@dataclass(frozen=True)
class AttackSpec:
    method: str = "pgd"
    epsilon: float = 0.0
    steps: int = 10
    step_size: Optional[float] = None
    cw_constant: float = 1.0
    cw_lr: float = 0.01
    kappa: float = 0.0
    random_start: bool = False
    clip: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        m = self.method.lower()
        object.__setattr__(self, "method", m)
        if m not in METHODS:
            raise ConfigError(f"unknown attack method {self.method!r}; expected one of {METHODS}")
        if not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if m == "fgsm":
            object.__setattr__(self, "steps", 1)
            object.__setattr__(self, "step_size", float(self.epsilon))
        elif self.step_size is None:
            # default PGD step: a quarter of the budget (the whole budget if that underflows)
            object.__setattr__(self, "step_size", float(self.epsilon) / 4.0 or float(self.epsilon))
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.step_size < 0 or (self.step_size == 0 and self.epsilon > 0 and m == "pgd"):
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.cw_constant < 0:
            raise ConfigError(f"C&W constant must be >= 0, got {self.cw_constant}")
        if not self.cw_lr > 0:
            raise ConfigError(f"C&W learning rate must be > 0, got {self.cw_lr}")
        if tuple(self.clip) != (0.0, 1.0):
            raise ConfigError(f"only the [0, 1] pixel box is supported, got {self.clip}")


@dataclass
class AdvBatch:
    x: np.ndarray
    x_adv: np.ndarray
    y: np.ndarray
    pred: np.ndarray
    success: np.ndarray

    def __len__(self):
        return len(self.y)

    @property
    def count(self) -> int:
        return int(self.success.sum())

    def subset(self, mask) -> "AdvBatch":
        return AdvBatch(self.x[mask], self.x_adv[mask], self.y[mask], self.pred[mask], self.success[mask])


def _finish(net: DiffNet, x: np.ndarray, x_adv: np.ndarray, y: np.ndarray) -> AdvBatch:
    pred = predict(net, x_adv)
    return AdvBatch(x, x_adv, y, pred, pred != y)


def _sign_step(net: DiffNet, x: np.ndarray, y: np.ndarray, step) -> np.ndarray:
    g = input_gradient(net, Batch(x, y), "xent")
    step = np.asarray(step, dtype=np.float64)
    if step.ndim == 1:
        step = step.reshape((-1,) + (1,) * (x.ndim - 1))
    return x + step * np.sign(g)


def fgsm(net: DiffNet, batch: Batch, epsilon) -> AdvBatch:
    """``clip(x + eps * sign(grad_x xent))``; ``epsilon`` may be per-sample."""
    x = np.asarray(batch.x, dtype=np.float64)
    y = np.asarray(batch.y)
    eps = np.asarray(epsilon, dtype=np.float64)
    if np.any(eps < 0):
        raise ConfigError("epsilon must be >= 0")
    out = np.empty_like(x)
    for s in range(0, len(x), CHUNK):
        e = eps if eps.ndim == 0 else eps[s:s + CHUNK]
        out[s:s + CHUNK] = np.clip(_sign_step(net, x[s:s + CHUNK], y[s:s + CHUNK], e), 0.0, 1.0)
    return _finish(net, x, out, y)


def _random_start(x: np.ndarray, eps: float, seed: int, offset: int) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(len(x)):
        rng = np.random.default_rng([seed, offset + i])
        out[i] = x[i] + rng.uniform(-eps, eps, size=x.shape[1:])
    return np.clip(out, 0.0, 1.0)


def pgd(net: DiffNet, batch: Batch, spec: AttackSpec, seed: int = 0) -> AdvBatch:
    """Iterated sign steps, each clipped to the pixel box and projected onto
    the L-inf ball of radius ``spec.epsilon`` around the clean input."""
    x = np.asarray(batch.x, dtype=np.float64)
    y = np.asarray(batch.y)
    eps = float(spec.epsilon)
    out = np.empty_like(x)
    for s in range(0, len(x), CHUNK):
        xc, yc = x[s:s + CHUNK], y[s:s + CHUNK]
        lo, hi = xc - eps, xc + eps
        cur = _random_start(xc, eps, seed, s) if spec.random_start else xc
        for _ in range(spec.steps):
            cur = np.clip(np.clip(_sign_step(net, cur, yc, spec.step_size), 0.0, 1.0), lo, hi)
        out[s:s + CHUNK] = cur
    return _finish(net, x, out, y)


def _cw_chunk(net, x, y, c, lr, steps, kappa):
    delta = np.zeros_like(x)
    best = x.copy()
    best_obj = np.full(len(x), np.inf)
    best_mis = np.zeros(len(x), dtype=bool)
    axes = tuple(range(1, x.ndim))

    def consider(cur, delta):
        logits, _ = forward(net, cur)
        margin = cw_margin(logits, y)
        obj = (delta ** 2).sum(axis=axes) + c * np.maximum(margin, -kappa)
        if not np.all(np.isfinite(obj)):
            raise NumericError("non-finite C&W objective")
        mis = logits.argmax(axis=1) != y
        # a misclassifying iterate beats any that is not; ties on kind go to lower objective
        better = (mis & ~best_mis) | ((mis == best_mis) & (obj < best_obj))
        best[better] = cur[better]
        best_obj[better] = obj[better]
        best_mis[better] = mis[better]

    for _ in range(steps):
        cur = x + delta
        consider(cur, delta)
        g = 2.0 * delta
        if c != 0:
            g = g + c * input_gradient(net, Batch(cur, y), "cw")
        delta = np.clip(x + delta - lr * g, 0.0, 1.0) - x
    consider(x + delta, delta)
    return best


def cw(net: DiffNet, batch: Batch, spec: AttackSpec) -> AdvBatch:
    """Fixed-step gradient descent on ``|delta|^2 + c * max(margin, -kappa)``.

    The margin is the true-class logit minus the best other logit.  The
    returned iterate is the lowest-objective one among those that are
    misclassified, or the lowest-objective one overall if none is.
    """
    x = np.asarray(batch.x, dtype=np.float64)
    y = np.asarray(batch.y)
    out = np.empty_like(x)
    for s in range(0, len(x), CHUNK):
        out[s:s + CHUNK] = _cw_chunk(net, x[s:s + CHUNK], y[s:s + CHUNK], float(spec.cw_constant),
                                     float(spec.cw_lr), spec.steps, float(spec.kappa))
    return _finish(net, x, out, y)


def craft(net: DiffNet, batch: Batch, spec: AttackSpec, seed: int = 0) -> AdvBatch:
    if spec.method == "fgsm":
        return fgsm(net, batch, spec.epsilon)
    if spec.method == "pgd":
        return pgd(net, batch, spec, seed)
    return cw(net, batch, spec)


def filter_successful(adv: AdvBatch, net: Optional[DiffNet] = None) -> AdvBatch:
    """Keep the samples whose prediction on the perturbed input differs from the label.

    With ``net`` given the predictions are recomputed rather than trusted.
    """
    if net is not None and len(adv):
        pred = predict(net, adv.x_adv)
        adv = AdvBatch(adv.x, adv.x_adv, adv.y, pred, pred != adv.y)
    return adv.subset(adv.success)


def default_spec(method: str, value: float, steps: Optional[int] = None) -> AttackSpec:
    """Spec for one attack-grid point; for C&W the grid value is the constant c."""
    method = method.lower()
    if method == "cw":
        return AttackSpec("cw", epsilon=0.0, steps=steps or 100, cw_constant=value)
    if method == "fgsm":
        return AttackSpec("fgsm", epsilon=value)
    return AttackSpec("pgd", epsilon=value, steps=steps or 10)



def manifest_path(path) -> str:
    return os.fspath(path) + ".csv"


def save_adv(path, adv: AdvBatch) -> None:
    """Archive perturbed inputs (float64 container with true labels) plus a
    per-sample CSV manifest ``index,label,pred,success``."""
    save_tensor(path, adv.x_adv, adv.y, dtype="<f8")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "label", "pred", "success"])
    for i, (lab, p, ok) in enumerate(zip(adv.y, adv.pred, adv.success)):
        w.writerow([i, int(lab), int(p), int(ok)])
    atomic_write(manifest_path(path), buf.getvalue().encode())


def load_adv(path, x_clean: np.ndarray) -> AdvBatch:
    x_adv, y = load_tensor(path)
    if y is None or x_adv.shape != np.shape(x_clean):
        raise FormatError(f"{path}: archive does not match the clean inputs")
    pred, success = [], []
    with open(manifest_path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            pred.append(int(row["pred"]))
            success.append(row["success"] == "1")
    if len(pred) != len(y):
        raise FormatError(f"{path}: manifest rows do not match archive")
    return AdvBatch(np.asarray(x_clean, dtype=np.float64), x_adv.astype(np.float64), y,
                    np.asarray(pred, dtype=np.int64), np.asarray(success, dtype=bool))
