"""Unsupervised adversarial detection with per-class Gaussian mixtures.

One full-covariance GMM per class is fitted by EM on penultimate features
of clean training images.  A test input is scored under the GMM of its
predicted class and rejected when the log-likelihood falls below that
class's threshold.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .diffnet import DiffNet, atomic_write, features
from .errors import ConfigError, FormatError, InputError, NumericError, StateError

DETECTOR_MAGIC = b"ADUD"
DETECTOR_VERSION = 1


@dataclass
class ClassGmm:
    class_id: int
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    diag_reg: float = 0.0
    trace: list[float] = field(default_factory=list, repr=False)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class UadModel:
    gmms: list[ClassGmm]
    thresholds: Optional[np.ndarray] = None
    model_hash: str = ""
    fit_date: Optional[str] = None

    @property
    def num_classes(self) -> int:
        return len(self.gmms)

    @property
    def calibrated(self) -> bool:
        return self.thresholds is not None


@dataclass(frozen=True)
class Accepted:
    label: int
    score: float


@dataclass(frozen=True)
class Rejected:
    score: float


Decision = Union[Accepted, Rejected]


# -- densities ----------------------------------------------------------------

def _component_logpdf(Z: np.ndarray, mean: np.ndarray, cov: np.ndarray, who: str) -> np.ndarray:
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericError(f"covariance of {who} is not positive definite") from None
    sol = solve_triangular(L, (Z - mean).T, lower=True)
    n = Z.shape[1]
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * (n * np.log(2 * np.pi) + logdet + (sol ** 2).sum(axis=0))


def _weighted_logpdf(gmm: ClassGmm, Z: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logw = np.log(gmm.weights)
    cols = [logw[j] + _component_logpdf(Z, gmm.means[j], gmm.covariances[j],
                                        f"class {gmm.class_id} component {j}")
            for j in range(gmm.n_components)]
    return np.stack(cols, axis=1)


def gmm_log_likelihood(gmm: ClassGmm, z) -> Union[float, np.ndarray]:
    """``log sum_j w_j N(z; mu_j, Sigma_j)`` for one vector or each row of a matrix.

    Stored covariances already include the diagonal regularisation.
    """
    Z = np.asarray(z, dtype=np.float64)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    if Z.shape[1] != gmm.dim:
        raise InputError(f"feature length {Z.shape[1]} does not match GMM dimension {gmm.dim}")
    if not np.all(np.isfinite(Z)):
        raise InputError("non-finite feature vector")
    out = logsumexp(_weighted_logpdf(gmm, Z), axis=1)
    return float(out[0]) if single else out


# -- EM -------------------------------------------------------------------------

def default_diag_reg(Z: np.ndarray) -> float:
    """1e-6 times the mean per-dimension variance (floored away from zero)."""
    return max(1e-6 * float(np.var(Z, axis=0).mean()), 1e-12)


def fit_gmm_em(Z, n_components: int = 1, diag_reg: float = 0.0, tol: float = 1e-6,
               max_iter: int = 100, seed: int = 0, class_id: int = 0) -> ClassGmm:
    """Fit a full-covariance GMM by EM.

    ``diag_reg`` is added to every covariance diagonal in each M-step.
    Iteration stops once the mean log-likelihood improves by less than
    ``tol`` or after ``max_iter`` rounds; the per-round values are kept in
    ``trace``.  Because of the added diagonal an M-step can lower the
    likelihood slightly (seen with nearly collapsed components); such a step
    is discarded and iteration ends on the previous parameters.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] < 1:
        raise InputError(f"expected an (N, n) feature matrix, got shape {Z.shape}")
    N, n = Z.shape
    J = int(n_components)
    if J < 1 or N < J:
        raise ConfigError(f"class {class_id}: {N} samples cannot support {J} components")
    if diag_reg < 0:
        raise ConfigError("diag_reg must be >= 0")
    if max_iter < 1:
        raise ConfigError("max_iter must be >= 1")
    rng = np.random.default_rng(seed)
    eye = np.eye(n)
    centred = Z - Z.mean(axis=0)
    base_cov = centred.T @ centred / N + diag_reg * eye
    gmm = ClassGmm(
        class_id=class_id,
        weights=np.full(J, 1.0 / J),
        means=Z[np.sort(rng.choice(N, size=J, replace=False))].copy() if J > 1 else Z.mean(axis=0, keepdims=True),
        covariances=np.repeat(base_cov[None], J, axis=0),
        diag_reg=float(diag_reg),
    )
    prev = float(logsumexp(_weighted_logpdf(gmm, Z), axis=1).mean())
    trace = []
    for _ in range(max_iter):
        # E-step
        logp = _weighted_logpdf(gmm, Z)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        # M-step
        nk = resp.sum(axis=0)
        for j in np.flatnonzero(nk <= 10 * np.finfo(float).tiny):
            raise NumericError(f"class {class_id} component {j} lost all responsibility")
        weights = nk / N
        weights = weights / weights.sum()
        means = (resp.T @ Z) / nk[:, None]
        covs = np.empty((J, n, n))
        for j in range(J):
            d = Z - means[j]
            c = (resp[:, j, None] * d).T @ d / nk[j]
            covs[j] = 0.5 * (c + c.T) + diag_reg * eye
        step = replace(gmm, weights=weights, means=means, covariances=covs)
        cur = float(logsumexp(_weighted_logpdf(step, Z), axis=1).mean())
        if trace and cur < prev:
            # the diagonal term breaks EM's ascent guarantee; keep the better iterate
            break
        gmm = step
        trace.append(cur)
        if cur - prev < tol:
            break
        prev = cur
    gmm.trace = trace
    return gmm


# -- detector -------------------------------------------------------------------

def fit_uad(net: DiffNet, clean_x: np.ndarray, clean_y: np.ndarray, n_components: int = 1,
            diag_reg: Optional[float] = None, tol: float = 1e-6, max_iter: int = 100,
            seed: int = 0, num_classes: Optional[int] = None) -> UadModel:
    """One GMM per true class on that class's clean penultimate features."""
    C = num_classes or net.config.num_classes
    _, Z = features(net, clean_x)
    y = np.asarray(clean_y)
    gmms = []
    for k in range(C):
        Zk = Z[y == k]
        if len(Zk) < max(n_components, 1):
            raise ConfigError(f"class {k} has {len(Zk)} clean samples; need at least {n_components}")
        reg = default_diag_reg(Zk) if diag_reg is None else float(diag_reg)
        gmms.append(fit_gmm_em(Zk, n_components, reg, tol, max_iter, seed=seed + k, class_id=k))
    return UadModel(gmms)


def score_inputs(net: DiffNet, uad: UadModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class and its GMM log-likelihood for every input."""
    logits, Z = features(net, x)
    pred = logits.argmax(axis=1)
    scores = np.empty(len(pred))
    for k in range(uad.num_classes):
        m = pred == k
        if m.any():
            scores[m] = gmm_log_likelihood(uad.gmms[k], Z[m])
    return pred, scores


def calibrate_thresholds(uad: UadModel, net: DiffNet, held_out_x, percentile: float = 5.0) -> UadModel:
    """Per predicted class, threshold at the given percentile of held-out clean scores.

    Percentiles use linear interpolation; ``percentile = 0`` gives ``-inf``
    (nothing is rejected).
    """
    if not 0 <= percentile <= 50:
        raise ConfigError(f"percentile must lie in [0, 50], got {percentile}")
    pred, scores = score_inputs(net, uad, held_out_x)
    thresholds = np.empty(uad.num_classes)
    for k in range(uad.num_classes):
        s = scores[pred == k]
        if s.size == 0:
            raise ConfigError(f"no held-out clean samples predicted as class {k}")
        thresholds[k] = -np.inf if percentile == 0 else np.percentile(s, percentile)
    return replace(uad, thresholds=thresholds)


def defend(net: DiffNet, uad: UadModel, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised defended inference: ``(accepted, predicted, score)`` arrays."""
    if not uad.calibrated:
        raise StateError("detector has no calibrated thresholds")
    pred, scores = score_inputs(net, uad, x)
    accepted = ~(scores < uad.thresholds[pred])
    return accepted, pred, scores


def defended_inference(net: DiffNet, uad: UadModel, x) -> list[Decision]:
    accepted, pred, scores = defend(net, uad, x)
    return [Accepted(int(p), float(s)) if a else Rejected(float(s))
            for a, p, s in zip(accepted, pred, scores)]


# -- detector file ----------------------------------------------------------------

def uad_to_bytes(uad: UadModel) -> bytes:
    buf = io.BytesIO()
    buf.write(DETECTOR_MAGIC)
    n = uad.gmms[0].dim if uad.gmms else 0
    buf.write(struct.pack("<HII", DETECTOR_VERSION, uad.num_classes, n))
    for g in uad.gmms:
        buf.write(struct.pack("<Id", g.n_components, g.diag_reg))
        for arr in (g.weights, g.means, g.covariances):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    if uad.thresholds is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(np.ascontiguousarray(uad.thresholds, dtype="<f8").tobytes())
    h = uad.model_hash.encode("ascii")
    buf.write(struct.pack("<H", len(h)))
    buf.write(h)
    return buf.getvalue()


def uad_from_bytes(data: bytes) -> UadModel:
    pos = 0

    def take(k: int) -> bytes:
        nonlocal pos
        if pos + k > len(data):
            raise FormatError("truncated detector file")
        out = data[pos:pos + k]
        pos += k
        return out

    if take(4) != DETECTOR_MAGIC:
        raise FormatError("not a detector file (bad magic)")
    version, C, n = struct.unpack("<HII", take(10))
    if version != DETECTOR_VERSION:
        raise FormatError(f"unsupported detector version {version}")
    gmms = []
    for k in range(C):
        J, reg = struct.unpack("<Id", take(12))
        w = np.frombuffer(take(8 * J), "<f8").copy()
        mu = np.frombuffer(take(8 * J * n), "<f8").reshape(J, n).copy()
        cov = np.frombuffer(take(8 * J * n * n), "<f8").reshape(J, n, n).copy()
        gmms.append(ClassGmm(k, w, mu, cov, reg))
    flag = take(1)
    thresholds = np.frombuffer(take(8 * C), "<f8").copy() if flag == b"\x01" else None
    (hl,) = struct.unpack("<H", take(2))
    model_hash = take(hl).decode("ascii")
    if pos != len(data):
        raise FormatError("trailing bytes after detector")
    return UadModel(gmms, thresholds, model_hash)


def save_uad(uad: UadModel, path) -> None:
    atomic_write(path, uad_to_bytes(uad))


def load_uad(path) -> UadModel:
    with open(path, "rb") as fh:
        return uad_from_bytes(fh.read())
