"""Independent reference computations used by the test-suite.

Nothing here calls the backward pass or the metric implementations it is
compared against.
"""

from fractions import Fraction

import numpy as np

from advshield import diffnet as dn


def relu_pattern(net, x):
    _, _, cache = dn._forward(net, dn._check_inputs(net, x))
    return np.concatenate([(c[3] > 0).ravel() for c in cache if c[3] is not None]) if len(cache) > 1 else np.zeros(0, bool)


def piece_signature(net, x, labels=None, loss="xent"):
    """Which linear piece the loss is on: the ReLU pattern, plus for the
    margin loss the runner-up class and the side of the clamp."""
    sig = [relu_pattern(net, x).astype(np.int64)]
    if loss == "cw":
        logits, _ = dn.forward(net, x)
        rows = np.arange(len(labels))
        other = logits.copy()
        other[rows, labels] = -np.inf
        sig += [other.argmax(axis=1), (dn.cw_margin(logits, labels) > 0).astype(np.int64)]
    return np.concatenate(sig)


def _central(f, arr, idx, h, signature):
    old = arr[idx]
    arr[idx] = old + h
    fp, pp = f(), signature()
    arr[idx] = old - h
    fm, pm = f(), signature()
    arr[idx] = old
    kink = not np.array_equal(pp, pm)
    return (fp - fm) / (2 * h), kink


def fd_param_gradient(net, batch, loss="xent", h=1e-3):
    """Central differences; second value marks stencils that crossed a kink."""
    grads, kinks = [], []
    f = lambda: dn.loss_value(net, batch, loss)
    sig = lambda: piece_signature(net, batch.x, batch.y, loss)
    for p in net.params:
        g = np.zeros_like(p)
        k = np.zeros(p.shape, bool)
        for idx in np.ndindex(p.shape):
            g[idx], k[idx] = _central(f, p, idx, h, sig)
        grads.append(g)
        kinks.append(k)
    return grads, kinks


def fd_input_gradient(net, batch, loss="xent", h=1e-3):
    """Per-sample central differences of each sample's own loss."""
    x = np.array(batch.x, dtype=np.float64)
    g = np.zeros_like(x)
    k = np.zeros(x.shape, bool)
    for b in range(x.shape[0]):
        xb = x[b:b + 1]
        yb = None if batch.y is None else batch.y[b:b + 1]
        sub = dn.Batch(xb, yb, None if batch.targets is None else batch.targets[b:b + 1])
        f = lambda: dn.loss_value(net, sub, loss)
        sig = lambda: piece_signature(net, xb, yb, loss)
        for idx in np.ndindex(xb.shape):
            g[(b,) + idx[1:]], k[(b,) + idx[1:]] = _central(f, xb, idx, h, sig)
    return g, k


def max_relative_error(a, b, floor=1e-6, mask=None):
    a, b = np.asarray(a, float), np.asarray(b, float)
    r = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if mask is not None:
        r = r[~mask]
    return float(r.max()) if r.size else 0.0


def average_precision_bruteforce(labels, scores):
    """Exact AP for distinct scores: mean precision at the rank of each positive."""
    labels = list(labels)
    scores = list(scores)
    pos = [i for i, l in enumerate(labels) if l]
    total = Fraction(0)
    for i in pos:
        ranked_above = [j for j in range(len(scores)) if scores[j] >= scores[i]]
        hits = sum(1 for j in ranked_above if labels[j])
        total += Fraction(hits, len(ranked_above))
    return total / len(pos)


def gaussian_logpdf_1d(z, mu, var):
    return -0.5 * np.log(2 * np.pi * var) - 0.5 * (z - mu) ** 2 / var


def average_precision_thresholds(labels, scores):
    """Exact step-sum average precision enumerating every distinct threshold.

    Handles tied scores by moving the threshold past a whole tie block at once.
    """
    n_pos = sum(1 for v in labels if v)
    total, prev_recall = Fraction(0), Fraction(0)
    for t in sorted(set(scores), reverse=True):
        flagged = [bool(v) for v, s in zip(labels, scores) if s >= t]
        tp = sum(flagged)
        recall = Fraction(tp, n_pos)
        total += (recall - prev_recall) * Fraction(tp, len(flagged))
        prev_recall = recall
    return total
