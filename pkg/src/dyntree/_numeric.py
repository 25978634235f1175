"""Small numerical helpers shared by the inference modules."""

import numpy as np


class InferenceError(RuntimeError):
    """Inference cannot proceed, usually because the evidence is impossible."""


def normalize(x, axis=-1):
    """Normalize along ``axis``; all-zero slices become uniform.

    Returns the normalized array and the slice sums.
    """
    x = np.asarray(x, dtype=float)
    s = x.sum(axis=axis, keepdims=True)
    zero = s <= 0
    out = np.where(zero, 1.0 / x.shape[axis], x / np.where(zero, 1.0, s))
    return out, np.squeeze(s, axis=axis)


def safe_log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def weighted_log(weights, values):
    """``weights * log(values)`` with ``0 * log(0) := 0``."""
    weights = np.asarray(weights, dtype=float)
    logs = safe_log(values)
    return np.where(weights > 0, weights * np.where(weights > 0, logs, 0.0), 0.0)


def softmax_rows(logw, mask=None):
    """Row-wise softmax; masked-out and ``-inf`` entries get zero weight.

    Raises :class:`InferenceError` for rows with no finite entry.
    """
    logw = np.asarray(logw, dtype=float)
    if mask is not None:
        logw = np.where(mask, logw, -np.inf)
    top = logw.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise InferenceError("every candidate has zero weight")
    w = np.exp(logw - top)
    return w / w.sum(axis=-1, keepdims=True)
