"""Dense float64 layer primitives with hand-derived backward passes.

Matrices are plain 2-D ``numpy.ndarray`` values of dtype float64; vectors are
1-D arrays. Everything here is a pure function of its inputs.

Reductions that this module writes out itself (``mean_pool``, the bias
gradient) accumulate rows left to right via ``numpy.add.reduce`` over axis 0.
Matrix products go through BLAS, so comparisons against a triple-loop oracle
hold to ~1e-12 relative rather than bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class EmptyVideoError(ValueError):
    """A video with zero frames reached an operation that needs T >= 1."""


@dataclass(frozen=True)
class LayerGrads:
    d_weights: np.ndarray
    d_bias: np.ndarray
    d_input: np.ndarray


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def affine_forward(x, w, b) -> np.ndarray:
    """``x @ w + b`` with ``b`` broadcast over the rows of ``x``."""
    x = as_matrix(x)
    w = as_matrix(w)
    b = np.asarray(b, dtype=np.float64)
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine input {x.shape} does not match weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"affine bias {b.shape} does not match weights {w.shape}")
    return x @ w + b


def affine_backward(x, w, upstream) -> LayerGrads:
    x = as_matrix(x)
    w = as_matrix(w)
    g = as_matrix(upstream)
    if x.shape[1] != w.shape[0] or g.shape != (x.shape[0], w.shape[1]):
        raise DimensionError(
            f"affine backward shapes inconsistent: x {x.shape}, w {w.shape}, grad {g.shape}"
        )
    return LayerGrads(d_weights=x.T @ g, d_bias=np.add.reduce(g, axis=0), d_input=g @ w.T)


def relu_forward(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, g) -> np.ndarray:
    # subgradient at exactly 0 is 0
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape != g.shape:
        raise DimensionError(f"relu backward shape mismatch: {x.shape} vs {g.shape}")
    return np.where(x > 0.0, g, 0.0)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, label):
    """Stable softmax cross-entropy.

    Accepts a single logit vector with an integer label, or a ``(B, C)``
    matrix with a length-``B`` label array. Returns ``(loss, probs, d_logits)``
    where ``loss`` is a float (or per-row array) and ``d_logits = probs - onehot``.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim not in (1, 2) or z.shape[-1] == 0:
        raise DimensionError(f"softmax_xent needs non-empty logits, got shape {z.shape}")
    labels = np.asarray(label, dtype=np.int64)
    n_cls = z.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n_cls):
        raise IndexError(f"label out of range for {n_cls} classes")

    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    d_logits = probs.copy()
    if z.ndim == 1:
        loss = float(-log_probs[labels])
        d_logits[labels] -= 1.0
    else:
        if labels.shape != (z.shape[0],):
            raise DimensionError(f"need {z.shape[0]} labels, got shape {labels.shape}")
        rows = np.arange(z.shape[0])
        loss = -log_probs[rows, labels]
        d_logits[rows, labels] -= 1.0
    return loss, probs, d_logits


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def sigmoid_bce(logit, domain_label):
    """Binary cross-entropy on ``sigmoid(logit)``; returns ``(loss, d_logit)``.

    Works elementwise on arrays; scalar inputs give float outputs.
    """
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(domain_label, dtype=np.float64)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    d = sigmoid(z) - y
    if loss.ndim == 0:
        return float(loss), float(d)
    return loss, d


def mean_pool(frames) -> np.ndarray:
    frames = as_matrix(frames)
    if frames.shape[0] == 0:
        raise EmptyVideoError("cannot pool a video with zero frames")
    return np.add.reduce(frames, axis=0) / frames.shape[0]


def mean_pool_backward(g, n_frames: int) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if n_frames < 1:
        raise EmptyVideoError("cannot pool a video with zero frames")
    return np.broadcast_to(g / n_frames, (n_frames, g.shape[0])).copy()


# Segmented variants: a batch of videos is stored as one stacked frame matrix
# plus per-video row counts. Rows of video k occupy starts[k]:starts[k]+lengths[k].


def segment_starts(lengths: np.ndarray) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size and lengths.min() < 1:
        raise EmptyVideoError("every video needs at least one frame")
    return np.concatenate(([0], np.cumsum(lengths)[:-1])).astype(np.int64)


def segment_mean(rows: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Per-segment column means, shape ``(num_segments, cols)``."""
    starts = segment_starts(lengths)
    return np.add.reduceat(rows, starts, axis=0) / np.asarray(lengths)[:, None]


def segment_broadcast(per_segment: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    return np.repeat(per_segment, lengths, axis=0)
