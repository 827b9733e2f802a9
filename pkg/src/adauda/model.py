"""Action-aware adaptation network: embedder, fully connected GCN, pooling,
verb/noun heads, classifier-weight disentanglement, gradient reversal and
domain discriminator, each with an explicit backward pass.

A batch of videos is carried as one stacked ``(sum T, d_in)`` frame matrix and
a vector of per-video frame counts, so every layer runs as a handful of
matrix products regardless of how many videos are in the batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import DimensionError

RUN_MODES = ("baseline", "ada")
COMBINE_RULES = ("avg", "verb", "noun", "product")

CHECKPOINT_MAGIC = b"ADAM1"
SOURCE_DOMAIN = 1.0
TARGET_DOMAIN = 0.0


class LabelError(IndexError):
    """Ground-truth class index outside the head's vocabulary."""


class StaleCacheError(RuntimeError):
    """A forward cache was replayed against parameters it was not built from."""


class CheckpointError(ValueError):
    pass


@dataclass
class ModelParams:
    embed_w: np.ndarray
    embed_b: np.ndarray
    gcn_layers: list[tuple[np.ndarray, np.ndarray]]
    verb_head_w: np.ndarray
    verb_head_b: np.ndarray
    noun_head_w: np.ndarray
    noun_head_b: np.ndarray
    disc_w1: np.ndarray
    disc_b1: np.ndarray
    disc_w2: np.ndarray
    disc_b2: np.ndarray  # shape (1,)
    version: int = field(default=0, compare=False)

    @property
    def dims(self) -> tuple[int, int, int, int, int, int]:
        """``(d_in, D, L, |V|, |N|, H)``."""
        d_in, d = self.embed_w.shape
        return (
            d_in,
            d,
            len(self.gcn_layers),
            self.verb_head_w.shape[1],
            self.noun_head_w.shape[1],
            self.disc_w1.shape[1],
        )

    def tensors(self) -> list[np.ndarray]:
        """All parameter arrays in checkpoint field order."""
        out = [self.embed_w, self.embed_b]
        for w, b in self.gcn_layers:
            out += [w, b]
        out += [
            self.verb_head_w,
            self.verb_head_b,
            self.noun_head_w,
            self.noun_head_b,
            self.disc_w1,
            self.disc_b1,
            self.disc_w2,
            self.disc_b2,
        ]
        return out

    @classmethod
    def from_tensors(cls, tensors: Sequence[np.ndarray], num_layers: int) -> "ModelParams":
        t = list(tensors)
        gcn = [(t[2 + 2 * i], t[3 + 2 * i]) for i in range(num_layers)]
        rest = t[2 + 2 * num_layers :]
        return cls(t[0], t[1], gcn, *rest)

    def copy(self) -> "ModelParams":
        p = ModelParams.from_tensors([a.copy() for a in self.tensors()], len(self.gcn_layers))
        p.version = self.version
        return p

    def zeros_like(self) -> "ModelParams":
        return ModelParams.from_tensors(
            [np.zeros_like(a) for a in self.tensors()], len(self.gcn_layers)
        )

    def validate(self) -> None:
        d_in, d, n_layers, n_verbs, n_nouns, h = self.dims
        expected = param_shapes(d_in, d, n_layers, n_verbs, n_nouns, h)
        for i, (arr, shape) in enumerate(zip(self.tensors(), expected)):
            if arr.shape != shape:
                raise DimensionError(f"parameter #{i} has shape {arr.shape}, expected {shape}")


def param_shapes(d_in, d, n_layers, n_verbs, n_nouns, h) -> list[tuple[int, ...]]:
    shapes: list[tuple[int, ...]] = [(d_in, d), (d,)]
    shapes += [(d, d), (d,)] * n_layers
    shapes += [(d, n_verbs), (n_verbs,), (d, n_nouns), (n_nouns,), (d, h), (h,), (h, 1), (1,)]
    return shapes


def init_params(
    d_in: int,
    d: int,
    n_layers: int,
    n_verbs: int,
    n_nouns: int,
    hidden: int,
    seed: int = 0,
) -> ModelParams:
    """Glorot-uniform weights, zero biases, drawn in checkpoint field order."""
    rng = np.random.default_rng(seed)
    tensors = []
    for shape in param_shapes(d_in, d, n_layers, n_verbs, n_nouns, hidden):
        if len(shape) == 2:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors.append(rng.uniform(-a, a, size=shape))
        else:
            tensors.append(np.zeros(shape))
    return ModelParams.from_tensors(tensors, n_layers)


# ---------------------------------------------------------------- encoder


def embed(frames, params: ModelParams) -> np.ndarray:
    frames = nx.as_matrix(frames)
    if frames.shape[1] != params.embed_w.shape[0]:
        raise DimensionError(
            f"frames have {frames.shape[1]} features, model expects {params.embed_w.shape[0]}"
        )
    return nx.affine_forward(frames, params.embed_w, params.embed_b)


@dataclass
class _GcnLayerCache:
    agg: np.ndarray  # per-video mean of the layer input, (B, D)
    pre: np.ndarray  # per-video pre-activation, (B, D)


def _gcn_segments(h: np.ndarray, lengths: np.ndarray, params: ModelParams):
    # Â = ones(T,T)/T, so Â·h·W + b is the per-video mean of h through the
    # affine map, repeated on every frame row.
    caches = []
    for w, b in params.gcn_layers:
        agg = nx.segment_mean(h, lengths)
        pre = nx.affine_forward(agg, w, b)
        caches.append(_GcnLayerCache(agg, pre))
        h = nx.segment_broadcast(nx.relu_forward(pre), lengths)
    return h, caches


def gcn_forward(h, params: ModelParams) -> np.ndarray:
    h = nx.as_matrix(h)
    if h.shape[0] == 0:
        raise nx.EmptyVideoError("GCN needs at least one frame")
    if h.shape[1] != params.embed_w.shape[1]:
        raise DimensionError(f"GCN input has {h.shape[1]} columns, D={params.embed_w.shape[1]}")
    out, _ = _gcn_segments(h, np.array([h.shape[0]]), params)
    return out


@dataclass
class EncoderCache:
    """Activations of one batch of videos through embed -> GCN -> pool."""

    frames: np.ndarray
    lengths: np.ndarray
    gcn: list[_GcnLayerCache]
    gcn_out: np.ndarray
    features: np.ndarray  # F_v per video, (B, D)
    version: int
    params_id: int


def encode(videos: Sequence[np.ndarray], params: ModelParams) -> EncoderCache:
    """Video-level features for a batch of ``(T_k, d_in)`` frame matrices."""
    if len(videos) == 0:
        d_in, d = params.embed_w.shape
        empty = np.zeros((0, d))
        return EncoderCache(np.zeros((0, d_in)), np.zeros(0, dtype=np.int64), [], empty, empty,
                            params.version, id(params))
    lengths = np.array([np.shape(v)[0] for v in videos], dtype=np.int64)
    if lengths.min() < 1:
        raise nx.EmptyVideoError("every video needs at least one frame")
    frames = np.concatenate([nx.as_matrix(v) for v in videos], axis=0)
    h = embed(frames, params)
    out, caches = _gcn_segments(h, lengths, params)
    feats = nx.segment_mean(out, lengths)
    return EncoderCache(frames, lengths, caches, out, feats, params.version, id(params))


def video_feature(frames, params: ModelParams) -> tuple[np.ndarray, EncoderCache]:
    frames = nx.as_matrix(frames)
    if frames.shape[0] == 0:
        raise nx.EmptyVideoError("video has zero frames")
    cache = encode([frames], params)
    return cache.features[0], cache


def encoder_backward(cache: EncoderCache, d_features: np.ndarray, params: ModelParams, grads: ModelParams) -> None:
    """Accumulate embedder and GCN gradients into ``grads`` given dL/dF_v."""
    lengths = cache.lengths
    if lengths.size == 0:
        return
    # mean pool backward: each frame row receives g / T
    g_rows = nx.segment_broadcast(d_features / lengths[:, None], lengths)
    for i in range(len(params.gcn_layers) - 1, -1, -1):
        w, _ = params.gcn_layers[i]
        lc = cache.gcn[i]
        # rows of the layer output are repeats of relu(pre); sum their grads
        g_seg = np.add.reduceat(g_rows, nx.segment_starts(lengths), axis=0)
        g_pre = nx.relu_backward(lc.pre, g_seg)
        lg = nx.affine_backward(lc.agg, w, g_pre)
        gw, gb = grads.gcn_layers[i]
        gw += lg.d_weights
        gb += lg.d_bias
        g_rows = nx.segment_broadcast(lg.d_input / lengths[:, None], lengths)
    lg = nx.affine_backward(cache.frames, params.embed_w, g_rows)
    grads.embed_w += lg.d_weights
    grads.embed_b += lg.d_bias


# ---------------------------------------------------------------- heads


def classify(features, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Verb and noun logits for one feature vector or a ``(B, D)`` batch."""
    f = np.asarray(features, dtype=np.float64)
    single = f.ndim == 1
    f2 = f[None, :] if single else f
    verb = nx.affine_forward(f2, params.verb_head_w, params.verb_head_b)
    noun = nx.affine_forward(f2, params.noun_head_w, params.noun_head_b)
    if single:
        return verb[0], noun[0]
    return verb, noun


def _check_labels(labels: np.ndarray, n: int, what: str) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise LabelError(f"{what} label out of range [0, {n})")


def combined_weights(params: ModelParams, verb_gt, noun_gt, rule: str = "avg") -> np.ndarray:
    """Ground-truth classifier weight vector W_p, one row per sample."""
    v = np.atleast_1d(np.asarray(verb_gt, dtype=np.int64))
    n = np.atleast_1d(np.asarray(noun_gt, dtype=np.int64))
    _check_labels(v, params.verb_head_w.shape[1], "verb")
    _check_labels(n, params.noun_head_w.shape[1], "noun")
    wv = params.verb_head_w[:, v].T
    wn = params.noun_head_w[:, n].T
    if rule == "avg":
        return 0.5 * (wv + wn)
    if rule == "verb":
        return wv
    if rule == "noun":
        return wn
    if rule == "product":
        return wv * wn
    raise ValueError(f"unknown combine rule {rule!r}; expected one of {COMBINE_RULES}")


def disentangle(features, params: ModelParams, verb_gt, noun_gt, rule: str = "avg", rectify: bool = False) -> np.ndarray:
    """Action-relevant feature: Hadamard product of F_v with W_p."""
    f = np.asarray(features, dtype=np.float64)
    single = f.ndim == 1
    wp = combined_weights(params, verb_gt, noun_gt, rule)
    out = wp * (f[None, :] if single else f)
    if rectify:
        out = nx.relu_forward(out)
    return out[0] if single else out


def _disentangle_backward(features, params, verb_gt, noun_gt, rule, rectify, g, grads):
    """Returns dL/dF_v; accumulates head-column gradients into ``grads``."""
    wp = combined_weights(params, verb_gt, noun_gt, rule)
    if rectify:
        g = nx.relu_backward(wp * features, g)
    d_feat = g * wp
    d_wp = g * features  # (B, D)
    n_verbs = params.verb_head_w.shape[1]
    n_nouns = params.noun_head_w.shape[1]
    onehot_v = np.eye(n_verbs)[verb_gt]
    onehot_n = np.eye(n_nouns)[noun_gt]
    if rule == "avg":
        grads.verb_head_w += (0.5 * d_wp).T @ onehot_v
        grads.noun_head_w += (0.5 * d_wp).T @ onehot_n
    elif rule == "verb":
        grads.verb_head_w += d_wp.T @ onehot_v
    elif rule == "noun":
        grads.noun_head_w += d_wp.T @ onehot_n
    else:
        wv = params.verb_head_w[:, verb_gt].T
        wn = params.noun_head_w[:, noun_gt].T
        grads.verb_head_w += (d_wp * wn).T @ onehot_v
        grads.noun_head_w += (d_wp * wv).T @ onehot_n
    return d_feat


def grl_forward(x):
    """Identity; the reversal only acts on the backward pass."""
    return x


def grl(g, lambda_grl: float):
    return -lambda_grl * np.asarray(g, dtype=np.float64)


@dataclass
class DiscCache:
    inputs: np.ndarray
    hidden_pre: np.ndarray
    logits: np.ndarray


def _discriminate_batch(x: np.ndarray, params: ModelParams) -> DiscCache:
    pre = nx.affine_forward(x, params.disc_w1, params.disc_b1)
    logits = nx.affine_forward(nx.relu_forward(pre), params.disc_w2, params.disc_b2)[:, 0]
    return DiscCache(x, pre, logits)


def discriminate(feature, params: ModelParams):
    """Domain logit (source-vs-target) for one feature vector or a batch."""
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim == 1:
        return float(_discriminate_batch(f[None, :], params).logits[0])
    return _discriminate_batch(f, params).logits


def _disc_backward(cache: DiscCache, d_logits: np.ndarray, params: ModelParams, grads: ModelParams) -> np.ndarray:
    hidden = nx.relu_forward(cache.hidden_pre)
    lg2 = nx.affine_backward(hidden, params.disc_w2, d_logits[:, None])
    grads.disc_w2 += lg2.d_weights
    grads.disc_b2 += lg2.d_bias
    g_pre = nx.relu_backward(cache.hidden_pre, lg2.d_input)
    lg1 = nx.affine_backward(cache.inputs, params.disc_w1, g_pre)
    grads.disc_w1 += lg1.d_weights
    grads.disc_b1 += lg1.d_bias
    return lg1.d_input


# ---------------------------------------------------------------- full pass


@dataclass
class StepCache:
    """Everything one source+target forward pass produced."""

    source: EncoderCache
    target: EncoderCache
    verb_gt: np.ndarray
    noun_gt: np.ndarray
    verb_logits: np.ndarray
    noun_logits: np.ndarray
    verb_loss: np.ndarray  # per source sample
    noun_loss: np.ndarray
    d_verb: np.ndarray  # per-sample dloss/dlogits
    d_noun: np.ndarray
    disc: DiscCache  # source rows first, then target rows
    domain_labels: np.ndarray
    domain_loss: np.ndarray  # per sample, source then target
    d_domain: np.ndarray
    run_mode: str
    combine_rule: str
    rectify: bool


def forward(
    params: ModelParams,
    source_videos: Sequence[np.ndarray],
    verb_gt,
    noun_gt,
    target_videos: Sequence[np.ndarray],
    run_mode: str = "ada",
    combine_rule: str = "avg",
    rectify: bool = False,
) -> StepCache:
    if run_mode not in RUN_MODES:
        raise ValueError(f"unknown run mode {run_mode!r}; expected one of {RUN_MODES}")
    verb_gt = np.asarray(verb_gt, dtype=np.int64)
    noun_gt = np.asarray(noun_gt, dtype=np.int64)
    if verb_gt.shape != (len(source_videos),) or noun_gt.shape != (len(source_videos),):
        raise DimensionError("one verb and one noun label per source video required")
    _check_labels(verb_gt, params.verb_head_w.shape[1], "verb")
    _check_labels(noun_gt, params.noun_head_w.shape[1], "noun")

    src = encode(source_videos, params)
    tgt = encode(target_videos, params)
    verb_logits, noun_logits = classify(src.features, params)
    verb_loss, _, d_verb = nx.softmax_xent(verb_logits, verb_gt)
    noun_loss, _, d_noun = nx.softmax_xent(noun_logits, noun_gt)

    if run_mode == "ada":
        src_disc_in = disentangle(src.features, params, verb_gt, noun_gt, combine_rule, rectify)
    else:
        src_disc_in = src.features
    disc_in = np.concatenate([grl_forward(src_disc_in), grl_forward(tgt.features)], axis=0)
    disc = _discriminate_batch(disc_in, params)
    domain_labels = np.concatenate(
        [np.full(len(source_videos), SOURCE_DOMAIN), np.full(len(target_videos), TARGET_DOMAIN)]
    )
    domain_loss, d_domain = nx.sigmoid_bce(disc.logits, domain_labels)
    return StepCache(
        src, tgt, verb_gt, noun_gt, verb_logits, noun_logits, verb_loss, noun_loss,
        d_verb, d_noun, disc, domain_labels, domain_loss, d_domain,
        run_mode, combine_rule, rectify,
    )


def backward(
    cache: StepCache,
    params: ModelParams,
    lambda_grl: float = 1.0,
    loss_weight_domain: float = 1.0,
    cls_scale: float = 1.0,
) -> ModelParams:
    """Gradients for ``L = cls_scale*mean(L_verb+L_noun) + w*mean(L_d)``.

    Discriminator weights get the plain gradient of the domain term; everything
    upstream of the discriminator input receives it through the reversal layer,
    i.e. scaled by ``-lambda_grl``.
    """
    for enc in (cache.source, cache.target):
        if enc.version != params.version or enc.params_id != id(params):
            raise StaleCacheError("forward cache does not belong to these parameters")
    grads = params.zeros_like()
    n_src = cache.verb_logits.shape[0]
    n_src_tgt = cache.domain_loss.shape[0]

    # classification heads, averaged over the source batch
    g_verb = cls_scale * cache.d_verb / n_src
    g_noun = cls_scale * cache.d_noun / n_src
    lv = nx.affine_backward(cache.source.features, params.verb_head_w, g_verb)
    ln = nx.affine_backward(cache.source.features, params.noun_head_w, g_noun)
    grads.verb_head_w += lv.d_weights
    grads.verb_head_b += lv.d_bias
    grads.noun_head_w += ln.d_weights
    grads.noun_head_b += ln.d_bias
    d_src = lv.d_input + ln.d_input

    # domain term
    g_logits = loss_weight_domain * cache.d_domain / n_src_tgt
    d_disc_in = grl(_disc_backward(cache.disc, g_logits, params, grads), lambda_grl)
    d_src_disc, d_tgt = d_disc_in[:n_src], d_disc_in[n_src:]
    if cache.run_mode == "ada":
        d_src = d_src + _disentangle_backward(
            cache.source.features, params, cache.verb_gt, cache.noun_gt,
            cache.combine_rule, cache.rectify, d_src_disc, grads,
        )
    else:
        d_src = d_src + d_src_disc

    encoder_backward(cache.source, d_src, params, grads)
    encoder_backward(cache.target, d_tgt, params, grads)
    return grads


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(params: ModelParams) -> bytes:
    """Serialize: magic, six little-endian u32 dims, then every tensor as
    row-major little-endian f64 in field order."""
    params.validate()
    parts = [CHECKPOINT_MAGIC, struct.pack("<6I", *params.dims)]
    parts += [np.ascontiguousarray(t, dtype="<f8").tobytes() for t in params.tensors()]
    return b"".join(parts)


def load_checkpoint(blob: bytes) -> ModelParams:
    if blob[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic at byte offset 0")
    if len(blob) < 5 + 24:
        raise CheckpointError(f"checkpoint header truncated at byte offset {len(blob)}")
    dims = struct.unpack_from("<6I", blob, 5)
    offset = 5 + 24
    tensors = []
    for shape in param_shapes(*dims):
        n = int(np.prod(shape))
        end = offset + 8 * n
        if end > len(blob):
            raise CheckpointError(f"checkpoint payload truncated at byte offset {len(blob)}")
        tensors.append(np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape))
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"trailing bytes after byte offset {offset}")
    return ModelParams.from_tensors(tensors, dims[2])
