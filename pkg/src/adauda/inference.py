"""Action probabilities from verb/noun branches, co-occurrence refinement,
top-k evaluation and multi-model ensembling.

Prediction files are JSON lines::

    {"video_id": "...", "p_verb": [...], "p_noun": [...]}

Refined or ensembled outputs add ``"p_action"``, the |V|x|N| action matrix
flattened row-major.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import model as M
from . import numerics as nx
from .data import CooccurrenceMatrix, FrameFeatureSet, LabelSet

NORMALIZATION_TOL = 1e-6


class ProbabilityError(ValueError):
    """Input vector is not a probability distribution."""


class CoverageError(KeyError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass
class Prediction:
    p_verb: np.ndarray
    p_noun: np.ndarray
    p_action: Optional[np.ndarray] = None  # (|V|, |N|), refined or ensembled

    def action_matrix(self) -> np.ndarray:
        """Stored action matrix if any, else the composed one."""
        if self.p_action is not None:
            return self.p_action
        return compose_action(self.p_verb, self.p_noun)


# video_id -> Prediction, in file order
PredictionSet = dict


@dataclass(frozen=True)
class MetricsReport:
    verb_top1: float
    verb_top5: float
    noun_top1: float
    noun_top5: float
    action_top1: float
    action_top5: float
    count: int

    def to_dict(self) -> dict:
        return {
            "verb_top1": self.verb_top1,
            "verb_top5": self.verb_top5,
            "noun_top1": self.noun_top1,
            "noun_top5": self.noun_top5,
            "action_top1": self.action_top1,
            "action_top5": self.action_top5,
            "count": self.count,
        }


def _check_distribution(p: np.ndarray, name: str) -> None:
    if p.ndim != 1 or p.size == 0:
        raise ProbabilityError(f"{name} must be a non-empty vector, got shape {p.shape}")
    if np.any(p < -NORMALIZATION_TOL) or abs(p.sum() - 1.0) > NORMALIZATION_TOL:
        raise ProbabilityError(f"{name} is not normalized (sum={p.sum():.9g})")


def compose_action(p_verb, p_noun) -> np.ndarray:
    p_verb = np.asarray(p_verb, dtype=np.float64)
    p_noun = np.asarray(p_noun, dtype=np.float64)
    _check_distribution(p_verb, "p_verb")
    _check_distribution(p_noun, "p_noun")
    return np.outer(p_verb, p_noun)


def mask(cooc: CooccurrenceMatrix) -> np.ndarray:
    return cooc.mask()


def refine(p_action, action_mask) -> np.ndarray:
    p_action = np.asarray(p_action, dtype=np.float64)
    action_mask = np.asarray(action_mask, dtype=np.float64)
    if p_action.shape != action_mask.shape:
        raise nx.DimensionError(
            f"action matrix {p_action.shape} does not match mask {action_mask.shape}"
        )
    return p_action * action_mask


def rank_desc(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties to the lowest index."""
    return np.lexsort((np.arange(scores.size), -scores.ravel()))


def _hit_ranks(score_rows: np.ndarray, gt: np.ndarray) -> np.ndarray:
    # 0-based rank of the gt entry under descending order with lowest-index ties:
    # entries strictly greater, plus equal entries at a lower index.
    gt_score = score_rows[np.arange(len(gt)), gt][:, None]
    idx = np.arange(score_rows.shape[1])[None, :]
    better = (score_rows > gt_score) | ((score_rows == gt_score) & (idx < gt[:, None]))
    return better.sum(axis=1)


def topk_metrics(preds: PredictionSet, labels: LabelSet, use_refined: bool = False) -> MetricsReport:
    """Top-1/top-5 verb, noun and action accuracy over every labelled video.

    Action scores are the stored ``p_action`` matrix when ``use_refined`` is
    set (required to be present), otherwise the outer product of the verb and
    noun distributions.
    """
    ids = list(labels.entries)
    missing = [i for i in ids if i not in preds]
    if missing:
        raise CoverageError(f"no predictions for {len(missing)} videos: {missing[:20]}")
    if not ids:
        return MetricsReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0)
    n_verbs, n_nouns = labels.num_verbs, labels.num_nouns
    verb_gt = np.array([labels.entries[i][0] for i in ids])
    noun_gt = np.array([labels.entries[i][1] for i in ids])
    pv = np.stack([preds[i].p_verb for i in ids])
    pn = np.stack([preds[i].p_noun for i in ids])
    if pv.shape[1] != n_verbs or pn.shape[1] != n_nouns:
        raise nx.DimensionError(
            f"predictions are {pv.shape[1]}x{pn.shape[1]}, labels declare {n_verbs}x{n_nouns}"
        )
    if use_refined:
        absent = [i for i in ids if preds[i].p_action is None]
        if absent:
            raise CoverageError(f"no refined action matrix for {absent[:20]}")
        pa = np.stack([preds[i].p_action.reshape(-1) for i in ids])
    else:
        pa = np.einsum("bi,bj->bij", pv, pn).reshape(len(ids), -1)
    action_gt = verb_gt * n_nouns + noun_gt

    rv = _hit_ranks(pv, verb_gt)
    rn = _hit_ranks(pn, noun_gt)
    ra = _hit_ranks(pa, action_gt)
    return MetricsReport(
        verb_top1=float(np.mean(rv < 1)),
        verb_top5=float(np.mean(rv < 5)),
        noun_top1=float(np.mean(rn < 1)),
        noun_top5=float(np.mean(rn < 5)),
        action_top1=float(np.mean(ra < 1)),
        action_top5=float(np.mean(ra < 5)),
        count=len(ids),
    )


def refine_predictions(preds: PredictionSet, action_mask: np.ndarray) -> PredictionSet:
    return {
        vid: Prediction(p.p_verb, p.p_noun, refine(p.action_matrix(), action_mask))
        for vid, p in preds.items()
    }


def ensemble(
    pred_sets: Sequence[PredictionSet],
    weights: Optional[Sequence[float]] = None,
    action_mask: Optional[np.ndarray] = None,
    refine_first: bool = True,
) -> PredictionSet:
    """Weighted mean of per-model action matrices (and of verb/noun marginals).

    With ``action_mask`` given, each model's action matrix is refined before
    averaging (``refine_first``) or the average is refined afterwards.
    """
    if not pred_sets:
        raise ValueError("nothing to ensemble")
    if weights is None:
        weights = [1.0] * len(pred_sets)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(pred_sets),):
        raise ValueError(f"{len(pred_sets)} prediction sets but {w.size} weights")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be non-negative and not all zero")
    w = w / w.sum()

    ids = list(pred_sets[0])
    for k, ps in enumerate(pred_sets[1:], start=1):
        if set(ps) != set(ids):
            diff = sorted(set(ps) ^ set(ids))
            raise AlignmentError(f"prediction set {k} covers different videos: {diff[:20]}")

    out: PredictionSet = {}
    for vid in ids:
        members = [ps[vid] for ps in pred_sets]
        shape = (members[0].p_verb.size, members[0].p_noun.size)
        if any((m.p_verb.size, m.p_noun.size) != shape for m in members):
            raise AlignmentError(f"vocabulary sizes disagree for video {vid!r}")
        mats = [m.action_matrix() for m in members]
        if action_mask is not None and refine_first:
            mats = [refine(a, action_mask) for a in mats]
        pa = sum(wk * a for wk, a in zip(w, mats))
        if action_mask is not None and not refine_first:
            pa = refine(pa, action_mask)
        pv = sum(wk * m.p_verb for wk, m in zip(w, members))
        pn = sum(wk * m.p_noun for wk, m in zip(w, members))
        out[vid] = Prediction(pv, pn, pa)
    return out


# ---------------------------------------------------------------- model glue


def predict(params: M.ModelParams, features: FrameFeatureSet, batch_size: int = 256) -> PredictionSet:
    d_in = params.embed_w.shape[0]
    if features.d_in != d_in:
        raise nx.DimensionError(f"features have d_in={features.d_in}, checkpoint expects d_in={d_in}")
    out: PredictionSet = {}
    ids = features.ids
    frames = features.frames
    for start in range(0, len(ids), batch_size):
        enc = M.encode(frames[start : start + batch_size], params)
        verb_logits, noun_logits = M.classify(enc.features, params)
        pv = nx.softmax(verb_logits)
        pn = nx.softmax(noun_logits)
        for k, vid in enumerate(ids[start : start + batch_size]):
            out[vid] = Prediction(pv[k], pn[k])
    return out


def evaluate_params(params: M.ModelParams, features: FrameFeatureSet, labels: LabelSet,
                    action_mask: Optional[np.ndarray] = None) -> MetricsReport:
    preds = predict(params, features)
    preds = {vid: preds[vid] for vid in labels.entries}
    if action_mask is not None:
        return topk_metrics(refine_predictions(preds, action_mask), labels, use_refined=True)
    return topk_metrics(preds, labels)


# ---------------------------------------------------------------- file io


def dump_predictions(preds: PredictionSet) -> str:
    lines = []
    for vid, p in preds.items():
        rec = {"video_id": vid, "p_verb": p.p_verb.tolist(), "p_noun": p.p_noun.tolist()}
        if p.p_action is not None:
            rec["p_action"] = p.p_action.reshape(-1).tolist()
        lines.append(json.dumps(rec) + "\n")
    return "".join(lines)


def parse_predictions(lines: Iterable[str]) -> PredictionSet:
    out: PredictionSet = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            vid = rec["video_id"]
            pv = np.asarray(rec["p_verb"], dtype=np.float64)
            pn = np.asarray(rec["p_noun"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"prediction line {lineno}: {exc}") from None
        if vid in out:
            raise ValueError(f"prediction line {lineno}: duplicate video id {vid!r}")
        pa = None
        if "p_action" in rec:
            pa = np.asarray(rec["p_action"], dtype=np.float64)
            if pa.size != pv.size * pn.size:
                raise ValueError(
                    f"prediction line {lineno}: p_action has {pa.size} entries, expected {pv.size * pn.size}"
                )
            pa = pa.reshape(pv.size, pn.size)
        out[vid] = Prediction(pv, pn, pa)
    return out


def load_predictions(path) -> PredictionSet:
    with open(path, encoding="utf-8") as fh:
        return parse_predictions(fh)


def save_predictions(preds: PredictionSet, path) -> None:
    Path(path).write_bytes(dump_predictions(preds).encode("utf-8"))
