"""Feature and label ingestion, verb-noun co-occurrence counts, and a
synthetic source/target generator with a controllable domain shift.

File formats
------------
Feature file (little-endian)::

    b"ADAF1"                      5 bytes
    u32 version = 1
    u32 num_videos
    u32 d_in
    per video:
        u32 id_len, id_len bytes of UTF-8 video id
        u32 T
        T * d_in float32, row-major

Label file: UTF-8 CSV lines ``video_id,verb_id,noun_id`` with an optional
first line ``#verbs=<int> nouns=<int>`` fixing the vocabulary sizes.

Co-occurrence export: TSV, one row per verb, one integer column per noun.
"""

from __future__ import annotations

import io
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"ADAF1"
FEATURE_VERSION = 1

_PRAGMA = re.compile(r"^#\s*verbs\s*=\s*(\d+)\s+nouns\s*=\s*(\d+)\s*$")


class FeatureFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class FeatureDataError(ValueError):
    """Payload decoded but contains non-finite values."""


class LabelParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SynthConfigError(ValueError):
    pass


@dataclass
class FrameFeatureSet:
    videos: list[tuple[str, np.ndarray]]
    d_in: int
    domain_tag: str = "source"

    def __post_init__(self):
        seen = set()
        for vid, frames in self.videos:
            if vid in seen:
                raise ValueError(f"duplicate video id {vid!r}")
            seen.add(vid)
            if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] != self.d_in:
                raise ValueError(f"video {vid!r} has frame matrix {frames.shape}, d_in={self.d_in}")

    def __len__(self) -> int:
        return len(self.videos)

    @property
    def ids(self) -> list[str]:
        return [v for v, _ in self.videos]

    @property
    def frames(self) -> list[np.ndarray]:
        return [f for _, f in self.videos]


@dataclass
class LabelSet:
    entries: dict[str, tuple[int, int]]
    num_verbs: int
    num_nouns: int
    explicit_vocab: bool = False

    def __post_init__(self):
        for vid, (v, n) in self.entries.items():
            if not (0 <= v < self.num_verbs and 0 <= n < self.num_nouns):
                raise ValueError(f"label ({v},{n}) for {vid!r} outside vocab {self.num_verbs}x{self.num_nouns}")

    def __len__(self) -> int:
        return len(self.entries)

    def arrays_for(self, ids) -> tuple[np.ndarray, np.ndarray]:
        missing = [i for i in ids if i not in self.entries]
        if missing:
            raise KeyError(f"no labels for videos: {missing[:10]}")
        pairs = np.array([self.entries[i] for i in ids], dtype=np.int64).reshape(-1, 2)
        return pairs[:, 0], pairs[:, 1]


@dataclass
class CooccurrenceMatrix:
    counts: np.ndarray
    epsilon: float = 0.01

    def mask(self) -> np.ndarray:
        return np.where(self.counts > 0, 1.0, self.epsilon)


# ---------------------------------------------------------------- features


def dump_features(fs: FrameFeatureSet) -> bytes:
    buf = io.BytesIO()
    buf.write(FEATURE_MAGIC)
    buf.write(struct.pack("<III", FEATURE_VERSION, len(fs.videos), fs.d_in))
    for vid, frames in fs.videos:
        raw = vid.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", frames.shape[0]))
        buf.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())
    return buf.getvalue()


def parse_features(blob: bytes, domain_tag: str = "source") -> FrameFeatureSet:
    def need(offset: int, n: int, what: str) -> None:
        if offset + n > len(blob):
            raise FeatureFormatError(f"truncated while reading {what}", offset)

    need(0, 5, "magic")
    if blob[:5] != FEATURE_MAGIC:
        raise FeatureFormatError("bad magic", 0)
    need(5, 12, "header")
    version, n_videos, d_in = struct.unpack_from("<III", blob, 5)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"unsupported version {version}", 5)
    off = 17
    videos = []
    for _ in range(n_videos):
        need(off, 4, "id length")
        (id_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        need(off, id_len, "video id")
        try:
            vid = blob[off : off + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FeatureFormatError("video id is not UTF-8", off) from exc
        off += id_len
        need(off, 4, "frame count")
        (t,) = struct.unpack_from("<I", blob, off)
        off += 4
        if t == 0:
            raise FeatureFormatError(f"video {vid!r} has zero frames", off - 4)
        nbytes = 4 * t * d_in
        need(off, nbytes, f"frames of {vid!r}")
        frames = np.frombuffer(blob, dtype="<f4", count=t * d_in, offset=off)
        if not np.all(np.isfinite(frames)):
            raise FeatureDataError(f"non-finite value in frames of {vid!r} at byte offset {off}")
        videos.append((vid, frames.astype(np.float64).reshape(t, d_in)))
        off += nbytes
    if off != len(blob):
        raise FeatureFormatError("trailing bytes after last video", off)
    return FrameFeatureSet(videos, d_in, domain_tag)


def load_features(path, domain_tag: str = "source") -> FrameFeatureSet:
    return parse_features(Path(path).read_bytes(), domain_tag)


def save_features(fs: FrameFeatureSet, path) -> None:
    Path(path).write_bytes(dump_features(fs))


# ---------------------------------------------------------------- labels


def parse_labels(text: str) -> LabelSet:
    lines = text.splitlines()
    vocab = None
    entries: dict[str, tuple[int, int]] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = _PRAGMA.match(line)
            if m and lineno == 1:
                vocab = (int(m.group(1)), int(m.group(2)))
                continue
            raise LabelParseError(f"unexpected comment or malformed pragma {line!r}", lineno)
        cols = [c.strip() for c in line.split(",")]
        if len(cols) != 3:
            raise LabelParseError(f"expected 3 columns, got {len(cols)}", lineno)
        vid = cols[0]
        try:
            v, n = int(cols[1]), int(cols[2])
        except ValueError:
            raise LabelParseError(f"non-integer class id in {line!r}", lineno) from None
        if v < 0 or n < 0:
            raise LabelParseError(f"negative class id in {line!r}", lineno)
        if vid in entries:
            raise LabelParseError(f"duplicate video id {vid!r}", lineno)
        if vocab and (v >= vocab[0] or n >= vocab[1]):
            raise LabelParseError(f"class id exceeds declared vocab {vocab}", lineno)
        entries[vid] = (v, n)
    if vocab is not None:
        return LabelSet(entries, vocab[0], vocab[1], explicit_vocab=True)
    n_verbs = 1 + max((v for v, _ in entries.values()), default=-1)
    n_nouns = 1 + max((n for _, n in entries.values()), default=-1)
    return LabelSet(entries, n_verbs, n_nouns)


def dump_labels(labels: LabelSet) -> str:
    out = []
    if labels.explicit_vocab:
        out.append(f"#verbs={labels.num_verbs} nouns={labels.num_nouns}\n")
    out += [f"{vid},{v},{n}\n" for vid, (v, n) in labels.entries.items()]
    return "".join(out)


def load_labels(path) -> LabelSet:
    return parse_labels(Path(path).read_text(encoding="utf-8"))


def save_labels(labels: LabelSet, path) -> None:
    Path(path).write_bytes(dump_labels(labels).encode("utf-8"))


# ---------------------------------------------------------------- co-occurrence


def build_cooccurrence(labels: LabelSet, epsilon: float = 0.01) -> CooccurrenceMatrix:
    counts = np.zeros((labels.num_verbs, labels.num_nouns), dtype=np.int64)
    for v, n in labels.entries.values():
        counts[v, n] += 1
    return CooccurrenceMatrix(counts, epsilon)


def dump_cooccurrence(cooc: CooccurrenceMatrix) -> str:
    return "".join("\t".join(str(int(c)) for c in row) + "\n" for row in cooc.counts)


def parse_cooccurrence(text: str, epsilon: float = 0.01) -> CooccurrenceMatrix:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = [int(c) for c in line.split("\t")]
        except ValueError:
            raise LabelParseError(f"non-integer count in {line!r}", lineno) from None
        if any(c < 0 for c in row):
            raise LabelParseError("negative co-occurrence count", lineno)
        if rows and len(row) != len(rows[0]):
            raise LabelParseError(f"ragged row: {len(row)} columns, expected {len(rows[0])}", lineno)
        rows.append(row)
    counts = np.array(rows, dtype=np.int64) if rows else np.zeros((0, 0), dtype=np.int64)
    return CooccurrenceMatrix(counts, epsilon)


def load_cooccurrence(path, epsilon: float = 0.01) -> CooccurrenceMatrix:
    return parse_cooccurrence(Path(path).read_text(encoding="utf-8"), epsilon)


def save_cooccurrence(cooc: CooccurrenceMatrix, path) -> None:
    Path(path).write_bytes(dump_cooccurrence(cooc).encode("utf-8"))


# ---------------------------------------------------------------- synthetic


@dataclass
class SynthConfig:
    num_verbs: int = 6
    num_nouns: int = 8
    valid_pair_fraction: float = 0.5
    d_in: int = 32
    min_frames: int = 4
    max_frames: int = 8
    source_samples: int = 480
    target_samples: int = 480
    action_signal_dim: int = 12
    nuisance_dim: int = 16
    domain_shift_magnitude: float = 1.1
    label_noise: float = 0.0
    signal_scale: float = 1.5
    frame_noise: float = 1.0
    rng_seed: int = 0

    def validate(self) -> None:
        if self.num_verbs < 1 or self.num_nouns < 1:
            raise SynthConfigError("need at least one verb and one noun")
        if not 0.0 < self.valid_pair_fraction <= 1.0:
            raise SynthConfigError("valid_pair_fraction must lie in (0, 1]")
        if self.action_signal_dim < 1 or self.nuisance_dim < 0:
            raise SynthConfigError("action_signal_dim must be >= 1 and nuisance_dim >= 0")
        if self.action_signal_dim + self.nuisance_dim > self.d_in:
            raise SynthConfigError("action_signal_dim + nuisance_dim exceeds d_in")
        if not 1 <= self.min_frames <= self.max_frames:
            raise SynthConfigError("need 1 <= min_frames <= max_frames")
        if self.source_samples < 0 or self.target_samples < 0:
            raise SynthConfigError("sample counts must be non-negative")
        if not 0.0 <= self.label_noise <= 1.0:
            raise SynthConfigError("label_noise must lie in [0, 1]")
        if self.num_valid_pairs < max(self.num_verbs, self.num_nouns):
            raise SynthConfigError(
                f"{self.num_valid_pairs} valid pairs cannot cover "
                f"{self.num_verbs} verbs and {self.num_nouns} nouns"
            )

    @property
    def num_valid_pairs(self) -> int:
        return math.ceil(self.valid_pair_fraction * self.num_verbs * self.num_nouns - 1e-9)


@dataclass
class SyntheticDomain:
    features: FrameFeatureSet
    labels: LabelSet


@dataclass
class SyntheticData:
    source: SyntheticDomain
    target: SyntheticDomain
    valid_pairs: list[tuple[int, int]] = field(default_factory=list)


def _valid_pairs(cfg: SynthConfig, rng: np.random.Generator) -> list[tuple[int, int]]:
    nv, nn_ = cfg.num_verbs, cfg.num_nouns
    pv = rng.permutation(nv)
    pn = rng.permutation(nn_)
    chosen = {(int(pv[k % nv]), int(pn[k % nn_])) for k in range(max(nv, nn_))}
    rest = [(v, n) for v in range(nv) for n in range(nn_) if (v, n) not in chosen]
    extra = cfg.num_valid_pairs - len(chosen)
    if extra > 0:
        pick = rng.choice(len(rest), size=extra, replace=False)
        chosen.update(rest[i] for i in pick)
    return sorted(chosen)


def _random_rotation(k: int, rng: np.random.Generator) -> np.ndarray:
    if k == 0:
        return np.zeros((0, 0))
    q, r = np.linalg.qr(rng.normal(size=(k, k)))
    return q * np.sign(np.diag(r))


def generate_synthetic(cfg: SynthConfig) -> SyntheticData:
    """Draw a labelled source domain and a target domain with shifted nuisance.

    Each frame is ``verb_proto + noun_proto`` in the first ``action_signal_dim``
    coordinates (the action signal, shared by both domains), plus a nuisance
    block in the next ``nuisance_dim`` coordinates, plus iid Gaussian noise.
    The nuisance block carries a class-correlated pattern that is rotated by a
    domain-specific orthogonal matrix and offset by a domain-specific vector,
    both scaled by ``domain_shift_magnitude``; at magnitude 0 the two domains
    are identically distributed. Target labels are emitted for evaluation.
    Values are rounded to float32 so that files and memory agree exactly.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    pairs = _valid_pairs(cfg, rng)
    a, k = cfg.action_signal_dim, cfg.nuisance_dim

    verb_proto = rng.normal(size=(cfg.num_verbs, a))
    noun_proto = rng.normal(size=(cfg.num_nouns, a))
    verb_proto *= cfg.signal_scale / np.linalg.norm(verb_proto, axis=1, keepdims=True) * math.sqrt(a) / 2
    noun_proto *= cfg.signal_scale / np.linalg.norm(noun_proto, axis=1, keepdims=True) * math.sqrt(a) / 2
    nuis_pattern = rng.normal(size=(len(pairs), k))

    domains = {}
    for tag, n_samples in (("source", cfg.source_samples), ("target", cfg.target_samples)):
        rot = _random_rotation(k, rng)
        offset = rng.normal(size=k)
        pair_idx = rng.integers(0, len(pairs), size=n_samples)
        lengths = rng.integers(cfg.min_frames, cfg.max_frames + 1, size=n_samples)
        videos = []
        entries = {}
        for i in range(n_samples):
            v, n = pairs[pair_idx[i]]
            t = int(lengths[i])
            frames = np.zeros((t, cfg.d_in))
            frames[:, :a] = verb_proto[v] + noun_proto[n]
            if k:
                nuis = rot @ nuis_pattern[pair_idx[i]] + offset
                frames[:, a : a + k] = cfg.domain_shift_magnitude * nuis
            frames += cfg.frame_noise * rng.normal(size=frames.shape)
            vid = f"{tag[0]}{i:06d}"
            videos.append((vid, frames.astype(np.float32).astype(np.float64)))
            if tag == "source" and cfg.label_noise > 0 and rng.random() < cfg.label_noise:
                v, n = pairs[rng.integers(0, len(pairs))]
            entries[vid] = (v, n)
        fs = FrameFeatureSet(videos, cfg.d_in, tag)
        labels = LabelSet(entries, cfg.num_verbs, cfg.num_nouns, explicit_vocab=True)
        domains[tag] = SyntheticDomain(fs, labels)
    return SyntheticData(domains["source"], domains["target"], pairs)
