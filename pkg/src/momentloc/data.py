"""Synthetic dataset generation and the on-disk formats.

Feature file (binary, little-endian):

    magic "LGFE" | u16 version=1 | u32 n | u32 d_v | f32 fps | u32 frame_count
    | n * d_v float32 values, row-major

Manifest: UTF-8 JSON lines, one record per line with fields
{video_id, feature_path, duration_s, query_tokens, start_s, end_s}; unknown
fields are ignored with a warning. Predictions: JSON lines with
{video_id, pred_start_s, pred_end_s, tiou}.

The synthetic task plants a query-dependent pattern vector on the feature
rows inside the moment, so a small model can learn localization from scratch;
generation is driven by numpy's PCG64 stream and is bit-reproducible per seed.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .core import FeatureSequence, MomentAnnotation, annotate
from .model import FIRST_CONTENT_ID

FEATURE_MAGIC = b"LGFE"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<IIfI")  # n, d_v, fps, frame_count (after magic+version)

FRAMES_PER_FEATURE = 16  # synthetic videos carry 16 frames per feature row


class FormatError(ValueError):
    """A malformed binary file; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ManifestError(ValueError):
    """A malformed manifest record; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"{message} (manifest line {line})")
        self.line = line


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the planted-signal synthetic localization task."""

    num_examples: int = 500
    n_range: tuple[int, int] = (380, 420)
    d_v: int = 16
    fps: float = 25.0
    vocab: int = 16
    signal_strength: float = 1.0
    moment_frac_range: tuple[float, float] = (0.15, 0.45)
    seed: int = 0
    query_len_range: tuple[int, int] = (3, 6)

    def __post_init__(self) -> None:
        if self.num_examples < 1:
            raise ValueError("num_examples must be >= 1")
        lo, hi = self.moment_frac_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"moment_frac_range must satisfy 0 < lo <= hi <= 1, got {self.moment_frac_range}")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be >= 0")
        if self.n_range[0] < 1 or self.n_range[0] > self.n_range[1]:
            raise ValueError(f"bad n_range {self.n_range}")
        if self.vocab <= FIRST_CONTENT_ID:
            raise ValueError(f"vocab must exceed {FIRST_CONTENT_ID}")
        if self.query_len_range[0] < 1 or self.query_len_range[0] > self.query_len_range[1]:
            raise ValueError(f"bad query_len_range {self.query_len_range}")


def pattern_vector(token: int, d_v: int) -> np.ndarray:
    """The fixed pattern planted for query token ``token``.

    A plain standard-normal direction (typical norm sqrt(d_v)), so at unit
    signal strength the planted shift has the natural scale of a feature row.
    """
    rng = np.random.Generator(np.random.PCG64(0x5EED0000 + token))
    return rng.standard_normal(d_v)


def gen_example(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[FeatureSequence, MomentAnnotation]:
    """One synthetic (video, query, span) example.

    Background rows are iid standard normal; the rows inside a uniformly
    placed moment additionally receive ``signal_strength * pattern(q)`` where
    q is the first query token.
    """
    n = int(rng.integers(spec.n_range[0], spec.n_range[1], endpoint=True))
    feats = rng.standard_normal((n, spec.d_v))

    qlen = int(rng.integers(spec.query_len_range[0], spec.query_len_range[1], endpoint=True))
    tokens = rng.integers(FIRST_CONTENT_ID, spec.vocab, size=qlen)
    q = int(tokens[0])

    frame_count = n * FRAMES_PER_FEATURE
    duration = frame_count / spec.fps
    frac = rng.uniform(spec.moment_frac_range[0], spec.moment_frac_range[1])
    length_s = frac * duration
    start_s = rng.uniform(0.0, duration - length_s)
    end_s = min(start_s + length_s, duration)

    seq = FeatureSequence(feats, spec.fps, frame_count)
    ann = annotate(seq, tokens, start_s, end_s)
    feats[ann.feat_start - 1 : ann.feat_end] += spec.signal_strength * pattern_vector(q, spec.d_v)
    return FeatureSequence(feats, spec.fps, frame_count), ann


def gen_dataset(spec: SyntheticSpec) -> list[tuple[FeatureSequence, MomentAnnotation]]:
    rng = np.random.default_rng(spec.seed)
    return [gen_example(spec, rng) for _ in range(spec.num_examples)]


# -- feature files ------------------------------------------------------------


def write_features(path, seq: FeatureSequence) -> None:
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<H", FEATURE_VERSION))
        f.write(_HEADER.pack(seq.n, seq.d_v, seq.fps, seq.frame_count))
        f.write(np.ascontiguousarray(seq.features, dtype="<f4").tobytes())


def read_features(path) -> FeatureSequence:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {FEATURE_MAGIC!r}", 0)
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature-file version {version}", 4)
    if len(data) < 6 + _HEADER.size:
        raise FormatError("truncated header", len(data))
    n, d_v, fps, frame_count = _HEADER.unpack_from(data, 6)
    payload_off = 6 + _HEADER.size
    expected = n * d_v * 4
    got = len(data) - payload_off
    if got != expected:
        raise FormatError(f"payload holds {got} bytes, expected {expected}", payload_off + min(got, expected))
    feats = np.frombuffer(data, dtype="<f4", count=n * d_v, offset=payload_off)
    return FeatureSequence(feats.reshape(n, d_v).astype(np.float64), float(fps), int(frame_count))


# -- manifests ----------------------------------------------------------------

MANIFEST_FIELDS = ("video_id", "feature_path", "duration_s", "query_tokens", "start_s", "end_s")


@dataclass(frozen=True)
class ManifestRecord:
    video_id: str
    feature_path: str
    duration_s: float
    query_tokens: tuple[int, ...]
    start_s: float
    end_s: float


def write_manifest(path, records: list[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps({
                "video_id": r.video_id,
                "feature_path": r.feature_path,
                "duration_s": r.duration_s,
                "query_tokens": list(r.query_tokens),
                "start_s": r.start_s,
                "end_s": r.end_s,
            }) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    records: list[ManifestRecord] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"invalid JSON: {e.msg}", lineno) from None
            for fieldname in MANIFEST_FIELDS:
                if fieldname not in obj:
                    raise ManifestError(f"missing required field {fieldname!r}", lineno)
            unknown = set(obj) - set(MANIFEST_FIELDS)
            if unknown:
                warnings.warn(f"manifest line {lineno}: ignoring unknown fields {sorted(unknown)}")
            start_s, end_s = float(obj["start_s"]), float(obj["end_s"])
            if start_s >= end_s:
                raise ManifestError(f"start_s {start_s} must be < end_s {end_s}", lineno)
            if start_s < 0:
                raise ManifestError(f"start_s {start_s} must be >= 0", lineno)
            tokens = obj["query_tokens"]
            if not isinstance(tokens, list) or not tokens:
                raise ManifestError("query_tokens must be a non-empty list", lineno)
            records.append(ManifestRecord(
                str(obj["video_id"]), str(obj["feature_path"]), float(obj["duration_s"]),
                tuple(int(t) for t in tokens), start_s, end_s,
            ))
    return records


def write_predictions(path, rows: list[dict]) -> None:
    """JSON-lines prediction output: {video_id, pred_start_s, pred_end_s, tiou}."""
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps({
                "video_id": row["video_id"],
                "pred_start_s": row["pred_start_s"],
                "pred_end_s": row["pred_end_s"],
                "tiou": row["tiou"],
            }) + "\n")


def export_dataset(dirpath, spec: SyntheticSpec, prefix: str = "ex") -> str:
    """Write a synthetic dataset as feature files plus a manifest; returns the
    manifest path."""
    import os

    os.makedirs(dirpath, exist_ok=True)
    records = []
    for i, (seq, ann) in enumerate(gen_dataset(spec)):
        fname = f"{prefix}{i:05d}.feat"
        write_features(os.path.join(dirpath, fname), seq)
        records.append(ManifestRecord(
            video_id=f"{prefix}{i:05d}", feature_path=fname, duration_s=seq.duration,
            query_tokens=ann.query_tokens, start_s=ann.start_s, end_s=ann.end_s,
        ))
    manifest = os.path.join(dirpath, "manifest.jsonl")
    write_manifest(manifest, records)
    return manifest
