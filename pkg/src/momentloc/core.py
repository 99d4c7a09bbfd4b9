"""Domain types, feature-index/time conversions, and localization metrics.

Everything here is a pure function on immutable values; no randomness, no I/O.
Times are in seconds, feature indices are 1-based (position 1 is the first
feature vector), and spans are half-agnostic closed intervals on the time axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Span:
    """A time interval in seconds, ``start <= end``."""

    start: float
    end: float

    def __post_init__(self) -> None:
        if self.start < 0 or self.end < 0:
            raise ValueError(f"span endpoints must be >= 0, got ({self.start}, {self.end})")
        if self.start > self.end:
            raise ValueError(f"span start {self.start} > end {self.end}")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class FeatureSequence:
    """A video as a sequence of ``n`` feature vectors of width ``d_v``.

    ``fps`` and ``frame_count`` carry the frame-rate metadata of the source
    video; ``duration`` is derived as ``frame_count / fps``.
    """

    features: np.ndarray  # (n, d_v)
    fps: float
    frame_count: int

    def __post_init__(self) -> None:
        feats = np.asarray(self.features)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError(f"features must be a non-empty 2-D matrix, got shape {feats.shape}")
        if not np.isfinite(feats).all():
            raise ValueError("features contain non-finite entries")
        if not (self.fps > 0):
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.frame_count < 1:
            raise ValueError(f"frame_count must be >= 1, got {self.frame_count}")
        object.__setattr__(self, "features", feats)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d_v(self) -> int:
        return self.features.shape[1]

    @property
    def duration(self) -> float:
        return self.frame_count / self.fps


@dataclass(frozen=True)
class MomentAnnotation:
    """A query with its ground-truth span, in seconds and in feature indices."""

    query_tokens: tuple[int, ...]
    start_s: float
    end_s: float
    feat_start: int  # 1-based index into the feature sequence
    feat_end: int

    def __post_init__(self) -> None:
        if len(self.query_tokens) < 1:
            raise ValueError("query_tokens must be non-empty")
        if not (0 <= self.start_s < self.end_s):
            raise ValueError(f"need 0 <= start_s < end_s, got ({self.start_s}, {self.end_s})")
        if not (1 <= self.feat_start <= self.feat_end):
            raise ValueError(f"need 1 <= feat_start <= feat_end, got ({self.feat_start}, {self.feat_end})")
        object.__setattr__(self, "query_tokens", tuple(int(t) for t in self.query_tokens))

    @property
    def span(self) -> Span:
        return Span(self.start_s, self.end_s)


def frame_time_to_feature_index(t: float, seq: FeatureSequence) -> int:
    """Map a time ``t`` in seconds to the 1-based index of the nearest feature.

    Uses the index/time mapping ``tau = (t * fps * n) / l`` (``t * fps`` is a
    frame index, scaled into feature positions), rounded half-up and clamped
    to ``[1, n]``.
    """
    if not (0 <= t <= seq.duration):
        raise ValueError(f"t={t} outside [0, {seq.duration}]")
    tau = t * seq.fps * seq.n / seq.frame_count
    idx = int(math.floor(tau + 0.5))
    return min(max(idx, 1), seq.n)


def annotate(seq: FeatureSequence, query_tokens, start_s: float, end_s: float) -> MomentAnnotation:
    """Build a MomentAnnotation for ``seq``, deriving feature indices from seconds."""
    if not (0 <= start_s < end_s <= seq.duration + 1e-9):
        raise ValueError(f"need 0 <= start < end <= duration, got ({start_s}, {end_s}) on {seq.duration}")
    fs = frame_time_to_feature_index(start_s, seq)
    fe = frame_time_to_feature_index(min(end_s, seq.duration), seq)
    return MomentAnnotation(tuple(query_tokens), float(start_s), float(end_s), fs, max(fs, fe))


def bucket_index_to_span(k: int, m_buckets: int, duration: float) -> Span:
    """Seconds covered by bucket ``k`` of ``m_buckets`` over a ``duration``-long video."""
    if not (1 <= k <= m_buckets):
        raise ValueError(f"bucket index {k} outside [1, {m_buckets}]")
    width = duration / m_buckets
    return Span((k - 1) * width, k * width)


def tiou(a: Span, b: Span) -> float:
    """Temporal intersection-over-union of two spans; 0 when disjoint."""
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start)
    if union <= 0:
        # both spans are the same zero-length point; defined as 0 to avoid 0/0
        return 0.0
    return inter / union


def recall_at(alpha: float, pairs: list[tuple[Span, Span]]) -> float:
    """Fraction of (prediction, ground truth) pairs with tIoU >= ``alpha``.

    The threshold is inclusive: a pair at exactly ``alpha`` counts as recalled.
    """
    if not (0 < alpha < 1):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if not pairs:
        raise ValueError("recall_at needs at least one pair")
    hit = sum(1 for pred, gt in pairs if tiou(pred, gt) >= alpha)
    return hit / len(pairs)


def mean_iou(pairs: list[tuple[Span, Span]]) -> float:
    """Arithmetic mean of tIoU over (prediction, ground truth) pairs."""
    if not pairs:
        raise ValueError("mean_iou needs at least one pair")
    return sum(tiou(pred, gt) for pred, gt in pairs) / len(pairs)


def evaluate_pairs(pairs: list[tuple[Span, Span]], alphas=(0.3, 0.5, 0.7)) -> dict[str, float]:
    """Summarize recall at each threshold plus mean tIoU for a set of pairs."""
    out = {f"R@{a:g}": recall_at(a, pairs) for a in alphas}
    out["mIoU"] = mean_iou(pairs)
    return out
