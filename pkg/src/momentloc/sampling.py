"""Bucket construction and feature-sequence down-sampling strategies.

All samplers reduce an n-row feature sequence to at most ``b`` rows, which is
what bounds the localization model's memory. Bucketed samplers share the same
BucketPlan machinery: a plan partitions the 1-based index range [1..n] into
ordered, disjoint, covering buckets. Stochastic samplers take an explicit
numpy Generator owned by the caller, so results are reproducible per seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import FeatureSequence, MomentAnnotation

SAMPLER_MODES = ("sbfs", "max", "mean", "random", "frvs", "dtw", "drfs", "passthrough")


@dataclass(frozen=True)
class BucketPlan:
    """A partition of feature indices [1..n] into at most ``b`` buckets.

    ``lo``/``hi`` are 1-based inclusive per-bucket bounds. Uniform plans from
    make_bucket_plan use equal widths of ceil(n/b) (the last bucket absorbs
    the tail); data-informed plans (drfs/dtw) may have variable widths.
    """

    n: int
    b: int
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.lo, dtype=np.int64)
        hi = np.asarray(self.hi, dtype=np.int64)
        if lo.size == 0 or lo.size != hi.size:
            raise ValueError("bucket bounds must be non-empty and paired")
        if lo.size > self.b:
            raise ValueError(f"{lo.size} buckets exceed budget b={self.b}")
        if lo[0] != 1 or hi[-1] != self.n:
            raise ValueError("buckets must cover [1..n]")
        if (lo > hi).any() or (lo[1:] != hi[:-1] + 1).any():
            raise ValueError("buckets must be ordered, disjoint, and contiguous")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def m_buckets(self) -> int:
        return int(self.lo.size)

    @property
    def width(self) -> int:
        return math.ceil(self.n / self.b)

    @property
    def is_passthrough(self) -> bool:
        return self.m_buckets == self.n


@dataclass(frozen=True)
class SampledSequence:
    """At most ``b`` feature rows, one per bucket (selected or pooled)."""

    features: np.ndarray  # (m_buckets, d_v)
    source_index: np.ndarray | None  # per-row chosen source index, absent for pooled modes
    mode: str

    def __post_init__(self) -> None:
        if self.mode not in SAMPLER_MODES:
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        feats = np.asarray(self.features)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"sampled features must be a non-empty matrix, got {feats.shape}")
        object.__setattr__(self, "features", feats)
        if self.source_index is not None:
            idx = np.asarray(self.source_index, dtype=np.int64)
            if idx.shape != (feats.shape[0],):
                raise ValueError("source_index must have one entry per sampled row")
            object.__setattr__(self, "source_index", idx)

    @property
    def rows(self) -> int:
        return int(self.features.shape[0])


def make_bucket_plan(n: int, b: int) -> BucketPlan:
    """Partition [1..n] into m(n,b) = floor(n / ceil(n/b)) equal-width buckets.

    When n <= b every index gets its own bucket (passthrough). Otherwise the
    plan uses width ceil(n/b); the trailing indices that an exact floor split
    would leave over are absorbed into the last bucket so that every feature
    stays reachable.
    """
    if n < 1 or b < 1:
        raise ValueError(f"need n >= 1 and b >= 1, got n={n}, b={b}")
    if n <= b:
        idx = np.arange(1, n + 1, dtype=np.int64)
        return BucketPlan(n, b, idx, idx)
    width = math.ceil(n / b)
    m = n // width
    lo = np.arange(m, dtype=np.int64) * width + 1
    hi = np.minimum(lo + width - 1, n)
    hi[-1] = n  # tail extension
    return BucketPlan(n, b, lo, hi)


def sample_bucket_indices(plan: BucketPlan, rng: np.random.Generator) -> np.ndarray:
    """Draw one source index per bucket, uniform over the bucket's range."""
    return rng.integers(plan.lo, plan.hi, endpoint=True)


def sbfs_sample(seq: FeatureSequence, plan: BucketPlan, rng: np.random.Generator) -> SampledSequence:
    """Stochastic bucket-wise sampling: one uniformly drawn feature per bucket."""
    _check_plan(seq, plan)
    chosen = sample_bucket_indices(plan, rng)
    return SampledSequence(seq.features[chosen - 1], chosen, "sbfs")


def pool_infer(seq: FeatureSequence, plan: BucketPlan, pool: str = "max") -> SampledSequence:
    """Deterministic bucket reduction: elementwise max or mean per bucket."""
    _check_plan(seq, plan)
    if pool not in ("max", "mean"):
        raise ValueError(f"pool must be 'max' or 'mean', got {pool!r}")
    reducer = np.max if pool == "max" else np.mean
    rows = np.stack([reducer(seq.features[lo - 1 : hi], axis=0) for lo, hi in zip(plan.lo, plan.hi)])
    return SampledSequence(rows, None, pool)


def remap_labels(ann: MomentAnnotation, plan: BucketPlan) -> tuple[int, int]:
    """Map feature-index labels onto bucket indices (1-based)."""
    if not (1 <= ann.feat_start <= ann.feat_end <= plan.n):
        raise ValueError(f"labels ({ann.feat_start}, {ann.feat_end}) outside [1..{plan.n}]")
    s = int(np.searchsorted(plan.hi, ann.feat_start)) + 1
    e = int(np.searchsorted(plan.hi, ann.feat_end)) + 1
    return s, e


def random_sample(seq: FeatureSequence, b: int, rng: np.random.Generator) -> SampledSequence:
    """Order-preserving uniform sample of b features, without replacement."""
    if b < 1:
        raise ValueError(f"need b >= 1, got {b}")
    n = seq.n
    if n <= b:
        idx = np.arange(1, n + 1, dtype=np.int64)
    else:
        idx = np.sort(rng.choice(n, size=b, replace=False)) + 1
    return SampledSequence(seq.features[idx - 1], idx, "random")


def nearest_source_positions(ann: MomentAnnotation, source_index: np.ndarray) -> tuple[int, int]:
    """Map feature-index labels to the closest sampled positions (1-based).

    For index-bearing samplers without a bucket partition (random mode): each
    label lands on the sampled row whose source index is nearest, earliest on
    ties. Nearest mapping is monotone, so start <= end is preserved.
    """
    src = np.asarray(source_index, dtype=np.int64)

    def nearest(tau: int) -> int:
        j = int(np.searchsorted(src, tau))
        if j == 0:
            return 1
        if j == src.size:
            return int(src.size)
        return j if tau - src[j - 1] <= src[j] - tau else j + 1

    return nearest(ann.feat_start), nearest(ann.feat_end)


def frvs_decimate(seq: FeatureSequence, target_fps: float) -> FeatureSequence:
    """Fixed-rate down-sampling: keep every round(fps/target_fps)-th feature.

    Simulates extracting the video at a lower frame rate; fps and frame count
    metadata are rescaled so the duration is preserved within one frame.
    """
    if not (0 < target_fps <= seq.fps):
        raise ValueError(f"target_fps must be in (0, {seq.fps}], got {target_fps}")
    stride = int(math.floor(seq.fps / target_fps + 0.5))
    if stride <= 1:
        return seq
    feats = seq.features[::stride]
    new_l = max(1, int(math.floor(seq.frame_count / stride + 0.5)))
    return FeatureSequence(feats, seq.fps / stride, new_l)


def cosine_distance_matrix(seq: FeatureSequence) -> np.ndarray:
    """Pairwise cosine distances 1 - cos_sim between feature rows; zero diagonal."""
    x = seq.features.astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    if (norms == 0).any():
        raise ValueError("cosine distance undefined for zero-norm feature rows")
    unit = x / norms[:, None]
    d = 1.0 - unit @ unit.T
    np.fill_diagonal(d, 0.0)
    return np.clip(d, 0.0, 2.0)


def drfs_buckets(seq: FeatureSequence, b: int, th0: float = 1.0, step: float = 0.01) -> BucketPlan:
    """Dynamic-rate bucketing by cosine distance to each bucket's first feature.

    Greedy left-to-right: a feature joins the current bucket iff its cosine
    distance to the bucket head is < th, otherwise it starts a new bucket.
    Whenever more than ``b`` buckets come out, th is lowered by ``step`` and
    the pass restarts. If th reaches 0 without converging (mutually distant
    features), falls back to the uniform bucket plan.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if b < 1:
        raise ValueError(f"need b >= 1, got {b}")
    d = cosine_distance_matrix(seq)
    n = seq.n
    th = th0
    while th > 0:
        starts = [0]
        head = 0
        for ed in range(1, n):
            if d[head, ed] >= th:
                starts.append(ed)
                head = ed
        if len(starts) <= b:
            lo = np.asarray(starts, dtype=np.int64) + 1
            hi = np.append(lo[1:] - 1, n)
            return BucketPlan(n, b, lo, hi)
        th -= step
    return make_bucket_plan(n, b)


def dtw_buckets(seq: FeatureSequence, b: int) -> BucketPlan:
    """Buckets from a DTW alignment against the max-pooled uniform reference.

    Aligns the n source rows to the m(n,b) max-pooled reference rows with a
    standard dynamic-time-warping path (cosine distance cost, steps right /
    down / diagonal); each source index is assigned the earliest reference
    index on its path, and the resulting contiguous groups become buckets.
    """
    if b < 1:
        raise ValueError(f"need b >= 1, got {b}")
    base = make_bucket_plan(seq.n, b)
    if base.is_passthrough:
        return base
    ref = pool_infer(seq, base, "max").features
    cost = _cosine_cost(seq.features, ref)
    path = _dtw_path(cost)
    n, m = cost.shape
    assigned = np.full(n, -1, dtype=np.int64)
    for i, j in path:
        if assigned[i] < 0:
            assigned[i] = j  # earliest reference index wins
    bounds: list[tuple[int, int]] = []
    start = 0
    for i in range(1, n):
        if assigned[i] != assigned[i - 1]:
            bounds.append((start + 1, i))
            start = i
    bounds.append((start + 1, n))
    lo = np.asarray([x for x, _ in bounds], dtype=np.int64)
    hi = np.asarray([y for _, y in bounds], dtype=np.int64)
    return BucketPlan(seq.n, b, lo, hi)


def _cosine_cost(a: np.ndarray, bmat: np.ndarray) -> np.ndarray:
    an = np.linalg.norm(a, axis=1)
    bn = np.linalg.norm(bmat, axis=1)
    if (an == 0).any() or (bn == 0).any():
        raise ValueError("cosine distance undefined for zero-norm feature rows")
    return 1.0 - (a / an[:, None]) @ (bmat / bn[:, None]).T


def _dtw_path(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimal-cost monotone path from (0,0) to (n-1,m-1), steps {→, ↓, ↘}."""
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row = acc[i]
        prev = acc[i - 1]
        ci = cost[i - 1]
        for j in range(1, m + 1):
            row[j] = ci[j - 1] + min(prev[j], row[j - 1], prev[j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while i > 1 or j > 1:
        steps = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        _, i, j = min(steps, key=lambda s: s[0])
        path.append((i - 1, j - 1))
    path.reverse()
    return path


def _check_plan(seq: FeatureSequence, plan: BucketPlan) -> None:
    if plan.n != seq.n:
        raise ValueError(f"plan built for n={plan.n} but sequence has n={seq.n}")


def draw_from_plan(seq: FeatureSequence, plan: BucketPlan, rng: np.random.Generator,
                   mode: str = "sbfs") -> SampledSequence:
    """Uniform per-bucket draw on any plan, tagged with the plan's strategy."""
    _check_plan(seq, plan)
    chosen = sample_bucket_indices(plan, rng)
    return SampledSequence(seq.features[chosen - 1], chosen, mode)


def apply_sampler(seq: FeatureSequence, mode: str, b: int, rng: np.random.Generator,
                  frvs_target_fps: float | None = None) -> SampledSequence:
    """One-shot application of a sampler strategy; output has at most b rows.

    dtw/drfs build their data-informed buckets and then draw one feature per
    bucket, mirroring how the bucketed strategies are used during training.
    frvs decimates at a fixed rate (default: the rate that lands this
    sequence at the budget) and max-pools the remainder if it still exceeds b.
    """
    if mode == "sbfs":
        return sbfs_sample(seq, make_bucket_plan(seq.n, b), rng)
    if mode in ("max", "mean"):
        return pool_infer(seq, make_bucket_plan(seq.n, b), mode)
    if mode == "random":
        return random_sample(seq, b, rng)
    if mode == "dtw":
        return draw_from_plan(seq, dtw_buckets(seq, b), rng, "dtw")
    if mode == "drfs":
        return draw_from_plan(seq, drfs_buckets(seq, b), rng, "drfs")
    if mode == "frvs":
        if frvs_target_fps is None:
            frvs_target_fps = min(seq.fps, seq.fps * b / seq.n)
        dec = frvs_decimate(seq, frvs_target_fps)
        if dec.n <= b:
            stride = max(1, int(math.floor(seq.fps / frvs_target_fps + 0.5)))
            idx = np.arange(dec.n, dtype=np.int64) * stride + 1
            return SampledSequence(dec.features, np.minimum(idx, seq.n), "frvs")
        pooled = pool_infer(dec, make_bucket_plan(dec.n, b), "max")
        return SampledSequence(pooled.features, None, "frvs")
    raise ValueError(f"unknown sampler mode {mode!r}")
