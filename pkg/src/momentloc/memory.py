"""Peak-memory accounting: a closed-form activation model and a measured one.

The analytic model counts the tensor payloads a recorded forward pass
retains; the measured number is the allocation meter's high-water mark over
an actual forward. Both include the parameter block when the workload builds
the model, so the two are directly comparable. The headline property: once a
video is long enough that sampling caps the row count, the peak stops
depending on the video duration entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import AllocationMeter
from .model import NUM_SPECIALS, FIRST_CONTENT_ID, LocalizationModel, ModelConfig, parameter_shapes
from .sampling import apply_sampler

# Default synthetic feature rate: one pooled feature per 16 frames of 25 fps
# video, i.e. 25/16 features per second.
FEATURE_RATE_DEFAULT = 25.0 / 16.0

# Retained d_m-wide rows per encoder block: q, k, v, attention context, its
# projection, two residual adds, two layer norms, and the 4x-wide
# feed-forward pair (4 + 4) plus its output row.
C_BLOCK = 18
# Text-side rows outside the blocks: token embedding, positional slice, their
# sum, the modality-type lookup, and its sum.
C_TEXT_EMBED = 5
# Video-side rows outside the blocks: projection, positional slice and sum,
# type lookup and sum, the post-stack state slice, and the two 2-layer heads.
C_VIDEO_EMBED = 10
# Per-position score/probability vectors across both heads.
C_HEAD_VEC = 6

BENCH_MODES = ("none", "sbfs", "max", "mean", "random")


@dataclass(frozen=True)
class MemoryReport:
    duration_s: float
    mode: str
    analytic_bytes: int
    measured_bytes: int
    seq_len: int


def parameter_bytes(cfg: ModelConfig, bytes_per_scalar: int | None = None) -> int:
    bpp = bytes_per_scalar or cfg.np_dtype().itemsize
    return bpp * sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


def analytic_peak_bytes(
    cfg: ModelConfig,
    text_len: int,
    video_len: int,
    batch: int = 1,
    bytes_per_scalar: int | None = None,
    include_parameters: bool = True,
) -> int:
    """Closed-form peak of retained tensor payloads for one recorded forward.

    ``text_len`` counts raw query tokens, ``video_len`` the rows fed to the
    localization stack (capped at the bucket budget whenever a sampler ran).
    Dominant term: batch * L * [M * S^2 + C_BLOCK * S * d_m] * bpp with
    S = text_len + specials + video_len; the text stack contributes the same
    shape at its own length, plus the documented embedding/head epilogue.
    """
    if text_len < 1 or video_len < 1 or batch < 1:
        raise ValueError("text_len, video_len, and batch must all be >= 1")
    bpp = bytes_per_scalar or cfg.np_dtype().itemsize
    d = cfg.d_m
    t = text_len + NUM_SPECIALS
    s = t + video_len
    v = video_len
    text_stack = cfg.text_layers * (cfg.text_heads * t * t + C_BLOCK * t * d)
    loc_stack = cfg.loc_layers * (cfg.loc_heads * s * s + C_BLOCK * s * d)
    epilogue = (C_TEXT_EMBED * t * d) + (C_VIDEO_EMBED * v * d) + s * d + v * cfg.d_v + C_HEAD_VEC * v
    total = batch * bpp * (text_stack + loc_stack + epilogue)
    if include_parameters:
        total += parameter_bytes(cfg, bpp)
    return int(total)


def measured_peak_bytes(workload: Callable[[], object]) -> int:
    """High-water mark of tensor payload bytes allocated while running ``workload``."""
    meter = AllocationMeter()
    with meter:
        workload()
    return meter.peak


def duration_to_rows(duration_s: float, feature_rate: float) -> int:
    """Number of synthetic feature rows for a video of ``duration_s`` seconds."""
    if duration_s <= 0 or feature_rate <= 0:
        raise ValueError("duration and feature rate must be positive")
    return max(1, int(math.floor(duration_s * feature_rate + 0.5)))


def saturation_duration(bucket_budget: int, feature_rate: float) -> float:
    """Duration past which the sampled row count stops growing (n exceeds b)."""
    return bucket_budget / feature_rate


def bench_curve(
    durations: Sequence[float],
    modes: Iterable[str],
    cfg: ModelConfig,
    feature_rate: float = FEATURE_RATE_DEFAULT,
    text_len: int = 8,
    seed: int = 0,
) -> list[MemoryReport]:
    """One MemoryReport per (duration, mode): a recorded forward on synthetic rows.

    Mode ``none`` feeds the full feature sequence to the model; sampler modes
    reduce it first (outside the metered workload), so only the model's own
    footprint is measured. Durations must be sorted ascending.
    """
    durations = [float(d) for d in durations]
    if durations != sorted(durations):
        raise ValueError("durations must be sorted ascending")
    modes = list(modes)
    for mode in modes:
        if mode not in BENCH_MODES:
            raise ValueError(f"unsupported bench mode {mode!r}; pick from {BENCH_MODES}")
    tokens = list(range(FIRST_CONTENT_ID, FIRST_CONTENT_ID + text_len))
    if max(tokens) >= cfg.vocab:
        raise ValueError(f"text_len {text_len} needs vocab > {max(tokens)}")
    reports: list[MemoryReport] = []
    for di, duration in enumerate(durations):
        n = duration_to_rows(duration, feature_rate)
        feats = np.random.default_rng((seed, di)).standard_normal((n, cfg.d_v))
        from .core import FeatureSequence  # local import to avoid cycle at module load

        seq = FeatureSequence(feats, fps=25.0, frame_count=max(1, int(round(duration * 25.0))))
        for mi, mode in enumerate(modes):
            if mode == "none":
                rows = seq.features
            else:
                rows = apply_sampler(seq, mode, cfg.bucket_budget,
                                     np.random.default_rng((seed, di, mi))).features
            v = rows.shape[0]

            def workload(rows=rows):
                model = LocalizationModel(cfg, np.random.default_rng(seed))
                model.forward(tokens, rows)

            measured = measured_peak_bytes(workload)
            analytic = analytic_peak_bytes(cfg, text_len, v)
            reports.append(MemoryReport(duration, mode, analytic, measured,
                                        text_len + NUM_SPECIALS + v))
    return reports


MEMORY_CSV_HEADER = "duration_s,mode,analytic_bytes,measured_bytes,seq_len"


def write_memory_csv(path, reports: Sequence[MemoryReport]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(MEMORY_CSV_HEADER + "\n")
        for r in reports:
            f.write(f"{r.duration_s:g},{r.mode},{r.analytic_bytes},{r.measured_bytes},{r.seq_len}\n")
