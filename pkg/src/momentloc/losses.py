"""Training losses: soft-label KL, attention guidance, and temporal order.

The three signals are combined by unweighted summation. All losses are built
from autodiff kernels so their gradients flow through the model; targets and
masks are plain numpy constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_FLOOR = 1e-12  # prediction clamp inside log
ATTN_CEIL = 1.0 - 1e-6  # attention clamp inside log(1 - A); softmax can saturate


@dataclass(frozen=True)
class SoftLabel:
    """A probability vector over positions, peaked at the target bucket."""

    dist: np.ndarray
    center: int
    width: int

    def __post_init__(self) -> None:
        d = np.asarray(self.dist, dtype=np.float64)
        if d.ndim != 1 or (d < 0).any():
            raise ValueError("soft label must be a non-negative vector")
        if abs(d.sum() - 1.0) > 1e-9:
            raise ValueError(f"soft label sums to {d.sum()}, expected 1")
        if int(np.argmax(d)) != self.center - 1:
            raise ValueError("soft label mode must sit at the center position")
        object.__setattr__(self, "dist", d)


def make_soft_labels(center: int, length: int, width: int = 1) -> SoftLabel:
    """Triangular kernel around ``center`` over ``length`` positions, renormalized.

    Weights are max(0, 1 - |i - center| / (width + 1)); width 0 gives a
    one-hot. Mass falling outside [1..length] is renormalized away.
    """
    if not (1 <= center <= length):
        raise ValueError(f"center {center} outside [1, {length}]")
    if width < 0:
        raise ValueError(f"width must be >= 0, got {width}")
    idx = np.arange(1, length + 1, dtype=np.float64)
    w = np.maximum(0.0, 1.0 - np.abs(idx - center) / (width + 1))
    return SoftLabel(w / w.sum(), center, width)


def kl_loss(pred: Tensor, target: SoftLabel | np.ndarray) -> Tensor:
    """KL(target || pred) with the prediction floored at 1e-12 inside the log."""
    t = target.dist if isinstance(target, SoftLabel) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ValueError(f"prediction shape {pred.shape} vs target shape {t.shape}")
    # entropy part sum t*log(t) is a constant w.r.t. the prediction (0*log 0 := 0)
    nz = t > 0
    entropy = float(np.sum(t[nz] * np.log(t[nz])))
    cross = ad.tsum(ad.mul_const(ad.log(ad.clamp_min(pred, PROB_FLOOR)), t))
    return ad.add_const(ad.scale(cross, -1.0), entropy)


def guidance_vector(text_len: int, video_len: int, bucket_start: int, bucket_end: int) -> np.ndarray:
    """Binary in-target mask over the joint sequence.

    Text positions (including the framing tokens) are always 1; video
    positions are 1 exactly on [bucket_start .. bucket_end] (1-based).
    """
    if not (1 <= bucket_start <= bucket_end <= video_len):
        raise ValueError(f"target buckets ({bucket_start}, {bucket_end}) outside [1, {video_len}]")
    x = np.zeros(text_len + video_len)
    x[:text_len] = 1.0
    x[text_len + bucket_start - 1 : text_len + bucket_end] = 1.0
    return x


def attention_guidance_loss(attention: Sequence[Tensor], x: np.ndarray) -> Tensor:
    """Penalty -sum mask * log(1 - A) over every head of every layer.

    ``mask = 1 - x (outer) x`` selects the attention cells touching at least
    one out-of-target position; entries are clamped to 1 - 1e-6 before the
    log so saturated heads stay finite.
    """
    x = np.asarray(x, dtype=np.float64)
    mask = 1.0 - np.outer(x, x)
    total: Tensor | None = None
    for a in attention:
        if a.shape[-2:] != mask.shape:
            raise ValueError(f"attention {a.shape} incompatible with guidance mask {mask.shape}")
        logs = ad.log(ad.add_const(ad.scale(ad.clamp_max(a, ATTN_CEIL), -1.0), 1.0))
        term = ad.scale(ad.tsum(ad.mul_const(logs, mask)), -1.0)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("attention_guidance_loss needs at least one attention stack")
    return total


def temporal_order_loss(start_probs: Tensor, end_probs: Tensor, literal: bool = False) -> Tensor:
    """Penalty on the expected start position landing after the expected end.

    Default is the hinge max(0, E[start] - E[end]). ``literal=True`` switches
    to the printed min(0, .) form, which is never positive and has zero
    gradient exactly when the order is violated; it is kept for comparison
    only.
    """
    if start_probs.shape != end_probs.shape:
        raise ValueError(f"shape mismatch: {start_probs.shape} vs {end_probs.shape}")
    idx = np.arange(1, start_probs.shape[0] + 1, dtype=np.float64)
    e_start = ad.tsum(ad.mul_const(start_probs, idx))
    e_end = ad.tsum(ad.mul_const(end_probs, idx))
    diff = ad.add(e_start, ad.scale(e_end, -1.0))
    if literal:
        return ad.scale(ad.relu(ad.scale(diff, -1.0)), -1.0)  # min(0, diff)
    return ad.relu(diff)


def total_loss(kl_start: Tensor, kl_end: Tensor, att: Tensor, se: Tensor) -> Tensor:
    """Unweighted sum of the three signals (KL taken over both heads)."""
    for name, t in (("kl_start", kl_start), ("kl_end", kl_end), ("att", att), ("se", se)):
        if not np.isfinite(t.values).all():
            raise ad.NumericError(f"non-finite loss component {name}")
    return ad.add(ad.add(ad.add(kl_start, kl_end), att), se)
