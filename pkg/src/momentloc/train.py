"""Training and evaluation loops over sampled feature sequences.

Each sampler mode is a (train-time, eval-time) policy pair: stochastic
strategies redraw rows every epoch and are replaced by deterministic bucket
pooling at evaluation (the "decoupled" recipe), while fixed strategies reuse
the same rows throughout. Everything is driven by explicit seeds; two runs
with the same seed produce byte-identical metric histories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from .core import FeatureSequence, MomentAnnotation, Span, annotate, evaluate_pairs
from .model import DEFAULT_INIT_SCALE, Adam, LocalizationModel, ModelConfig, predict_span
from .sampling import (
    BucketPlan,
    draw_from_plan,
    drfs_buckets,
    dtw_buckets,
    frvs_decimate,
    make_bucket_plan,
    nearest_source_positions,
    pool_infer,
    random_sample,
    remap_labels,
)

# train-time sampler and eval-time replacement per user-facing mode
MODE_POLICIES: dict[str, tuple[str, str]] = {
    "sbfs": ("sbfs", "max"),
    "sbfs-all": ("sbfs", "sbfs"),
    "sbfs-mean": ("sbfs", "mean"),
    "max": ("max", "max"),
    "mean": ("mean", "mean"),
    "random": ("random", "random"),
    "frvs": ("frvs", "frvs"),
    "dtw": ("dtw", "max"),
    "drfs": ("drfs", "max"),
}


@dataclass(frozen=True)
class TrainFlags:
    """Loss toggles and label smoothing for a training run."""

    enable_att: bool = True
    enable_se: bool = True
    literal_eq5: bool = False
    supervise_all_heads: bool = False
    soft_label_width: int = 1


@dataclass
class Prepared:
    """Per-example sampling state: plan, fixed rows, and remapped labels."""

    seq: FeatureSequence
    ann: MomentAnnotation
    mode: str
    plan: BucketPlan | None = None
    fixed_rows: np.ndarray | None = None
    fixed_labels: tuple[int, int] | None = None
    frvs_seq: FeatureSequence | None = None

    @property
    def duration(self) -> float:
        return self.seq.duration


def prepare_example(seq: FeatureSequence, ann: MomentAnnotation, mode: str, b: int,
                    frvs_target_fps: float | None = None) -> Prepared:
    if mode not in MODE_POLICIES:
        raise ValueError(f"unknown mode {mode!r}; pick from {sorted(MODE_POLICIES)}")
    train_sampler, _ = MODE_POLICIES[mode]
    p = Prepared(seq, ann, mode)
    if train_sampler in ("sbfs", "max", "mean"):
        p.plan = make_bucket_plan(seq.n, b)
    elif train_sampler == "dtw":
        p.plan = dtw_buckets(seq, b)
    elif train_sampler == "drfs":
        p.plan = drfs_buckets(seq, b)
    elif train_sampler == "frvs":
        rate = frvs_target_fps if frvs_target_fps is not None else min(seq.fps, seq.fps * b / seq.n)
        dec = frvs_decimate(seq, rate)
        # decimation can shave a fraction of a frame off the duration
        end_s = min(ann.end_s, dec.duration)
        start_s = min(ann.start_s, max(0.0, end_s - 1.0 / dec.fps))
        dec_ann = annotate(dec, ann.query_tokens, start_s, end_s)
        p.frvs_seq = dec
        p.plan = make_bucket_plan(dec.n, b)
        pooled = dec.features if p.plan.is_passthrough else pool_infer(dec, p.plan, "max").features
        p.fixed_rows = pooled
        p.fixed_labels = remap_labels(dec_ann, p.plan)
    if p.plan is not None and train_sampler != "frvs":
        p.fixed_labels = remap_labels(ann, p.plan)
    if train_sampler in ("max", "mean"):
        p.fixed_rows = pool_infer(seq, p.plan, train_sampler).features
    return p


def training_rows(p: Prepared, b: int, rng: np.random.Generator) -> tuple[np.ndarray, int, int]:
    """Rows and bucket labels for one training pass over an example."""
    sampler, _ = MODE_POLICIES[p.mode]
    if p.fixed_rows is not None:
        s, e = p.fixed_labels
        return p.fixed_rows, s, e
    if sampler == "random":
        drawn = random_sample(p.seq, b, rng)
        s, e = nearest_source_positions(p.ann, drawn.source_index)
        return drawn.features, s, e
    drawn = draw_from_plan(p.seq, p.plan, rng, "sbfs" if sampler == "sbfs" else sampler)
    s, e = p.fixed_labels
    return drawn.features, s, e


def eval_rows(p: Prepared, b: int, rng: np.random.Generator) -> np.ndarray:
    """Rows for inference; deterministic pooling wherever the mode allows it."""
    _, policy = MODE_POLICIES[p.mode]
    if policy == "frvs":
        return p.fixed_rows
    if policy in ("max", "mean"):
        if p.fixed_rows is not None:
            return p.fixed_rows
        return pool_infer(p.seq, p.plan, policy).features
    if policy == "sbfs":
        return draw_from_plan(p.seq, p.plan, rng, "sbfs").features
    if policy == "random":
        return random_sample(p.seq, b, rng).features
    raise AssertionError(f"unhandled eval policy {policy}")


def example_loss(model: LocalizationModel, tokens, rows: np.ndarray, label_start: int,
                 label_end: int, flags: TrainFlags) -> tuple[ad.Tensor, dict[str, float]]:
    """Forward one example and assemble the summed loss with its components."""
    out = model.forward(tokens, rows)
    v = out.num_positions
    kl_s = losses.kl_loss(out.start_probs, losses.make_soft_labels(label_start, v, flags.soft_label_width))
    kl_e = losses.kl_loss(out.end_probs, losses.make_soft_labels(label_end, v, flags.soft_label_width))
    t_len = len(tokens) + 2
    if flags.enable_att:
        x = losses.guidance_vector(t_len, v, label_start, label_end)
        att = losses.attention_guidance_loss(out.attention, x)
        if flags.supervise_all_heads and out.text_attention:
            # text-only cells are always in-target, so this term is provably 0;
            # kept so the flag mirrors supervising every head of every stack
            att = ad.add(att, losses.attention_guidance_loss(out.text_attention, np.ones(t_len)))
    else:
        att = ad.Tensor(0.0)
    if flags.enable_se:
        se = losses.temporal_order_loss(out.start_probs, out.end_probs, literal=flags.literal_eq5)
    else:
        se = ad.Tensor(0.0)
    total = losses.total_loss(kl_s, kl_e, att, se)
    parts = {"kl": kl_s.item() + kl_e.item(), "att": att.item(), "se": se.item(), "total": total.item()}
    return total, parts


def train_step(model: LocalizationModel, batch: list[tuple], opt: Adam, flags: TrainFlags
               ) -> dict[str, float]:
    """One optimizer update on a batch of (tokens, rows, label_start, label_end).

    Gradients are averaged over the batch; each example's graph is released
    right after its backward pass, so training memory stays at the
    single-example footprint.
    """
    opt.zero_grad()
    sums = {"kl": 0.0, "att": 0.0, "se": 0.0, "total": 0.0}
    inv = 1.0 / len(batch)
    for tokens, rows, ls, le in batch:
        total, parts = example_loss(model, tokens, rows, ls, le, flags)
        ad.backward(ad.scale(total, inv))
        for k in sums:
            sums[k] += parts[k] * inv
    opt.step()
    return sums


@dataclass
class EpochStats:
    epoch: int
    loss_kl: float
    loss_att: float
    loss_se: float
    loss_total: float
    miou: float


@dataclass
class TrainResult:
    model: LocalizationModel
    history: list[EpochStats] = field(default_factory=list)


def evaluate(model: LocalizationModel, prepared: list[Prepared], b: int, seed: int,
             alphas=(0.3, 0.5, 0.7)) -> tuple[dict[str, float], list[tuple[Span, Span]]]:
    """Deterministic evaluation; returns (metrics, per-example span pairs)."""
    rng = np.random.default_rng(seed)
    pairs: list[tuple[Span, Span]] = []
    with ad.no_grad():
        for p in prepared:
            rows = eval_rows(p, b, rng)
            out = model.forward(p.ann.query_tokens, rows)
            pred = predict_span(out, out.num_positions, p.duration)
            pairs.append((pred, p.ann.span))
    return evaluate_pairs(pairs, alphas), pairs


def train_model(
    dataset: list[tuple[FeatureSequence, MomentAnnotation]],
    cfg: ModelConfig,
    mode: str = "sbfs",
    epochs: int = 20,
    batch_size: int = 32,
    lr: float = 1e-3,
    flags: TrainFlags = TrainFlags(),
    seed: int = 0,
    frvs_target_fps: float | None = None,
    init_scale: float = DEFAULT_INIT_SCALE,
) -> TrainResult:
    """Seed-deterministic training of a fresh model on a prepared dataset."""
    b = cfg.bucket_budget
    prepared = [prepare_example(seq, ann, mode, b, frvs_target_fps) for seq, ann in dataset]
    model = LocalizationModel(cfg, np.random.default_rng(seed), init_scale=init_scale)
    opt = Adam(model.params, lr=lr)
    result = TrainResult(model)
    for epoch in range(1, epochs + 1):
        erng = np.random.default_rng((seed, epoch))
        order = erng.permutation(len(prepared))
        sums = {"kl": 0.0, "att": 0.0, "se": 0.0, "total": 0.0}
        steps = 0
        for lo in range(0, len(order), batch_size):
            batch = []
            for i in order[lo : lo + batch_size]:
                p = prepared[i]
                rows, ls, le = training_rows(p, b, erng)
                batch.append((p.ann.query_tokens, rows, ls, le))
            stats = train_step(model, batch, opt, flags)
            for k in sums:
                sums[k] += stats[k]
            steps += 1
        metrics, _ = evaluate(model, prepared, b, seed)
        result.history.append(EpochStats(
            epoch, sums["kl"] / steps, sums["att"] / steps, sums["se"] / steps,
            sums["total"] / steps, metrics["mIoU"],
        ))
    return result


def untrained_baseline(dataset, cfg: ModelConfig, mode: str = "sbfs", seed: int = 0
                       ) -> dict[str, float]:
    """Metrics of a freshly initialized model under the same eval protocol."""
    b = cfg.bucket_budget
    prepared = [prepare_example(seq, ann, mode, b) for seq, ann in dataset]
    model = LocalizationModel(cfg, np.random.default_rng(seed))
    metrics, _ = evaluate(model, prepared, b, seed)
    return metrics
