"""Command-line surface: sample, train, eval, bench-mem, compare-samplers.

All commands are deterministic given (--seed, config). A flat key=value
config file supplies defaults; command-line flags override it. Exit codes:
0 success, 1 runtime/IO failure, 2 usage error. Report commands write a
matplotlib figure next to their delimited output.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import train as tr
from .core import FeatureSequence, Span, annotate, evaluate_pairs, tiou
from .data import (
    ManifestRecord,
    SyntheticSpec,
    gen_dataset,
    read_features,
    read_manifest,
    write_features,
    write_predictions,
)
from .memory import FEATURE_RATE_DEFAULT, bench_curve, write_memory_csv
from .model import LocalizationModel, ModelConfig, load_checkpoint, predict_span, save_checkpoint
from .sampling import apply_sampler, make_bucket_plan
from .train import MODE_POLICIES, TrainFlags

METRICS_CSV_HEADER = "epoch,loss_kl,loss_att,loss_se,loss_total,miou"
SAMPLE_MODES = ("sbfs", "max", "mean", "random", "frvs", "dtw", "drfs")
DEFAULT_ALPHAS = (0.3, 0.5, 0.7)


@dataclass
class RunConfig:
    """Every knob of a run; all fields have working defaults.

    The same namespace is accepted in the key=value config file and as
    command-line overrides.
    """

    # model architecture
    d_m: int = 64
    loc_layers: int = 2
    loc_heads: int = 4
    text_layers: int = 2
    text_heads: int = 4
    vocab: int = 12
    d_v: int = 8
    max_text_len: int = 16
    max_video_len: int = 2048
    dtype: str = "float64"
    # sampling
    mode: str = "sbfs"
    buckets: int = 200
    frvs_target_fps: float = 0.0  # 0 = pick the rate that lands at the budget
    # optimization
    seed: int = 0
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    # loss flags
    enable_att: bool = True
    enable_se: bool = True
    literal_eq5: bool = False
    supervise_all_heads: bool = False
    soft_label_width: int = 1
    # data: manifests win over synthetic generation when set
    train_manifest: str = ""
    eval_manifest: str = ""
    num_examples: int = 500
    eval_examples: int = 100
    n_min: int = 380
    n_max: int = 420
    fps: float = 25.0
    signal_strength: float = 1.0
    moment_frac_min: float = 0.15
    moment_frac_max: float = 0.45
    query_len_min: int = 3
    query_len_max: int = 6
    data_seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_m=self.d_m, loc_layers=self.loc_layers, loc_heads=self.loc_heads,
            text_layers=self.text_layers, text_heads=self.text_heads,
            bucket_budget=self.buckets, vocab=self.vocab, d_v=self.d_v,
            max_text_len=self.max_text_len, max_video_len=self.max_video_len,
            dtype=self.dtype,
        )

    def train_flags(self) -> TrainFlags:
        return TrainFlags(
            enable_att=self.enable_att, enable_se=self.enable_se,
            literal_eq5=self.literal_eq5, supervise_all_heads=self.supervise_all_heads,
            soft_label_width=self.soft_label_width,
        )

    def synthetic_spec(self, num: int, seed: int) -> SyntheticSpec:
        return SyntheticSpec(
            num_examples=num, n_range=(self.n_min, self.n_max), d_v=self.d_v,
            fps=self.fps, vocab=self.vocab, signal_strength=self.signal_strength,
            moment_frac_range=(self.moment_frac_min, self.moment_frac_max),
            seed=seed, query_len_range=(self.query_len_min, self.query_len_max),
        )


def _parse_value(raw: str, target_type) -> object:
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    return target_type(raw)


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Config file (key = value lines, # comments) plus override dict."""
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {name: type(getattr(RunConfig(), name)) for name in fields}
    values: dict[str, object] = {}
    if path:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in types:
                    raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = _parse_value(raw, types[key])
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        values[key] = _parse_value(str(val), types[key]) if isinstance(val, str) else val
    return RunConfig(**values)


def _load_manifest_dataset(manifest_path: str):
    base = os.path.dirname(os.path.abspath(manifest_path))
    out = []
    for rec in read_manifest(manifest_path):
        fpath = rec.feature_path
        if not os.path.isabs(fpath):
            fpath = os.path.join(base, fpath)
        seq = read_features(fpath)
        ann = annotate(seq, rec.query_tokens, rec.start_s, min(rec.end_s, seq.duration))
        out.append((seq, ann, rec.video_id))
    return out


def _datasets(cfg: RunConfig):
    """(train, eval) example lists from manifests or the synthetic generator."""
    if cfg.train_manifest:
        train_ds = [(s, a) for s, a, _ in _load_manifest_dataset(cfg.train_manifest)]
    else:
        train_ds = gen_dataset(cfg.synthetic_spec(cfg.num_examples, cfg.data_seed))
    if cfg.eval_manifest:
        eval_ds = [(s, a) for s, a, _ in _load_manifest_dataset(cfg.eval_manifest)]
    else:
        eval_ds = gen_dataset(cfg.synthetic_spec(cfg.eval_examples, cfg.data_seed + 1))
    return train_ds, eval_ds


def _figure_path(out_path: str) -> str:
    root, _ = os.path.splitext(out_path)
    return root + ".png"


def _write_metrics_csv(path: str, history) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(METRICS_CSV_HEADER + "\n")
        for h in history:
            f.write(f"{h.epoch},{h.loss_kl:.6f},{h.loss_att:.6f},{h.loss_se:.6f},"
                    f"{h.loss_total:.6f},{h.miou:.6f}\n")


# -- commands -----------------------------------------------------------------


def cmd_sample(args) -> int:
    seq = read_features(args.features)
    rng = np.random.default_rng(args.seed)
    sampled = apply_sampler(seq, args.mode, args.buckets, rng,
                            frvs_target_fps=args.frvs_target_fps or None)
    write_features(args.out, FeatureSequence(sampled.features, seq.fps, seq.frame_count))
    sidecar = {
        "mode": sampled.mode,
        "source_n": seq.n,
        "buckets": args.buckets,
        "rows": sampled.rows,
        "source_indices": None if sampled.source_index is None else sampled.source_index.tolist(),
    }
    with open(args.out + ".indices.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f)
    print(f"sampled {seq.n} -> {sampled.rows} rows (mode={sampled.mode}) into {args.out}")
    return 0


def _train_once(cfg: RunConfig, train_ds, ckpt_path: str, metrics_path: str | None) -> tr.TrainResult:
    mcfg = cfg.model_config()
    if cfg.epochs == 0:
        model = LocalizationModel(mcfg, np.random.default_rng(cfg.seed))
        result = tr.TrainResult(model)
    else:
        result = tr.train_model(
            train_ds, mcfg, mode=cfg.mode, epochs=cfg.epochs, batch_size=cfg.batch_size,
            lr=cfg.learning_rate, flags=cfg.train_flags(), seed=cfg.seed,
            frvs_target_fps=cfg.frvs_target_fps or None,
        )
    save_checkpoint(ckpt_path, result.model)
    if metrics_path:
        _write_metrics_csv(metrics_path, result.history)
        if result.history:
            from .plots import save_training_curve

            save_training_curve(result.history, _figure_path(metrics_path))
    return result


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    train_ds, _ = _datasets(cfg)
    sweep = [int(x) for x in args.sweep_buckets.split(",")] if args.sweep_buckets else None
    if not sweep:
        result = _train_once(cfg, train_ds, args.out_checkpoint, args.metrics_out)
        if result.history:
            h = result.history[-1]
            print(f"trained {cfg.epochs} epochs (mode={cfg.mode}, b={cfg.buckets}): "
                  f"final loss {h.loss_total:.4f}, train mIoU {h.miou:.4f}")
        else:
            print(f"wrote untrained checkpoint (epochs=0) to {args.out_checkpoint}")
        return 0
    root, ext = os.path.splitext(args.out_checkpoint)
    for b in sweep:
        bcfg = dataclasses.replace(cfg, buckets=b)
        mpath = None
        if args.metrics_out:
            mroot, mext = os.path.splitext(args.metrics_out)
            mpath = f"{mroot}-b{b}{mext}"
        result = _train_once(bcfg, train_ds, f"{root}-b{b}{ext}", mpath)
        miou = result.history[-1].miou if result.history else float("nan")
        print(f"buckets={b}: train mIoU {miou:.4f}")
    return 0


def cmd_eval(args) -> int:
    expect = load_config(args.config, _overrides(args)) if args.config else None
    model = load_checkpoint(args.checkpoint, expect.model_config() if expect else None)
    cfg = expect or load_config(None, _overrides(args))
    examples = _load_manifest_dataset(args.manifest)
    alphas = tuple(float(a) for a in args.alphas.split(","))
    b = model.cfg.bucket_budget
    prepared = [tr.prepare_example(seq, ann, cfg.mode, b,
                                   frvs_target_fps=cfg.frvs_target_fps or None)
                for seq, ann, _ in examples]
    metrics, pairs = tr.evaluate(model, prepared, b, cfg.seed, alphas)
    rows = []
    for (pred, gt), (_, ann, vid) in zip(pairs, examples):
        rows.append({"video_id": vid, "pred_start_s": pred.start, "pred_end_s": pred.end,
                     "tiou": tiou(pred, gt)})
    if args.out:
        write_predictions(args.out, rows)
    for name, val in metrics.items():
        print(f"{name}: {val:.4f}")
    return 0


def cmd_bench_mem(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    durations = [float(d) for d in args.durations.split(",")]
    modes = args.modes.split(",")
    text_len = args.text_len or min(8, cfg.vocab - 3)
    reports = bench_curve(durations, modes, cfg.model_config(),
                          feature_rate=args.feature_rate, text_len=text_len, seed=cfg.seed)
    write_memory_csv(args.out, reports)
    from .plots import save_memory_curve

    save_memory_curve(reports, _figure_path(args.out))
    for r in reports:
        print(f"{r.duration_s:8.1f}s  {r.mode:6s}  seq_len={r.seq_len:5d}  "
              f"measured={r.measured_bytes:12d}  analytic={r.analytic_bytes:12d}")
    return 0


def cmd_compare_samplers(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    modes = args.modes.split(",")
    for mode in modes:
        if mode not in MODE_POLICIES:
            raise ValueError(f"unknown sampler mode {mode!r}; pick from {sorted(MODE_POLICIES)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    train_ds, eval_ds = _datasets(cfg)
    mcfg = cfg.model_config()
    table = []
    for mode in modes:
        per_seed = []
        for seed in seeds:
            result = tr.train_model(
                train_ds, mcfg, mode=mode, epochs=cfg.epochs, batch_size=cfg.batch_size,
                lr=cfg.learning_rate, flags=cfg.train_flags(), seed=seed,
                frvs_target_fps=cfg.frvs_target_fps or None,
            )
            prepared = [tr.prepare_example(s, a, mode, cfg.buckets,
                                           frvs_target_fps=cfg.frvs_target_fps or None)
                        for s, a in eval_ds]
            metrics, _ = tr.evaluate(result.model, prepared, cfg.buckets, seed)
            per_seed.append(metrics)
            print(f"  mode={mode} seed={seed}: " +
                  " ".join(f"{k}={v:.4f}" for k, v in metrics.items()), file=sys.stderr)
        row = {"mode": mode, "seeds": len(seeds)}
        for key in per_seed[0]:
            row[key] = sum(m[key] for m in per_seed) / len(per_seed)
        table.append(row)
    table.sort(key=lambda r: r["mIoU"], reverse=True)
    header = ["mode", "seeds"] + [f"R@{a:g}" for a in DEFAULT_ALPHAS] + ["mIoU"]
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in table:
            f.write(f"{row['mode']},{row['seeds']},"
                    + ",".join(f"{row[h]:.6f}" for h in header[2:]) + "\n")
    from .plots import save_sampler_comparison

    save_sampler_comparison(table, _figure_path(args.out))
    widths = [max(len(h), 10) for h in header]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in table:
        cells = [str(row["mode"]), str(row["seeds"])] + [f"{row[h]:.4f}" for h in header[2:]]
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return 0


# -- argument plumbing ---------------------------------------------------------

_OVERRIDE_FLAGS = ("seed", "buckets", "mode", "epochs", "batch_size", "learning_rate")


def _overrides(args) -> dict:
    return {name: getattr(args, name, None) for name in _OVERRIDE_FLAGS}


def _add_common(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.add_argument("--buckets", type=int, default=None, help="bucket budget override")
    if with_mode:
        p.add_argument("--mode", default=None, choices=sorted(MODE_POLICIES),
                       help="sampler mode override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="momentloc",
        description="Constant-memory temporal moment localization: sampling, "
                    "training, evaluation, and memory benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="down-sample a feature file with one strategy")
    p.add_argument("--features", required=True, help="input feature file")
    p.add_argument("--mode", required=True, choices=SAMPLE_MODES)
    p.add_argument("--buckets", type=int, default=200, help="bucket budget b")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frvs-target-fps", type=float, default=0.0, dest="frvs_target_fps",
                   help="decimation rate for mode frvs (0 = auto)")
    p.add_argument("--out", required=True, help="output feature file; sidecar at <out>.indices.json")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train a localization model")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p.add_argument("--sweep-buckets", default=None, dest="sweep_buckets",
                   help="comma list of bucket budgets; trains one model per value")
    p.add_argument("--out-checkpoint", required=True, dest="out_checkpoint")
    p.add_argument("--metrics-out", default=None, dest="metrics_out",
                   help="per-epoch CSV (a PNG curve is written next to it)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--alphas", default="0.3,0.5,0.7", help="tIoU recall thresholds")
    p.add_argument("--out", default=None, help="per-example predictions JSONL")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-mem", help="measure peak memory across durations")
    _add_common(p, with_mode=False)
    p.add_argument("--durations", default="30,60,120,240,480", help="seconds, ascending")
    p.add_argument("--modes", default="none,sbfs,max,mean", help="comma list incl. 'none'")
    p.add_argument("--feature-rate", type=float, default=FEATURE_RATE_DEFAULT,
                   dest="feature_rate", help="synthetic features per second")
    p.add_argument("--text-len", type=int, default=0, dest="text_len",
                   help="query tokens in the benchmark forward (0 = auto)")
    p.add_argument("--out", required=True, help="CSV path (a PNG curve is written next to it)")
    p.set_defaults(func=cmd_bench_mem)

    p = sub.add_parser("compare-samplers", help="train per (mode, seed) and rank by mIoU")
    _add_common(p, with_mode=False)
    p.add_argument("--modes", required=True, help="comma list of sampler modes")
    p.add_argument("--seeds", default="0,1,2", help="comma list of training seeds")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p.add_argument("--out", required=True, help="summary CSV (a PNG chart is written next to it)")
    p.set_defaults(func=cmd_compare_samplers)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
