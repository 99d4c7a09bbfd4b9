"""The localization model: a toy text encoder plus a multi-modal transformer.

Query tokens are framed with start/end marker tokens, embedded, and run
through the text encoder stack. Video rows are linearly projected into the
hidden width, tagged with positional and modality-type embeddings,
concatenated after the text states, and run through the localization stack.
Two MLP heads over the video positions produce start/end distributions; all
attention matrices are retained for the guidance loss.

Peak activation memory of a forward pass depends on the text length, the
sampled row count, and the architecture sizes only, never on the source
video length; the memory module accounts for this in closed form.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import Span, bucket_index_to_span
from .sampling import BucketPlan, SampledSequence

CLS_ID = 0  # sequence-start marker prepended to every query
SEP_ID = 1  # sequence-end marker appended to every query
NUM_SPECIALS = 2
FIRST_CONTENT_ID = 2

CHECKPOINT_MAGIC = b"LGCP"
CHECKPOINT_VERSION = 1
FFN_MULT = 4  # feed-forward hidden width multiplier
DEFAULT_INIT_SCALE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    d_m: int = 64
    loc_layers: int = 2
    loc_heads: int = 4
    text_layers: int = 2
    text_heads: int = 4
    bucket_budget: int = 200
    vocab: int = 64
    d_v: int = 16
    max_text_len: int = 32
    max_video_len: int = 2048
    dtype: str = "float64"

    def __post_init__(self) -> None:
        for name in ("d_m", "loc_layers", "loc_heads", "text_layers", "text_heads",
                     "bucket_budget", "vocab", "d_v", "max_text_len", "max_video_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_m % self.loc_heads or self.d_m % self.text_heads:
            raise ValueError(f"d_m={self.d_m} must be divisible by both head counts")
        if self.vocab <= FIRST_CONTENT_ID:
            raise ValueError(f"vocab must exceed {FIRST_CONTENT_ID} (marker tokens)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class LocalizationOutput:
    start_probs: Tensor  # (v,)
    end_probs: Tensor  # (v,)
    attention: list[Tensor]  # per localization layer, each (M, S, S)
    text_attention: list[Tensor]  # per text layer, each (M̄, T, T)
    text_states: Tensor  # (T, d_m)
    joint_states: Tensor  # (T + v, d_m)

    @property
    def num_positions(self) -> int:
        return int(self.start_probs.shape[0])


def _block_shapes(d_m: int) -> dict[str, tuple[int, ...]]:
    h = FFN_MULT * d_m
    return {
        "wq": (d_m, d_m), "bq": (d_m,), "wk": (d_m, d_m), "bk": (d_m,),
        "wv": (d_m, d_m), "bv": (d_m,), "wo": (d_m, d_m), "bo": (d_m,),
        "ln1_g": (d_m,), "ln1_b": (d_m,),
        "w1": (d_m, h), "b1": (h,), "w2": (h, d_m), "b2": (d_m,),
        "ln2_g": (d_m,), "ln2_b": (d_m,),
    }


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter; the single source of truth for
    initialization, checkpoints, and memory accounting."""
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab, cfg.d_m),
        "text_pos": (cfg.max_text_len + NUM_SPECIALS, cfg.d_m),
        "video_pos": (cfg.max_video_len, cfg.d_m),
        "type_emb": (2, cfg.d_m),
        "vid_proj_w": (cfg.d_v, cfg.d_m),
        "vid_proj_b": (cfg.d_m,),
    }
    for i in range(cfg.text_layers):
        for k, s in _block_shapes(cfg.d_m).items():
            shapes[f"text{i}.{k}"] = s
    for i in range(cfg.loc_layers):
        for k, s in _block_shapes(cfg.d_m).items():
            shapes[f"loc{i}.{k}"] = s
    for head in ("start", "end"):
        shapes[f"{head}.w1"] = (cfg.d_m, cfg.d_m)
        shapes[f"{head}.b1"] = (cfg.d_m,)
        shapes[f"{head}.w2"] = (cfg.d_m, 1)
        shapes[f"{head}.b2"] = (1,)
    return shapes


def init_parameters(cfg: ModelConfig, rng: np.random.Generator,
                    init_scale: float = DEFAULT_INIT_SCALE) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("ln") and leaf.endswith("_g"):
            vals = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            vals = np.zeros(shape)
        else:
            vals = rng.normal(0.0, init_scale, size=shape)
        params[name] = Tensor(vals.astype(cfg.np_dtype), requires_grad=True)
    return params


class LocalizationModel:
    """Text encoder + localization transformer over sampled video rows."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None, init_scale: float = DEFAULT_INIT_SCALE):
        self.cfg = cfg
        if params is not None:
            expected = parameter_shapes(cfg)
            for name, shape in expected.items():
                if name not in params or params[name].shape != shape:
                    raise ValueError(f"parameter {name!r} missing or misshaped")
            self.params = params
        else:
            self.params = init_parameters(cfg, rng or np.random.default_rng(0), init_scale)

    # -- encoder blocks ----------------------------------------------------

    def _encoder_block(self, x: Tensor, prefix: str, heads: int, attn_sink: list[Tensor]) -> Tensor:
        p = self.params
        q = ad.linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
        k = ad.linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
        v = ad.linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
        probs = ad.attention_probs(q, k, heads)
        attn_sink.append(probs)
        ctx = ad.attention_apply(probs, v, heads)
        proj = ad.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
        h = ad.layer_norm(ad.add(x, proj), p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
        f = ad.linear(ad.gelu(ad.linear(h, p[f"{prefix}.w1"], p[f"{prefix}.b1"])),
                      p[f"{prefix}.w2"], p[f"{prefix}.b2"])
        return ad.layer_norm(ad.add(h, f), p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])

    # -- forward pieces ------------------------------------------------------

    def text_encode(self, tokens: Sequence[int]) -> tuple[Tensor, list[Tensor]]:
        """Frame, embed, and encode a query; returns (T, d_m) states, T = m + 2."""
        tokens = [int(t) for t in tokens]
        if len(tokens) < 1:
            raise ValueError("query must have at least one token")
        if len(tokens) > self.cfg.max_text_len:
            raise ValueError(f"query of {len(tokens)} tokens exceeds max_text_len={self.cfg.max_text_len}")
        if any(t < 0 or t >= self.cfg.vocab for t in tokens):
            raise ValueError(f"token id outside vocab of {self.cfg.vocab}")
        ids = np.asarray([CLS_ID] + tokens + [SEP_ID], dtype=np.int64)
        x = ad.add(ad.embedding_lookup(self.params["tok_emb"], ids),
                   ad.slice_rows(self.params["text_pos"], 0, ids.size))
        attn: list[Tensor] = []
        for i in range(self.cfg.text_layers):
            x = self._encoder_block(x, f"text{i}", self.cfg.text_heads, attn)
        return x, attn

    def localize(self, text_states: Tensor, video_rows, text_attention: list[Tensor] | None = None
                 ) -> LocalizationOutput:
        """Joint encoding of text states and video rows, then start/end heads.

        ``video_rows`` is a SampledSequence or a (v, d_v) array. Row counts up
        to max_video_len are accepted; unsampled sequences beyond the bucket
        budget are legal (the memory benchmark relies on it).
        """
        if isinstance(video_rows, SampledSequence):
            video_rows = video_rows.features
        if isinstance(video_rows, Tensor):
            rows_t = video_rows
        else:
            rows_t = Tensor(np.asarray(video_rows, dtype=self.cfg.np_dtype))
        if rows_t.values.ndim != 2 or rows_t.shape[1] != self.cfg.d_v:
            raise ValueError(f"video rows must be (v, {self.cfg.d_v}), got {rows_t.shape}")
        v = rows_t.shape[0]
        if v > self.cfg.max_video_len:
            raise ValueError(f"{v} video rows exceed max_video_len={self.cfg.max_video_len}")
        t_len = text_states.shape[0]
        p = self.params

        text = ad.add(text_states, ad.embedding_lookup(p["type_emb"], np.zeros(t_len, dtype=np.int64)))
        vid = ad.linear(rows_t, p["vid_proj_w"], p["vid_proj_b"])
        vid = ad.add(vid, ad.slice_rows(p["video_pos"], 0, v))
        vid = ad.add(vid, ad.embedding_lookup(p["type_emb"], np.ones(v, dtype=np.int64)))

        x = ad.concat([text, vid], axis=0)
        attn: list[Tensor] = []
        for i in range(self.cfg.loc_layers):
            x = self._encoder_block(x, f"loc{i}", self.cfg.loc_heads, attn)

        video_states = ad.slice_rows(x, t_len, t_len + v)
        heads = []
        for name in ("start", "end"):
            h = ad.gelu(ad.linear(video_states, p[f"{name}.w1"], p[f"{name}.b1"]))
            scores = ad.reshape(ad.linear(h, p[f"{name}.w2"], p[f"{name}.b2"]), (v,))
            heads.append(ad.softmax(scores))
        return LocalizationOutput(
            start_probs=heads[0], end_probs=heads[1], attention=attn,
            text_attention=text_attention if text_attention is not None else [],
            text_states=text_states, joint_states=x,
        )

    def forward(self, tokens: Sequence[int], video_rows) -> LocalizationOutput:
        text_states, text_attn = self.text_encode(tokens)
        return self.localize(text_states, video_rows, text_attention=text_attn)


def predict_span(out: LocalizationOutput, plan: BucketPlan | int, duration: float) -> Span:
    """Decode argmax start/end positions into seconds; swaps a flipped pair.

    ``plan`` may be a BucketPlan or a bare position count for index-bearing
    samplers that carry no bucket structure.
    """
    m = plan if isinstance(plan, int) else plan.m_buckets
    if out.num_positions != m:
        raise ValueError(f"output has {out.num_positions} positions but plan has {m}")
    s = int(np.argmax(out.start_probs.values)) + 1
    e = int(np.argmax(out.end_probs.values)) + 1
    if s > e:
        s, e = e, s
    return Span(bucket_index_to_span(s, m, duration).start,
                bucket_index_to_span(e, m, duration).end)


class Adam:
    """First-order adaptive-moment optimizer with a fixed step size."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# -- checkpoint format -------------------------------------------------------
#
# magic "LGCP" | u16 version | u8 scalar width (4 or 8) | u32 config-JSON length
# | config JSON (UTF-8) | u32 parameter count | per parameter:
#   u16 name length | name UTF-8 | u8 ndim | u32 per dimension | payload,
# little-endian floats of the declared width, C row-major order.


def save_checkpoint(path, model: LocalizationModel) -> None:
    cfg = model.cfg
    width = 4 if cfg.dtype == "float32" else 8
    cfg_blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HB", CHECKPOINT_VERSION, width))
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            blob = name.encode("utf-8")
            vals = model.params[name].values
            f.write(struct.pack("<H", len(blob)))
            f.write(blob)
            f.write(struct.pack("<B", vals.ndim))
            f.write(struct.pack(f"<{vals.ndim}I", *vals.shape))
            f.write(np.ascontiguousarray(vals, dtype=f"<f{width}").tobytes())


def load_checkpoint(path, expect_cfg: ModelConfig | None = None) -> LocalizationModel:
    """Load a checkpoint; if ``expect_cfg`` is given, every field must match."""
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic at offset 0 in {path}")
    version, width = struct.unpack("<HB", buf.read(3))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", buf.read(4))
    cfg = ModelConfig(**json.loads(buf.read(cfg_len).decode("utf-8")))
    if expect_cfg is not None:
        for field in dataclasses.fields(ModelConfig):
            a, b = getattr(cfg, field.name), getattr(expect_cfg, field.name)
            if a != b:
                raise ValueError(f"checkpoint/config mismatch on {field.name!r}: "
                                 f"checkpoint has {a}, config has {b}")
    (count,) = struct.unpack("<I", buf.read(4))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", buf.read(2))
        name = buf.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        nbytes = int(np.prod(shape)) * width if ndim else width
        payload = buf.read(nbytes)
        if len(payload) != nbytes:
            raise ValueError(f"truncated checkpoint: parameter {name!r}")
        vals = np.frombuffer(payload, dtype=f"<f{width}").reshape(shape).astype(cfg.np_dtype)
        params[name] = Tensor(vals.copy(), requires_grad=True)
    return LocalizationModel(cfg, params=params)
