"""Snippet encoder and scoring heads.

A video arrives as a T x D_in matrix of snippet features. The transformer
model projects each row to D_model, prepends a learned cls token, and runs a
stack of blocks, each of which re-embeds the snippet tokens with a
depthwise-separable temporal convolution (the cls token skips the conv, it
has no temporal position), applies multi-head self-attention over all T+1
tokens, layer-norms the residual sum, and adds a small feedforward residual.
Two affine heads read the result: a per-snippet anomaly score from each
snippet token and a video-level score from the cls token, both squashed by a
sigmoid.

A memoryless linear baseline (one affine map on the raw features) lives here
too so training and evaluation can swap models behind one interface.

Checkpoint layout (binary, little-endian): magic ``WVCK``, u32 version, u32
JSON length, JSON config block, then every parameter tensor in declaration
order as raw float32. Callers may append opaque trailing bytes; the loader
returns them untouched.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import (
    Tensor,
    concat,
    dropout,
    dws_conv1d,
    gelu,
    layer_norm,
    multi_head_self_attention,
)

CHECKPOINT_MAGIC = b"WVCK"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    """Shape and depth of the transformer model.

    Defaults are desk scale: small enough that gradient checks and full
    training runs finish in seconds on a CPU.
    """

    num_snippets: int = 32
    d_in: int = 32
    d_model: int = 32
    heads: int = 4
    depth: int = 2
    conv_width: int = 3
    dropout_rate: float = 0.0
    use_positional: bool = False

    def __post_init__(self):
        if self.num_snippets < 1:
            raise ConfigError(f"num_snippets must be >= 1, got {self.num_snippets}")
        if self.d_in < 1 or self.d_model < 1:
            raise ConfigError("feature dims must be >= 1")
        if self.heads < 1 or self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by heads ({self.heads})")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.conv_width < 1 or self.conv_width % 2 == 0:
            raise ConfigError(f"conv_width must be odd, got {self.conv_width}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class BlockParams:
    conv_depth: Tensor
    conv_point: Tensor
    conv_bias: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor

    _ORDER = ("conv_depth", "conv_point", "conv_bias",
              "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
              "ln_gamma", "ln_beta", "ff_w1", "ff_b1", "ff_w2", "ff_b2")

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name in self._ORDER:
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class ModelParams:
    """All trainable tensors, in fixed declaration order (checkpoint order)."""

    w_in: Tensor
    b_in: Tensor
    cls_token: Tensor
    pos: Tensor | None
    blocks: list[BlockParams]
    score_w: Tensor
    score_b: Tensor
    video_w: Tensor
    video_b: Tensor

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "w_in", self.w_in
        yield "b_in", self.b_in
        yield "cls_token", self.cls_token
        if self.pos is not None:
            yield "pos", self.pos
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"block{i}")
        yield "score_w", self.score_w
        yield "score_b", self.score_b
        yield "video_w", self.video_w
        yield "video_b", self.video_b


@dataclass
class EncodedVideo:
    """Output tokens of the encoder: row 0 is the cls token, rows 1..T the snippets."""

    tokens: Tensor

    @property
    def cls_output(self) -> Tensor:
        return self.tokens[0]

    @property
    def snippet_features(self) -> Tensor:
        return self.tokens[1:]


@dataclass
class VideoForward:
    """Per-video forward results consumed by the losses and by mining."""

    scores: Tensor          # (T,), each in (0,1)
    video_score: Tensor     # scalar in (0,1)
    features: Tensor        # (T, D) rows used by the contrastive objective


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_params(config: EncoderConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Fan-in-scaled symmetric init; biases zero; deterministic for a seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d = config.d_model
    blocks = []
    for _ in range(config.depth):
        blocks.append(BlockParams(
            conv_depth=_uniform(rng, (d, config.conv_width), config.conv_width, dtype),
            conv_point=_uniform(rng, (d, d), d, dtype),
            conv_bias=_zeros(d, dtype),
            wq=_uniform(rng, (d, d), d, dtype), bq=_zeros(d, dtype),
            wk=_uniform(rng, (d, d), d, dtype), bk=_zeros(d, dtype),
            wv=_uniform(rng, (d, d), d, dtype), bv=_zeros(d, dtype),
            wo=_uniform(rng, (d, d), d, dtype), bo=_zeros(d, dtype),
            ln_gamma=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
            ln_beta=_zeros(d, dtype),
            ff_w1=_uniform(rng, (d, 2 * d), d, dtype), ff_b1=_zeros(2 * d, dtype),
            ff_w2=_uniform(rng, (2 * d, d), 2 * d, dtype), ff_b2=_zeros(d, dtype),
        ))
    return ModelParams(
        w_in=_uniform(rng, (config.d_in, d), config.d_in, dtype),
        b_in=_zeros(d, dtype),
        cls_token=_uniform(rng, (d,), d, dtype),
        pos=_uniform(rng, (config.num_snippets + 1, d), d, dtype)
            if config.use_positional else None,
        blocks=blocks,
        score_w=_uniform(rng, (d,), d, dtype),
        score_b=_zeros((), dtype),
        video_w=_uniform(rng, (d,), d, dtype),
        video_b=_zeros((), dtype),
    )


def encode(features, params: ModelParams, config: EncoderConfig,
           rng: np.random.Generator | None = None) -> EncodedVideo:
    """Run the block stack over one video's snippet features.

    ``features`` is (T, D_in). Dropout fires only when a generator is passed;
    without one the forward pass is deterministic.
    """
    f = features if isinstance(features, Tensor) else Tensor(features)
    expected = (config.num_snippets, config.d_in)
    if f.data.shape != expected:
        raise ConfigError(f"feature matrix is {f.data.shape}, config expects {expected}")
    x = f @ params.w_in + params.b_in
    tokens = concat([params.cls_token.reshape(1, config.d_model), x], axis=0)
    if params.pos is not None:
        tokens = tokens + params.pos
    drop = rng is not None and config.dropout_rate > 0.0
    for blk in params.blocks:
        conv = dws_conv1d(tokens[1:], blk.conv_depth, blk.conv_point) + blk.conv_bias
        a = concat([tokens[0:1], conv], axis=0)
        attn = multi_head_self_attention(
            a, blk.wq, blk.bq, blk.wk, blk.bk, blk.wv, blk.bv, blk.wo, blk.bo,
            heads=config.heads)
        if drop:
            attn = dropout(attn, config.dropout_rate, rng)
        b = layer_norm(a + attn, blk.ln_gamma, blk.ln_beta)
        ff = gelu(b @ blk.ff_w1 + blk.ff_b1) @ blk.ff_w2 + blk.ff_b2
        if drop:
            ff = dropout(ff, config.dropout_rate, rng)
        tokens = b + ff
    return EncodedVideo(tokens=tokens)


def snippet_scores(enc: EncodedVideo, params: ModelParams) -> Tensor:
    """Per-snippet anomaly scores, shape (T,), each strictly inside (0,1)."""
    return (enc.snippet_features @ params.score_w + params.score_b).sigmoid()


def video_score(enc: EncodedVideo, params: ModelParams) -> Tensor:
    """Video-level anomaly score read off the cls token output."""
    return (enc.cls_output @ params.video_w + params.video_b).sigmoid()


class TransformerModel:
    """Config + params bundle with a single-video forward pass."""

    kind = "transformer"

    def __init__(self, config: EncoderConfig, params: ModelParams):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: EncoderConfig, seed: int, dtype=np.float32) -> "TransformerModel":
        return cls(config, init_params(config, seed, dtype))

    def forward(self, features, rng: np.random.Generator | None = None) -> VideoForward:
        enc = encode(features, self.params, self.config, rng)
        return VideoForward(
            scores=snippet_scores(enc, self.params),
            video_score=video_score(enc, self.params),
            features=enc.snippet_features,
        )

    def named_params(self) -> list[tuple[str, Tensor]]:
        return list(self.params.named())

    def config_dict(self) -> dict:
        return {"model": self.kind, "encoder": asdict(self.config)}


class LinearModel:
    """Memoryless baseline: one affine map scores each snippet independently.

    The video-level score applies the same map to the mean feature row, and
    the raw input rows stand in as contrastive features.
    """

    kind = "linear"

    def __init__(self, d_in: int, w: Tensor, b: Tensor):
        self.d_in = d_in
        self.w = w
        self.b = b

    @classmethod
    def init(cls, d_in: int, seed: int, dtype=np.float32) -> "LinearModel":
        rng = np.random.Generator(np.random.PCG64(seed))
        return cls(d_in, _uniform(rng, (d_in,), d_in, dtype), _zeros((), dtype))

    def forward(self, features, rng=None) -> VideoForward:
        f = features if isinstance(features, Tensor) else Tensor(features)
        if f.data.ndim != 2 or f.data.shape[1] != self.d_in:
            raise ConfigError(f"feature matrix is {f.data.shape}, model expects (T, {self.d_in})")
        return VideoForward(
            scores=(f @ self.w + self.b).sigmoid(),
            video_score=(f.mean(axis=0) @ self.w + self.b).sigmoid(),
            features=f,
        )

    def named_params(self) -> list[tuple[str, Tensor]]:
        return [("w", self.w), ("b", self.b)]

    def config_dict(self) -> dict:
        return {"model": self.kind, "d_in": self.d_in}


Model = TransformerModel | LinearModel


# ---------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(path, model: Model, extra: bytes = b""):
    """Write the model to ``path``; ``extra`` is appended verbatim."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    blob = json.dumps(model.config_dict(), sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    for _, p in model.named_params():
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    parts.append(extra)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> tuple[Model, bytes]:
    """Read a model back; returns it plus any trailing bytes after the params."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", buf, 8)
    blob_end = 12 + blob_len
    if len(buf) < blob_end:
        raise FormatError(f"{path}: truncated config block")
    try:
        cfg = json.loads(buf[12:blob_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad config block: {e}") from e
    model = _skeleton_from_config(cfg, path)
    offset = blob_end
    for name, p in model.named_params():
        nbytes = p.data.size * 4
        if offset + nbytes > len(buf):
            raise FormatError(f"{path}: truncated at parameter {name}")
        flat = np.frombuffer(buf, dtype="<f4", count=p.data.size, offset=offset)
        p.data = flat.reshape(p.data.shape).astype(np.float32)
        offset += nbytes
    return model, buf[offset:]


def _skeleton_from_config(cfg: dict, path) -> Model:
    kind = cfg.get("model")
    if kind == "transformer":
        try:
            config = EncoderConfig(**cfg["encoder"])
        except (TypeError, KeyError, ConfigError) as e:
            raise FormatError(f"{path}: bad encoder config: {e}") from e
        return TransformerModel.init(config, seed=0)
    if kind == "linear":
        d_in = cfg.get("d_in")
        if not isinstance(d_in, int) or d_in < 1:
            raise FormatError(f"{path}: bad linear config: d_in={d_in!r}")
        return LinearModel.init(d_in, seed=0)
    raise FormatError(f"{path}: unknown model kind {kind!r}")
