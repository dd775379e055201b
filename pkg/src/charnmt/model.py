"""Transformer and convtransformer encoder/decoder models.

Both share embeddings, sinusoidal positions, multi-head attention,
post-norm residual sub-layers, and the decoder. The "conv" encoder kind
prepends a convolutional sub-block to every encoder layer: three parallel
same-padded 1D convolutions with windows 3/5/7, concatenated and fused by
a window-3 convolution, added back to the input through a residual
connection. The convolutions are purely linear and keep the temporal
resolution unchanged.

All forward functions are batched: ids are [B, T] integer arrays and
activations are [B, T, d_model] tensors; the single-sentence case is B=1.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .tensor import (
    ParameterSet,
    ShapeError,
    Tensor,
    concat,
    conv1d_same,
    dropout,
    embedding,
    init_param,
    layer_norm,
    matmul,
    relu,
    reshape,
    seed_for_name,
    softmax_lastdim,
    transpose,
)

ENCODER_KINDS = ("standard", "conv")


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by both encoder kinds."""

    vocab_size: int
    d_model: int = 512
    n_layers: int = 6
    n_heads: int = 8
    d_ff: int = 0  # 0 resolves to 4 * d_model
    encoder_kind: str = "standard"
    conv_windows: tuple[int, ...] = (3, 5, 7)
    fuse_window: int = 3
    dropout: float = 0.1
    max_len: int = 512

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        self.conv_windows = tuple(int(w) for w in self.conv_windows)
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.vocab_size <= 0 or self.n_layers <= 0 or self.n_heads <= 0:
            raise ValueError("vocab_size, n_layers and n_heads must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even for sinusoidal positions")
        for w in self.conv_windows + (self.fuse_window,):
            if w % 2 == 0 or w < 1:
                raise ValueError("conv windows must be odd and >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.max_len <= 0:
            raise ValueError("max_len must be positive")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "encoder_kind": self.encoder_kind,
            "conv_windows": list(self.conv_windows),
            "fuse_window": self.fuse_window,
            "dropout": self.dropout,
            "max_len": self.max_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_windows"] = tuple(d.get("conv_windows", (3, 5, 7)))
        return cls(**d)


@dataclass
class AttentionMap:
    """One sentence's attention matrix, trimmed to real (non-pad) lengths.

    ``matrix`` is [target_len x source_len] with row-stochastic entries;
    ``head`` is a head index or "mean" for the head average.
    """

    matrix: np.ndarray
    layer: int
    head: Union[int, str]
    source_len: int
    target_len: int


# ---------------------------------------------------------------------------
# parameter skeleton
# ---------------------------------------------------------------------------

def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
        shapes[f"{prefix}.{proj}.weight"] = (d, d)
        shapes[f"{prefix}.{proj}.bias"] = (d,)
    return shapes


def _ff_shapes(prefix: str, d: int, d_ff: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.w1.weight": (d, d_ff),
        f"{prefix}.w1.bias": (d_ff,),
        f"{prefix}.w2.weight": (d_ff, d),
        f"{prefix}.w2.bias": (d,),
    }


def _norm_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.gain": (d,), f"{prefix}.bias": (d,)}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape for a model of this configuration."""
    d, v = config.d_model, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "src_embed.weight": (v, d),
        "tgt_embed.weight": (v, d),
        "out.weight": (d, v),
        "out.bias": (v,),
    }
    for i in range(config.n_layers):
        if config.encoder_kind == "conv":
            for w in config.conv_windows:
                shapes[f"enc.{i}.conv.w{w}.weight"] = (w, d, d)
                shapes[f"enc.{i}.conv.w{w}.bias"] = (d,)
            n_in = len(config.conv_windows) * d
            shapes[f"enc.{i}.conv.fuse.weight"] = (config.fuse_window, n_in, d)
            shapes[f"enc.{i}.conv.fuse.bias"] = (d,)
        shapes.update(_attn_shapes(f"enc.{i}.attn", d))
        shapes.update(_norm_shapes(f"enc.{i}.attn_norm", d))
        shapes.update(_ff_shapes(f"enc.{i}.ff", d, config.d_ff))
        shapes.update(_norm_shapes(f"enc.{i}.ff_norm", d))
        shapes.update(_attn_shapes(f"dec.{i}.self_attn", d))
        shapes.update(_norm_shapes(f"dec.{i}.self_norm", d))
        shapes.update(_attn_shapes(f"dec.{i}.cross_attn", d))
        shapes.update(_norm_shapes(f"dec.{i}.cross_norm", d))
        shapes.update(_ff_shapes(f"dec.{i}.ff", d, config.d_ff))
        shapes.update(_norm_shapes(f"dec.{i}.ff_norm", d))
    return shapes


def _init_scheme(name: str) -> str:
    if name.endswith(".gain"):
        return "ones"
    if name.endswith(".bias"):
        return "zeros"
    return "uniform-scaled"


def build_params(config: ModelConfig, seed: int) -> ParameterSet:
    """Initialize a full parameter set.

    Each parameter is seeded from (seed, name), so the weights shared
    between the standard and conv encoder kinds are identical for the
    same root seed.
    """
    params = ParameterSet()
    for name, shape in param_shapes(config).items():
        params.add(name, init_param(shape, _init_scheme(name), seed_for_name(seed, name)))
    return params


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=16)
def _positions_cached(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    enc = np.zeros((max_len, d_model))
    enc[:, 0::2] = np.sin(angle)
    enc[:, 1::2] = np.cos(angle)
    enc.setflags(write=False)
    return enc

def sinusoidal_positions(max_len: int, d_model: int) -> Tensor:
    """Sinusoidal position table: sin on even dims, cos on odd dims,
    wavelengths 10000^(2i/d_model)."""
    if d_model % 2 != 0:
        raise ShapeError("d_model must be even for sinusoidal positions")
    return Tensor(_positions_cached(max_len, d_model))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes.

    Shapes are [..., T_q, d_k], [..., T_k, d_k], [..., T_k, d_v] with
    matching leading dims. Returns the output and the attention matrix
    [..., T_q, T_k].
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key depth mismatch: {q.shape} vs {k.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * scale
    attn = softmax_lastdim(logits, mask)
    return matmul(attn, v), attn


def _linear(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return matmul(x, params[f"{prefix}.weight"]) + params[f"{prefix}.bias"]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return transpose(reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dk = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * dk))


def multi_head_attention(x_q: Tensor, x_kv: Tensor, params: ParameterSet, prefix: str,
                         n_heads: int, mask: np.ndarray | None = None
                         ) -> tuple[Tensor, Tensor]:
    """Multi-head attention with learned per-head Q/K/V and output projections.

    ``x_q`` is [B, T_q, d_model], ``x_kv`` is [B, T_k, d_model]; ``mask`` must
    broadcast to [B, n_heads, T_q, T_k]. Returns the projected output
    [B, T_q, d_model] and the per-head attention matrices
    [B, n_heads, T_q, T_k].
    """
    d = x_q.shape[-1]
    if d % n_heads != 0:
        raise ShapeError(f"d_model {d} not divisible by n_heads {n_heads}")
    q = _split_heads(_linear(x_q, params, f"{prefix}.q_proj"), n_heads)
    k = _split_heads(_linear(x_kv, params, f"{prefix}.k_proj"), n_heads)
    v = _split_heads(_linear(x_kv, params, f"{prefix}.v_proj"), n_heads)
    ctx, attn = scaled_dot_attention(q, k, v, mask)
    out = _linear(_merge_heads(ctx), params, f"{prefix}.out_proj")
    return out, attn


def conv_sub_block(m: Tensor, params: ParameterSet, prefix: str,
                   pad_mask: np.ndarray | None = None) -> Tensor:
    """Convolutional sub-block: m + fuse(concat(conv_w(m) for each window)).

    All convolutions are same-padded, linear, and map d_model channels to
    d_model (the fusion sees the concatenated 3*d_model channels). With
    every conv weight and bias zero this is exactly the identity. Pad
    positions of the conv input are zeroed (``pad_mask`` True = real) so
    outputs at real positions do not depend on how much trailing padding a
    batch carries; the residual keeps ``m`` untouched.
    """
    windows = _windows_of(params, prefix)
    x = m
    if pad_mask is not None:
        x = m * Tensor(pad_mask[..., None].astype(float))
    branches = [conv1d_same(x, params[f"{prefix}.w{w}.weight"], params[f"{prefix}.w{w}.bias"])
                for w in windows]
    fused_in = concat(branches, axis=-1)
    if pad_mask is not None:
        fused_in = fused_in * Tensor(pad_mask[..., None].astype(float))
    fused = conv1d_same(fused_in, params[f"{prefix}.fuse.weight"], params[f"{prefix}.fuse.bias"])
    return m + fused


def _windows_of(params: ParameterSet, prefix: str) -> list[int]:
    widths = sorted(int(name[len(prefix) + 2:-len(".weight")])
                    for name in params.names()
                    if name.startswith(f"{prefix}.w") and name.endswith(".weight")
                    and ".fuse." not in name)
    return widths


def _ffn(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return _linear(relu(_linear(x, params, f"{prefix}.w1")), params, f"{prefix}.w2")


def _sublayer(x: Tensor, sub_out: Tensor, params: ParameterSet, norm_prefix: str,
              p: float, train_mode: bool, rng: np.random.Generator | None) -> Tensor:
    """Post-norm residual wrapper: LayerNorm(x + Dropout(sub_out))."""
    if train_mode and p > 0.0:
        sub_out = dropout(sub_out, p, rng)
    return layer_norm(x + sub_out, params[f"{norm_prefix}.gain"], params[f"{norm_prefix}.bias"])


def _embed(ids: np.ndarray, params: ParameterSet, which: str, config: ModelConfig,
           train_mode: bool, rng: np.random.Generator | None) -> Tensor:
    t = ids.shape[-1]
    if t > config.max_len:
        raise ShapeError(f"sequence length {t} exceeds max_len {config.max_len}")
    x = embedding(params[f"{which}.weight"], ids) * math.sqrt(config.d_model)
    x = x + Tensor(_positions_cached(config.max_len, config.d_model)[:t])
    if train_mode and config.dropout > 0.0:
        x = dropout(x, config.dropout, rng)
    return x


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------

def encoder_forward(batch, params: ParameterSet, config: ModelConfig,
                    train_mode: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Run the encoder stack over ``batch.src_ids`` -> [B, T_s, d_model].

    Conv kind runs the conv sub-block first in every layer, then the
    self-attention and feed-forward sub-layers, each as
    LayerNorm(x + Dropout(sub(x))). Source pad positions are masked out of
    the attention keys.
    """
    ids, src_mask = batch.src_ids, batch.src_mask
    if ids.shape[0] == 0 or ids.shape[1] == 0 or not src_mask.any(axis=1).all():
        raise ShapeError("encoder requires a non-empty source in every row")
    if int(ids.max()) >= config.vocab_size:
        raise ShapeError("source id out of vocabulary range")
    x = _embed(ids, params, "src_embed", config, train_mode, rng)
    key_mask = src_mask[:, None, None, :]  # [B,1,1,T_s]
    for i in range(config.n_layers):
        if config.encoder_kind == "conv":
            x = conv_sub_block(x, params, f"enc.{i}.conv", src_mask)
        a, _ = multi_head_attention(x, x, params, f"enc.{i}.attn", config.n_heads, key_mask)
        x = _sublayer(x, a, params, f"enc.{i}.attn_norm", config.dropout, train_mode, rng)
        f = _ffn(x, params, f"enc.{i}.ff")
        x = _sublayer(x, f, params, f"enc.{i}.ff_norm", config.dropout, train_mode, rng)
    return x


def _causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def decoder_forward(batch, enc_out: Tensor, params: ParameterSet, config: ModelConfig,
                    train_mode: bool = False, rng: np.random.Generator | None = None
                    ) -> tuple[Tensor, list[Tensor]]:
    """Run the decoder over ``batch.tgt_in_ids`` against encoder output.

    Decoder self-attention is causally masked (position t sees only <= t)
    and also hides target pad keys; cross-attention hides source pad keys.
    Returns logits [B, T_t, vocab] and the per-layer cross-attention
    tensors [B, n_heads, T_t, T_s].
    """
    ids = batch.tgt_in_ids
    if int(ids.max()) >= config.vocab_size:
        raise ShapeError("target id out of vocabulary range")
    t = ids.shape[1]
    x = _embed(ids, params, "tgt_embed", config, train_mode, rng)
    self_mask = _causal_mask(t)[None, None, :, :] & batch.tgt_in_mask[:, None, None, :]
    cross_mask = batch.src_mask[:, None, None, :]
    cross_maps: list[Tensor] = []
    for i in range(config.n_layers):
        a, _ = multi_head_attention(x, x, params, f"dec.{i}.self_attn", config.n_heads, self_mask)
        x = _sublayer(x, a, params, f"dec.{i}.self_norm", config.dropout, train_mode, rng)
        c, attn = multi_head_attention(x, enc_out, params, f"dec.{i}.cross_attn",
                                       config.n_heads, cross_mask)
        cross_maps.append(attn)
        x = _sublayer(x, c, params, f"dec.{i}.cross_norm", config.dropout, train_mode, rng)
        f = _ffn(x, params, f"dec.{i}.ff")
        x = _sublayer(x, f, params, f"dec.{i}.ff_norm", config.dropout, train_mode, rng)
    logits = _linear(x, params, "out")
    return logits, cross_maps


def model_forward(batch, params: ParameterSet, config: ModelConfig,
                  train_mode: bool = False, rng: np.random.Generator | None = None
                  ) -> tuple[Tensor, list[Tensor]]:
    """Teacher-forced forward pass: encoder, then decoder on the BOS-shifted
    target. Returns decoder logits and per-layer cross-attention."""
    enc_out = encoder_forward(batch, params, config, train_mode, rng)
    return decoder_forward(batch, enc_out, params, config, train_mode, rng)


def extract_cross_attention(batch, params: ParameterSet, config: ModelConfig,
                            layer: str = "last", head_mode: str = "mean"
                            ) -> list[AttentionMap]:
    """Last-layer cross-attention per sentence, averaged over heads.

    Rows cover every target position (the EOS-producing one included),
    columns cover real source positions only; rows are renormalized to sum
    to 1 after the head average.
    """
    from .tensor import no_grad

    if layer != "last":
        raise ValueError("only layer='last' is supported")
    if head_mode != "mean":
        raise ValueError("only head_mode='mean' is supported")
    with no_grad():
        _, cross_maps = model_forward(batch, params, config)
    last = cross_maps[-1].data.mean(axis=1)  # [B, T_t, T_s]
    out = []
    for row in range(last.shape[0]):
        t_len = int(batch.tgt_mask[row].sum())
        s_len = int(batch.src_mask[row].sum())
        m = last[row, :t_len, :s_len]
        m = m / m.sum(axis=-1, keepdims=True)
        out.append(AttentionMap(matrix=m, layer=config.n_layers - 1, head="mean",
                                source_len=s_len, target_len=t_len))
    return out
