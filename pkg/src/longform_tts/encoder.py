"""Feed-Forward Transformer blocks and encoder stacks.

Post-norm layout::

    y = LayerNorm(x + Dropout(SelfAttention(x)))
    y = LayerNorm(y + Dropout(Conv(ReLU(Conv(y)))))

Padded positions are zeroed after every sublayer so batched and unbatched
forward passes agree and padding never leaks into real positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nnet
from .nnet import AttentionParams, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 256
    filter_size: int = 1024
    kernel_size: int = 9
    heads: int = 2
    n_blocks: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positions")


PAPER_ENCODER = EncoderConfig()


@dataclass
class FftBlockParams:
    attn: AttentionParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    conv1_kernel: Tensor
    conv1_bias: Tensor
    conv2_kernel: Tensor
    conv2_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = self.attn.named(f"{prefix}attn.")
        for name, value in vars(self).items():
            if name != "attn":
                out[f"{prefix}{name}"] = value
        return out

    @classmethod
    def from_named(cls, params: dict[str, Tensor], prefix: str = "") -> FftBlockParams:
        attn = AttentionParams(**{k: params[f"{prefix}attn.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")})
        rest = {
            k: params[f"{prefix}{k}"]
            for k in (
                "ln1_gain",
                "ln1_bias",
                "conv1_kernel",
                "conv1_bias",
                "conv2_kernel",
                "conv2_bias",
                "ln2_gain",
                "ln2_bias",
            )
        }
        return cls(attn=attn, **rest)


def init_fft_block(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> FftBlockParams:
    d, f, k = cfg.d_model, cfg.filter_size, cfg.kernel_size

    def param(arr):
        return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    return FftBlockParams(
        attn=nnet.init_attention(d, rng, dtype),
        ln1_gain=param(np.ones(d)),
        ln1_bias=param(np.zeros(d)),
        conv1_kernel=param(rng.normal(0, 1 / math.sqrt(k * d), (k, d, f))),
        conv1_bias=param(np.zeros(f)),
        conv2_kernel=param(rng.normal(0, 1 / math.sqrt(k * f), (k, f, d))),
        conv2_bias=param(np.zeros(d)),
        ln2_gain=param(np.ones(d)),
        ln2_bias=param(np.zeros(d)),
    )


def _masked(x: Tensor, mask: np.ndarray | None) -> Tensor:
    return x if mask is None else nnet.mask_rows(x, mask)


def fft_block_forward(
    x,
    params: FftBlockParams,
    cfg: EncoderConfig,
    mask: np.ndarray | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One FFT block over ``x`` of shape ``[..., n, d_model]``; ``mask`` marks real positions."""
    x = nnet._wrap(x)
    if x.shape[-1] != cfg.d_model:
        raise nnet.ShapeError(f"FFT block expects model dim {cfg.d_model}, got {x.shape[-1]}")
    if x.shape[-2] == 0:
        return x
    attn = nnet.multi_head_self_attention(x, params.attn, cfg.heads, mask)
    y = nnet.layer_norm(x + nnet.dropout(attn, cfg.dropout, train, rng), params.ln1_gain, params.ln1_bias)
    y = _masked(y, mask)
    h = _masked(nnet.relu(nnet.conv1d(y, params.conv1_kernel, params.conv1_bias)), mask)
    h = nnet.conv1d(h, params.conv2_kernel, params.conv2_bias)
    y = nnet.layer_norm(y + nnet.dropout(h, cfg.dropout, train, rng), params.ln2_gain, params.ln2_bias)
    return _masked(y, mask)


def encoder_forward(
    x,
    blocks: list[FftBlockParams],
    cfg: EncoderConfig,
    mask: np.ndarray | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Add sinusoidal positions (indexed over the whole sequence), then apply the blocks in order."""
    if len(blocks) != cfg.n_blocks:
        raise ValueError(f"encoder configured for {cfg.n_blocks} blocks, got {len(blocks)}")
    x = nnet._wrap(x)
    n = x.shape[-2]
    h = x + nnet.sinusoidal_positions(n, x.shape[-1], dtype=x.data.dtype)
    h = _masked(h, mask)
    for block in blocks:
        h = fft_block_forward(h, block, cfg, mask, train, rng)
    return h


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> list[FftBlockParams]:
    return [init_fft_block(cfg, rng, dtype) for _ in range(cfg.n_blocks)]


def encoder_named(blocks: list[FftBlockParams], prefix: str) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for i, b in enumerate(blocks):
        out.update(b.named(f"{prefix}{i}."))
    return out


def encoder_from_named(params: dict[str, Tensor], prefix: str, n_blocks: int) -> list[FftBlockParams]:
    return [FftBlockParams.from_named(params, f"{prefix}{i}.") for i in range(n_blocks)]
