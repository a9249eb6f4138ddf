"""Per-node temporal feature extraction.

The primary extractor is multi-head self-attention over the time axis of
each node, restricted to a short causal window: position t may attend to
positions t' with t - w < t' <= t. Nodes never mix here; spatial mixing
happens later through the learned graph. A dilated causal convolution with
kernel 2 is provided as the drop-in replacement used by the attention
ablation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, uniform_init
from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class WindowMask:
    """Boolean attention mask: allowed[t, t2] permits t to read t2."""

    length: int
    window: int
    allowed: np.ndarray

    def is_allowed(self, t: int, t2: int) -> bool:
        return bool(self.allowed[t, t2])


@lru_cache(maxsize=256)
def build_causal_window_mask(length: int, window: int) -> WindowMask:
    """Mask permitting positions within the trailing window, self included."""
    if length < 1:
        raise ContractError(f"mask length must be >= 1, got {length}")
    if window < 1:
        raise ContractError(f"window must be >= 1, got {window}")
    t = np.arange(length)[:, None]
    t2 = np.arange(length)[None, :]
    allowed = (t2 <= t) & (t2 > t - window)
    allowed.flags.writeable = False
    return WindowMask(length=length, window=window, allowed=allowed)


@dataclass
class TmsaLayerParams:
    """Weights for one windowed attention layer.

    Per-head query/key/value projections map the channel axis to the head
    width; concatenated head outputs are mixed back to the channel width and
    pushed through a position-wise dense layer with ReLU.
    """

    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_out: Tensor
    fc_weight: Tensor
    fc_bias: Tensor
    windows: tuple[int, ...]

    @property
    def heads(self) -> int:
        return len(self.w_q)

    @property
    def head_dim(self) -> int:
        return self.w_q[0].shape[1]


def init_tmsa_params(rng: np.random.Generator, channels: int, heads: int,
                     windows: tuple[int, ...]) -> TmsaLayerParams:
    if channels % heads != 0:
        raise ContractError(f"channels {channels} not divisible by heads {heads}")
    if len(windows) != heads:
        raise ContractError(f"need one window per head, got {len(windows)} for {heads} heads")
    head_dim = channels // heads
    return TmsaLayerParams(
        w_q=[uniform_init(rng, (channels, head_dim), channels) for _ in range(heads)],
        w_k=[uniform_init(rng, (channels, head_dim), channels) for _ in range(heads)],
        w_v=[uniform_init(rng, (channels, head_dim), channels) for _ in range(heads)],
        w_out=uniform_init(rng, (heads * head_dim, channels), heads * head_dim),
        fc_weight=uniform_init(rng, (channels, channels), channels),
        fc_bias=Tensor(np.zeros(channels), requires_grad=True),
        windows=tuple(windows),
    )


def tmsa_forward(z: Tensor, params: TmsaLayerParams) -> Tensor:
    """Causal windowed attention over time, independently per node.

    z: [..., N, T, C] -> [..., N, T, C]. The time extent is preserved and
    output at time t depends only on inputs at times t-w+1 .. t.
    """
    if z.ndim < 3:
        raise ShapeError(f"attention input needs [..., N, T, C], got {z.shape}")
    t_len = z.shape[-2]
    channels = z.shape[-1]
    if channels != params.w_q[0].shape[0]:
        raise ShapeError(
            f"input channels {channels} do not match projection rows {params.w_q[0].shape[0]}")
    scale = 1.0 / np.sqrt(params.head_dim)
    head_outputs = []
    for h in range(params.heads):
        q = z @ params.w_q[h]
        k = z @ params.w_k[h]
        v = z @ params.w_v[h]
        scores = (q @ k.swapaxes(-1, -2)) * scale
        mask = build_causal_window_mask(t_len, params.windows[h])
        attn = ad.masked_softmax(scores, mask.allowed)
        head_outputs.append(attn @ v)
    mixed = ad.concat(head_outputs, axis=-1) @ params.w_out
    return (mixed @ params.fc_weight + params.fc_bias).relu()


@dataclass
class CausalConvParams:
    """Kernel-2 dilated causal convolution, channel preserving."""

    w_now: Tensor
    w_past: Tensor
    bias: Tensor
    dilation: int


def init_causal_conv_params(rng: np.random.Generator, channels: int,
                            dilation: int) -> CausalConvParams:
    if dilation < 1:
        raise ContractError(f"dilation must be >= 1, got {dilation}")
    return CausalConvParams(
        w_now=uniform_init(rng, (channels, channels), 2 * channels),
        w_past=uniform_init(rng, (channels, channels), 2 * channels),
        bias=Tensor(np.zeros(channels), requires_grad=True),
        dilation=dilation,
    )


def causal_conv_forward(z: Tensor, params: CausalConvParams) -> Tensor:
    """out[t] = relu(z[t] W_now + z[t - dilation] W_past + b), zero padded."""
    if z.ndim < 3:
        raise ShapeError(f"conv input needs [..., N, T, C], got {z.shape}")
    t_len = z.shape[-2]
    d = params.dilation
    if d >= t_len:
        past = Tensor(np.zeros(z.shape))
    else:
        pad = Tensor(np.zeros(z.shape[:-2] + (d, z.shape[-1])))
        key = (slice(None),) * (z.ndim - 2) + (slice(0, t_len - d), slice(None))
        past = ad.concat([pad, z[key]], axis=-2)
    return (z @ params.w_now + past @ params.w_past + params.bias).relu()
