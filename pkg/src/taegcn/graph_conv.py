"""Graph convolution over learned adjacencies, applied per period.

The adjacency produced by the graph learner is raw edge strength. Before
mixing node features it is made row stochastic: self loops are added and
each row is divided by its sum, so a row describes how a node blends its
own signal with its neighbours'. One adjacency is in force per period of
the input window; every time step inside that period is convolved with it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, narrow, node_mix, uniform_init
from .errors import ContractError, ShapeError

__all__ = [
    "GcnParams",
    "init_gcn_params",
    "normalize_adjacency",
    "gcn_forward",
]


@dataclass
class GcnParams:
    weight: Tensor      # [C, C] applied after node mixing
    bias: Tensor        # [C]
    res_weight: Tensor  # [C, C] residual path, no mixing


def init_gcn_params(rng: np.random.Generator, channels: int) -> GcnParams:
    if channels < 1:
        raise ContractError(f"channels must be >= 1, got {channels}")
    return GcnParams(
        weight=uniform_init(rng, (channels, channels), fan_in=channels),
        bias=Tensor(np.zeros(channels), requires_grad=True),
        res_weight=uniform_init(rng, (channels, channels), fan_in=channels),
    )


def normalize_adjacency(adj: Tensor) -> Tensor:
    """Row-normalize ``adj`` with self loops: rows of (A + I) / rowsum.

    ``adj`` is [..., N, N] and must be nonnegative; the added self loop
    keeps every row sum at 1 or more, so the division is always defined.
    Row sums reduce through a sorted sum, keeping the result bit for bit
    equivariant under a simultaneous relabeling of rows and columns.
    """
    if not isinstance(adj, Tensor):
        adj = Tensor(adj)
    if adj.ndim < 2 or adj.shape[-1] != adj.shape[-2]:
        raise ShapeError(f"adjacency must be square in its last two dims, got {adj.shape}")
    if (adj.data < 0).any():
        worst = adj.data.min()
        raise ContractError(
            f"adjacency entries must be nonnegative, found {worst!r}")
    n = adj.shape[-1]
    with_loops = adj + Tensor(np.eye(n))
    ones = Tensor(np.ones(adj.shape[:-1] + (1,)))
    row_sums = node_mix(with_loops, ones)  # [..., N, 1]
    return with_loops / row_sums


def gcn_forward(z: Tensor, adjacencies, params: GcnParams) -> Tensor:
    """Convolve features [..., N, T, C] with one raw adjacency per period.

    ``adjacencies`` holds T / P matrices shaped [..., N, N] (leading dims
    matching ``z``), ordered by period; each is normalized here. Every step
    t in period m yields relu(A_m z_t W + b) plus an unmixed residual
    z_t W_res.
    """
    if z.ndim < 3:
        raise ShapeError(f"features must be [..., nodes, time, channels], got {z.shape}")
    adjacencies = list(adjacencies)
    if not adjacencies:
        raise ContractError("need at least one adjacency")
    n, t, c = z.shape[-3], z.shape[-2], z.shape[-1]
    if t % len(adjacencies) != 0:
        raise ContractError(
            f"{t} time steps do not divide into {len(adjacencies)} periods")
    if params.weight.shape[0] != c:
        raise ShapeError(
            f"weight expects {params.weight.shape[0]} channels, features have {c}")
    period = t // len(adjacencies)
    lead = z.shape[:-3]

    outputs = []
    for m, adj in enumerate(adjacencies):
        if adj.shape[-2:] != (n, n) or adj.shape[:-2] != lead:
            raise ShapeError(
                f"adjacency {m} is {adj.shape}, expected {lead + (n, n)}")
        mixer = normalize_adjacency(adj)
        chunk = narrow(z, (Ellipsis, slice(m * period, (m + 1) * period), slice(None)))
        flat = chunk.reshape(lead + (n, period * c))
        mixed = node_mix(mixer, flat).reshape(lead + (n, period, c))
        conv = ((mixed @ params.weight) + params.bias).relu()
        outputs.append(conv + chunk @ params.res_weight)
    return concat(outputs, axis=-2)
