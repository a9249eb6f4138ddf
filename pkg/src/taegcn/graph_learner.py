"""Evolving graph construction.

Each node carries a hidden state seeded from summary statistics of its
training history and updated by a GRU once per pooling period. After every
update an asymmetric adjacency is scored for all ordered node pairs: an
edge-strength MLP (rectified) gated elementwise by a sigmoid mask MLP.
The resulting sequence of matrices, one per period, drives the graph
convolution downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, uniform_init
from .errors import ContractError, ShapeError

STATIC_FEATURES_PER_CHANNEL = 7


def extract_static_features(dataset) -> np.ndarray:
    """Seven summary statistics per node and channel from observed entries.

    Order: mean, std, min, max, lag-1 autocorrelation, missing fraction,
    RMS of first differences. A channel with no observed entries degrades to
    [0, 0, 0, 0, 0, 1, 0]. Statistics other than the missing fraction are
    computed on the observed subsequence compacted in time order.
    """
    n, t, c = dataset.values.shape
    out = np.zeros((n, c * STATIC_FEATURES_PER_CHANNEL), dtype=np.float64)
    for i in range(n):
        for ch in range(c):
            base = ch * STATIC_FEATURES_PER_CHANNEL
            obs = dataset.observed[i, :, ch]
            vals = dataset.values[i, :, ch][obs]
            missing_fraction = 1.0 - vals.size / t
            if vals.size == 0:
                out[i, base:base + 7] = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]
                continue
            out[i, base + 0] = vals.mean()
            out[i, base + 1] = vals.std()
            out[i, base + 2] = vals.min()
            out[i, base + 3] = vals.max()
            out[i, base + 4] = _lag1_autocorr(vals)
            out[i, base + 5] = missing_fraction
            out[i, base + 6] = _diff_rms(vals)
    return out


def _lag1_autocorr(vals: np.ndarray) -> float:
    if vals.size < 2:
        return 0.0
    a = vals[:-1] - vals[:-1].mean()
    b = vals[1:] - vals[1:].mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        return 0.0
    return float((a * b).sum() / denom)


def _diff_rms(vals: np.ndarray) -> float:
    if vals.size < 2:
        return 0.0
    diffs = np.diff(vals)
    return float(np.sqrt((diffs * diffs).mean()))


@dataclass
class GruParams:
    """Gated recurrent update over [pooled features ; previous state]."""

    w_reset: Tensor
    w_update: Tensor
    w_candidate: Tensor
    b_reset: Tensor
    b_update: Tensor
    b_candidate: Tensor


def init_gru_params(rng: np.random.Generator, in_channels: int, state_dim: int) -> GruParams:
    width = in_channels + state_dim
    return GruParams(
        w_reset=uniform_init(rng, (width, state_dim), width),
        w_update=uniform_init(rng, (width, state_dim), width),
        w_candidate=uniform_init(rng, (width, state_dim), width),
        b_reset=Tensor(np.zeros(state_dim), requires_grad=True),
        b_update=Tensor(np.zeros(state_dim), requires_grad=True),
        b_candidate=Tensor(np.zeros(state_dim), requires_grad=True),
    )


@dataclass
class PairScorerParams:
    """Static-state seed plus the two pairwise MLPs (edge strength and gate).

    The static projection may be shared between layers; the pairwise MLPs
    are two-layer perceptrons 2*d -> d -> 1 with a ReLU hidden layer.
    """

    static_weight: Tensor
    static_bias: Tensor
    edge_w1: Tensor
    edge_b1: Tensor
    edge_w2: Tensor
    edge_b2: Tensor
    gate_w1: Tensor
    gate_b1: Tensor
    gate_w2: Tensor
    gate_b2: Tensor


def init_pair_scorer_params(rng: np.random.Generator, static_dim: int, state_dim: int,
                            static_weight: Tensor | None = None,
                            static_bias: Tensor | None = None) -> PairScorerParams:
    if static_weight is None:
        static_weight = uniform_init(rng, (static_dim, state_dim), static_dim)
        static_bias = Tensor(np.zeros(state_dim), requires_grad=True)
    pair = 2 * state_dim
    return PairScorerParams(
        static_weight=static_weight,
        static_bias=static_bias,
        edge_w1=uniform_init(rng, (pair, state_dim), pair),
        edge_b1=Tensor(np.zeros(state_dim), requires_grad=True),
        edge_w2=uniform_init(rng, (state_dim, 1), state_dim),
        # start permissive: early training wants to close every edge
        # before the rest of the net can exploit any of them, and scores
        # pushed under the ReLU never recover; the positive offset keeps
        # edges live long enough to earn their keep
        edge_b2=Tensor(np.full(1, 0.5), requires_grad=True),
        gate_w1=uniform_init(rng, (pair, state_dim), pair),
        gate_b1=Tensor(np.zeros(state_dim), requires_grad=True),
        gate_w2=uniform_init(rng, (state_dim, 1), state_dim),
        gate_b2=Tensor(np.zeros(1), requires_grad=True),
    )


def init_state(static_features, params: PairScorerParams) -> Tensor:
    """Initial node states: tanh of the projected static features, in (-1, 1)."""
    feats = static_features if isinstance(static_features, Tensor) else Tensor(static_features)
    if feats.shape[-1] != params.static_weight.shape[0]:
        raise ShapeError(f"static features have {feats.shape[-1]} columns, "
                         f"projection expects {params.static_weight.shape[0]}")
    return (feats @ params.static_weight + params.static_bias).tanh()


def pool_period(features: Tensor, period_index: int, period_length: int) -> Tensor:
    """Mean of [..., N, T, C] over the steps of 1-based period ``period_index``."""
    if period_length < 1:
        raise ContractError(f"period length must be >= 1, got {period_length}")
    t_len = features.shape[-2]
    stop = period_index * period_length
    if period_index < 1 or stop > t_len:
        raise ContractError(f"period {period_index} of length {period_length} "
                            f"exceeds {t_len} steps")
    key = (slice(None),) * (features.ndim - 2) + (slice(stop - period_length, stop),)
    return features[key].mean(axis=-2)


def gru_step(pooled: Tensor, state: Tensor, params: GruParams) -> Tensor:
    """One gated update; output stays in (-1, 1) for tanh-bounded histories."""
    if pooled.shape[:-1] != state.shape[:-1]:
        raise ShapeError(f"pooled {pooled.shape} and state {state.shape} rows differ")
    joint = ad.concat([pooled, state], axis=-1)
    reset = (joint @ params.w_reset + params.b_reset).sigmoid()
    update = (joint @ params.w_update + params.b_update).sigmoid()
    gated = ad.concat([pooled, reset * state], axis=-1)
    candidate = (gated @ params.w_candidate + params.b_candidate).tanh()
    return update * state + (1.0 - update) * candidate


def _pair_mlp(pairs: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    hidden = (pairs @ w1 + b1).relu()
    return (hidden @ w2 + b2)[..., 0]


def build_adjacency(state: Tensor, params: PairScorerParams) -> Tensor:
    """Score every ordered node pair from concatenated states.

    A[i, j] = relu(edge_mlp([s_i ; s_j])) * sigmoid(gate_mlp([s_i ; s_j])),
    so entries are nonnegative and the matrix need not be symmetric.
    """
    if state.ndim < 2:
        raise ShapeError(f"state needs [..., N, d], got {state.shape}")
    n = state.shape[-2]
    d = state.shape[-1]
    lead = state.shape[:-2]
    rows = state.reshape(lead + (n, 1, d)).broadcast_to(lead + (n, n, d))
    cols = state.reshape(lead + (1, n, d)).broadcast_to(lead + (n, n, d))
    pairs = ad.concat([rows, cols], axis=-1)
    strength = _pair_mlp(pairs, params.edge_w1, params.edge_b1,
                         params.edge_w2, params.edge_b2).relu()
    gate = _pair_mlp(pairs, params.gate_w1, params.gate_b1,
                     params.gate_w2, params.gate_b2).sigmoid()
    return strength * gate


def evolve_sequence(features: Tensor, state: Tensor, gru: GruParams,
                    scorer: PairScorerParams, period_length: int) -> list[Tensor]:
    """Adjacency per period: pool, update the state, score all pairs.

    ``features``: [..., N, T, C] with T divisible by the period length.
    Returns one [..., N, N] tensor per period, in chronological order; the
    matrix for period m depends only on periods 1..m.
    """
    t_len = features.shape[-2]
    if t_len % period_length != 0:
        raise ContractError(f"{t_len} steps not divisible by period length {period_length}")
    periods = t_len // period_length
    sequence = []
    for m in range(1, periods + 1):
        pooled = pool_period(features, m, period_length)
        state = gru_step(pooled, state, gru)
        sequence.append(build_adjacency(state, scorer))
    return sequence
