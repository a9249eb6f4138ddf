"""Forecaster assembly.

A stack of identical blocks, each running windowed causal attention over
every node's history, re-estimating the node graph once per period from
the attended features, then convolving those features over the graph.
The last time step of every block's output is projected and summed into
a skip vector that a two-layer head turns into per-node forecasts.

Variants swap one block ingredient while keeping the rest intact:
``no_attention`` replaces attention with a dilated causal convolution,
``static_graph`` freezes the adjacency at its initial estimate instead
of evolving it across periods.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, fields

import numpy as np

from .attention import (
    CausalConvParams,
    TmsaLayerParams,
    causal_conv_forward,
    init_causal_conv_params,
    init_tmsa_params,
    tmsa_forward,
)
from .autodiff import ParameterStore, Tensor, narrow, uniform_init
from .data import atomic_write_text
from .errors import ConfigError, ContractError, DataError, ShapeError
from .graph_conv import GcnParams, gcn_forward, init_gcn_params
from .graph_learner import (
    STATIC_FEATURES_PER_CHANNEL,
    GruParams,
    PairScorerParams,
    build_adjacency,
    evolve_sequence,
    init_gru_params,
    init_pair_scorer_params,
    init_state,
)

__all__ = [
    "VARIANTS",
    "CHECKPOINT_VERSION",
    "ModelConfig",
    "TaegcnNetwork",
    "masked_mae_loss",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("full", "no_attention", "static_graph")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; everything data-independent.

    ``windows`` is one attention window per block when
    ``window_assignment`` is "per_layer", or one per head (the same set in
    every block) when it is "per_head".
    """

    layers: int = 4
    windows: tuple[int, ...] = (1, 3, 6, 12)
    window_assignment: str = "per_layer"
    heads: int = 4
    hidden_channels: int = 32
    state_dim: int = 16
    period: int = 3
    input_length: int = 12
    horizon: int = 3
    skip_channels: int = 64
    head_hidden: int = 256
    target_channel: int = 0
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "windows", tuple(int(w) for w in self.windows))
        except TypeError as exc:
            raise ConfigError(f"windows must be a sequence of ints, "
                              f"got {self.windows!r}") from exc
        positive = ["layers", "heads", "hidden_channels", "state_dim", "period",
                    "input_length", "horizon", "skip_channels", "head_hidden"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.target_channel < 0:
            raise ConfigError(f"target_channel must be >= 0, got {self.target_channel}")
        if self.hidden_channels % self.heads != 0:
            raise ConfigError(f"hidden_channels {self.hidden_channels} not divisible "
                              f"by {self.heads} heads")
        if self.input_length % self.period != 0:
            raise ConfigError(f"input_length {self.input_length} not divisible "
                              f"by period {self.period}")
        if self.window_assignment not in ("per_layer", "per_head"):
            raise ConfigError(f"window_assignment must be 'per_layer' or 'per_head', "
                              f"got {self.window_assignment!r}")
        expected = self.layers if self.window_assignment == "per_layer" else self.heads
        if len(self.windows) != expected:
            raise ConfigError(f"need {expected} windows for {self.window_assignment} "
                              f"assignment, got {len(self.windows)}")
        if any(w < 1 for w in self.windows):
            raise ConfigError(f"windows must be >= 1, got {self.windows}")

    def head_windows(self, layer: int) -> tuple[int, ...]:
        """The per-head window tuple in force at ``layer``."""
        if self.window_assignment == "per_head":
            return self.windows
        return (self.windows[layer],) * self.heads

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["windows"] = list(self.windows)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model option(s): {sorted(unknown)}")
        return cls(**raw)


@dataclass
class _Block:
    attn: TmsaLayerParams | None
    conv: CausalConvParams | None
    gru: GruParams | None
    scorer: PairScorerParams
    gcn: GcnParams
    skip_weight: Tensor
    skip_bias: Tensor


class TaegcnNetwork:
    """The forecaster itself: parameters plus the forward computation.

    Construction draws every weight from a generator seeded by the config,
    so two networks built from equal configs agree bit for bit. Static node
    features summarizing the training series must be supplied through
    :meth:`set_static_features` before the first forward pass.
    """

    def __init__(self, config: ModelConfig, in_channels: int, variant: str = "full"):
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {in_channels}")
        if config.target_channel >= in_channels:
            raise ConfigError(f"target_channel {config.target_channel} out of range "
                              f"for {in_channels} input channels")
        self.config = config
        self.in_channels = in_channels
        self.variant = variant
        self.static_dim = STATIC_FEATURES_PER_CHANNEL * in_channels
        self._static: np.ndarray | None = None
        self.store = ParameterStore()

        rng = np.random.default_rng(config.seed)
        c = config.hidden_channels
        self.input_weight = uniform_init(rng, (in_channels, c), fan_in=in_channels)
        self.input_bias = Tensor(np.zeros(c), requires_grad=True)
        self.static_weight = uniform_init(rng, (self.static_dim, config.state_dim),
                                          fan_in=self.static_dim)
        self.static_bias = Tensor(np.zeros(config.state_dim), requires_grad=True)

        self.blocks: list[_Block] = []
        for layer in range(config.layers):
            windows = config.head_windows(layer)
            attn = conv = gru = None
            if variant == "no_attention":
                conv = init_causal_conv_params(rng, c, dilation=max(windows))
            else:
                attn = init_tmsa_params(rng, c, config.heads, windows)
            if variant != "static_graph":
                gru = init_gru_params(rng, c, config.state_dim)
            scorer = init_pair_scorer_params(rng, self.static_dim, config.state_dim,
                                             static_weight=self.static_weight,
                                             static_bias=self.static_bias)
            self.blocks.append(_Block(
                attn=attn, conv=conv, gru=gru, scorer=scorer,
                gcn=init_gcn_params(rng, c),
                skip_weight=uniform_init(rng, (c, config.skip_channels), fan_in=c),
                skip_bias=Tensor(np.zeros(config.skip_channels), requires_grad=True),
            ))

        self.head_w1 = uniform_init(rng, (config.skip_channels, config.head_hidden),
                                    fan_in=config.skip_channels)
        self.head_b1 = Tensor(np.zeros(config.head_hidden), requires_grad=True)
        self.head_w2 = uniform_init(rng, (config.head_hidden, config.horizon),
                                    fan_in=config.head_hidden)
        self.head_b2 = Tensor(np.zeros(config.horizon), requires_grad=True)
        self._register_all()

    def _register_all(self) -> None:
        reg = self.store.register
        reg("input_proj.weight", self.input_weight)
        reg("input_proj.bias", self.input_bias)
        reg("static_proj.weight", self.static_weight)
        reg("static_proj.bias", self.static_bias)
        for i, blk in enumerate(self.blocks):
            at = f"blocks.{i}"
            if blk.attn is not None:
                for h in range(len(blk.attn.w_q)):
                    reg(f"{at}.attn.head{h}.w_q", blk.attn.w_q[h])
                    reg(f"{at}.attn.head{h}.w_k", blk.attn.w_k[h])
                    reg(f"{at}.attn.head{h}.w_v", blk.attn.w_v[h])
                reg(f"{at}.attn.w_out", blk.attn.w_out)
                reg(f"{at}.attn.fc_weight", blk.attn.fc_weight)
                reg(f"{at}.attn.fc_bias", blk.attn.fc_bias)
            if blk.conv is not None:
                reg(f"{at}.conv.w_now", blk.conv.w_now)
                reg(f"{at}.conv.w_past", blk.conv.w_past)
                reg(f"{at}.conv.bias", blk.conv.bias)
            if blk.gru is not None:
                for name in ("w_reset", "b_reset", "w_update", "b_update",
                             "w_candidate", "b_candidate"):
                    reg(f"{at}.gru.{name}", getattr(blk.gru, name))
            for name in ("edge_w1", "edge_b1", "edge_w2", "edge_b2",
                         "gate_w1", "gate_b1", "gate_w2", "gate_b2"):
                reg(f"{at}.scorer.{name}", getattr(blk.scorer, name))
            reg(f"{at}.gcn.weight", blk.gcn.weight)
            reg(f"{at}.gcn.bias", blk.gcn.bias)
            reg(f"{at}.gcn.res_weight", blk.gcn.res_weight)
            reg(f"{at}.skip.weight", blk.skip_weight)
            reg(f"{at}.skip.bias", blk.skip_bias)
        reg("head.w1", self.head_w1)
        reg("head.b1", self.head_b1)
        reg("head.w2", self.head_w2)
        reg("head.b2", self.head_b2)

    def set_static_features(self, features: np.ndarray) -> None:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.static_dim:
            raise ShapeError(f"static features must be [nodes, {self.static_dim}], "
                             f"got {features.shape}")
        if not np.isfinite(features).all():
            raise ContractError("static features must be finite")
        self._static = features.copy()

    @property
    def n_nodes(self) -> int:
        if self._static is None:
            raise ContractError("static features not set; call set_static_features first")
        return self._static.shape[0]

    def forward(self, x: Tensor, return_adjacency: bool = False):
        """Forecast from inputs [..., nodes, input_length, in_channels].

        Accepts one window or a leading batch axis. Returns predictions
        [..., nodes, horizon]; with ``return_adjacency``, also a list per
        block of the raw adjacencies used, one per period (a single entry
        for the static variant).
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        cfg = self.config
        if x.ndim not in (3, 4):
            raise ShapeError(f"input must be [nodes, time, channels] with an "
                             f"optional batch axis, got {x.shape}")
        n = self.n_nodes
        if x.shape[-3:] != (n, cfg.input_length, self.in_channels):
            raise ShapeError(f"input shaped {x.shape} does not match {n} nodes, "
                             f"{cfg.input_length} steps, {self.in_channels} channels")

        z = x @ self.input_weight + self.input_bias
        alpha0 = init_state(Tensor(self._static), self.blocks[0].scorer)
        if x.ndim == 4:
            alpha0 = alpha0.broadcast_to((x.shape[0],) + alpha0.shape)

        skip_total = None
        adjacencies: list[list[Tensor]] = []
        for blk in self.blocks:
            if blk.conv is not None:
                feats = causal_conv_forward(z, blk.conv)
            else:
                feats = tmsa_forward(z, blk.attn)
            if blk.gru is None:
                adjs = [build_adjacency(alpha0, blk.scorer)]
            else:
                adjs = evolve_sequence(feats, alpha0, blk.gru, blk.scorer, cfg.period)
            z = gcn_forward(feats, adjs, blk.gcn)
            last = narrow(z, (Ellipsis, -1, slice(None)))
            bump = last @ blk.skip_weight + blk.skip_bias
            skip_total = bump if skip_total is None else skip_total + bump
            if return_adjacency:
                adjacencies.append(adjs)

        hidden = (skip_total.relu() @ self.head_w1 + self.head_b1).relu()
        pred = hidden @ self.head_w2 + self.head_b2
        return (pred, adjacencies) if return_adjacency else pred


def masked_mae_loss(pred: Tensor, target, observed=None,
                    missing_marker: float | None = None) -> Tensor:
    """Mean absolute error over targets that were actually observed.

    Pass ``observed`` (bool, same shape) when the caller knows which
    targets are real, or ``missing_marker`` to treat exact marker matches
    as missing. With neither, every target counts. All targets missing
    yields a zero loss and a warning rather than an error.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"target shape {target.shape} != prediction {pred.shape}")
    if observed is not None:
        mask = np.asarray(observed, dtype=bool)
        if mask.shape != target.shape:
            raise ShapeError(f"observed mask shape {mask.shape} != target {target.shape}")
    elif missing_marker is not None:
        mask = target != missing_marker
    else:
        mask = np.ones(target.shape, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        warnings.warn("every target in the batch is missing; loss is zero")
        return Tensor(0.0)
    gap = (pred - Tensor(target)).abs() * Tensor(mask.astype(np.float64))
    return gap.sum() / count


def save_checkpoint(path, net: TaegcnNetwork, state: dict | None = None) -> None:
    """Write the network to ``path`` as JSON, atomically.

    Weights serialize through repr so a load returns bit-identical
    float64 values. ``state`` is an arbitrary JSON-compatible block for
    whatever the caller needs alongside the weights (normalization
    statistics, node ids, training history).
    """
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "variant": net.variant,
        "in_channels": net.in_channels,
        "config": net.config.to_dict(),
        "static_features": None if net._static is None else net._static.tolist(),
        "params": {name: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
                   for name, t in net.store.items()},
        "state": {} if state is None else state,
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True))


def load_checkpoint(path) -> tuple[TaegcnNetwork, dict]:
    """Rebuild a network saved by :func:`save_checkpoint`; returns it with
    the caller's state block."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    for key in ("format_version", "variant", "in_channels", "config", "params"):
        if key not in payload:
            raise DataError(f"checkpoint {path} is missing {key!r}")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint format {payload['format_version']} is not "
                        f"supported (expected {CHECKPOINT_VERSION})")
    config = ModelConfig.from_dict(payload["config"])
    net = TaegcnNetwork(config, in_channels=payload["in_channels"],
                        variant=payload["variant"])
    if payload.get("static_features") is not None:
        net.set_static_features(np.asarray(payload["static_features"], dtype=np.float64))
    restored = {}
    for name, entry in payload["params"].items():
        if not isinstance(entry, dict) or "shape" not in entry or "values" not in entry:
            raise DataError(f"checkpoint parameter {name!r} needs 'shape' and 'values'")
        restored[name] = np.asarray(entry["values"],
                                    dtype=np.float64).reshape(entry["shape"])
    net.store.load_state_dict(restored)
    return net, payload.get("state", {})
