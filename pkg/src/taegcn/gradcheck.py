"""Finite-difference verification of analytic gradients.

Each check builds a tiny scalar-valued expression, runs one backward pass,
then re-derives every gradient entry by central differences and reports the
worst relative gap. Inputs are drawn in [-1, 1] and nudged away from
activation kinks so the two-sided difference stays well behaved.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def central_difference(f: Callable[[], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numeric d f / d x, perturbing ``x`` in place one entry at a time."""
    grad = np.empty_like(x)
    flat = x.ravel()
    out = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_gap(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Infinity-norm gap normalized by the numeric gradient magnitude.

    The scale is floored at 1e-5: central differences at h=1e-6 on a loss
    of order one carry ~1e-10 of irreducible cancellation noise, so below
    the floor a gap under 1e-4 amounts to an absolute bar of 1e-9, still
    an order of magnitude above that noise but far below any real
    jacobian defect.
    """
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(numeric))) if numeric.size else 0.0, 1e-5)
    return diff / scale


def check_gradients(build: Callable[[list[Tensor]], Tensor], leaves: list[Tensor],
                    h: float = 1e-6) -> float:
    """Max relative error across all leaves of the scalar built by ``build``.

    ``build`` must construct the scalar loss from the given leaves each time
    it is called; leaf data is perturbed in place for the numeric side.
    """
    loss = build(leaves)
    for leaf in leaves:
        leaf.grad = None
    ad.backward(loss)

    def value() -> float:
        with ad.no_grad():
            return build(leaves).item()

    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = central_difference(value, leaf.data, h=h)
        worst = max(worst, relative_gap(analytic, numeric))
    return worst


def _leaf(rng: np.random.Generator, shape, away_from_zero: bool = False) -> Tensor:
    vals = rng.uniform(-1.0, 1.0, size=shape)
    if away_from_zero:
        vals = vals + 0.2 * np.sign(vals) + np.where(vals == 0.0, 0.2, 0.0)
    return Tensor(vals, requires_grad=True)


def primitive_checks(seed: int = 0) -> dict[str, float]:
    """Relative FD error for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    checks: dict[str, float] = {}

    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (3, 4))
    checks["add"] = check_gradients(lambda ls: (ls[0] + ls[1]).sum(), [a, b])
    checks["sub"] = check_gradients(lambda ls: (ls[0] - ls[1]).sum(), [a, b])
    checks["mul"] = check_gradients(lambda ls: (ls[0] * ls[1]).sum(), [a, b])

    den = Tensor(rng.uniform(0.5, 1.5, size=(3, 4)), requires_grad=True)
    checks["div"] = check_gradients(lambda ls: (ls[0] / ls[1]).sum(), [a, den])

    m1 = _leaf(rng, (2, 3, 4))
    m2 = _leaf(rng, (4, 5))
    checks["matmul"] = check_gradients(lambda ls: (ls[0] @ ls[1]).sum(), [m1, m2])

    x = _leaf(rng, (3, 4), away_from_zero=True)
    checks["relu"] = check_gradients(lambda ls: ls[0].relu().sum(), [x])
    checks["sigmoid"] = check_gradients(lambda ls: ls[0].sigmoid().sum(), [x])
    checks["tanh"] = check_gradients(lambda ls: ls[0].tanh().sum(), [x])
    checks["abs"] = check_gradients(lambda ls: ls[0].abs().sum(), [x])

    r = _leaf(rng, (2, 6))
    checks["reshape"] = check_gradients(lambda ls: (ls[0].reshape((3, 4)) * ls[1]).sum(), [r, a])
    checks["swapaxes"] = check_gradients(lambda ls: (ls[0].swapaxes(0, 1) * ls[1]).sum(),
                                         [_leaf(rng, (4, 3)), a])
    sm = _leaf(rng, (3, 1))
    checks["broadcast_to"] = check_gradients(lambda ls: (ls[0].broadcast_to((3, 4)) * ls[1]).sum(),
                                             [sm, a])
    big = _leaf(rng, (4, 6))
    checks["slice"] = check_gradients(lambda ls: (ls[0][1:3, ::2] * ls[1][:2, :3]).sum(), [big, a])

    c1 = _leaf(rng, (2, 3))
    c2 = _leaf(rng, (4, 3))
    w = _leaf(rng, (6, 3))
    checks["concat"] = check_gradients(lambda ls: (ad.concat([ls[0], ls[1]], axis=0) * ls[2]).sum(),
                                       [c1, c2, w])

    s = _leaf(rng, (3, 4, 2))
    checks["sum"] = check_gradients(lambda ls: (ls[0].sum(axis=1) * ls[1][:, :2]).sum(), [s, a])
    checks["mean"] = check_gradients(lambda ls: (ls[0].mean(axis=2) * ls[1][:, :4]).sum(), [s, a])

    scores = _leaf(rng, (2, 4, 4))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    probe = Tensor(rng.uniform(-1, 1, size=(2, 4, 4)))
    checks["masked_softmax"] = check_gradients(
        lambda ls: (ad.masked_softmax(ls[0], mask) * probe).sum(), [scores])

    adj = Tensor(rng.uniform(0.0, 1.0, size=(2, 3, 3)), requires_grad=True)
    feats = _leaf(rng, (2, 3, 5))
    checks["node_mix"] = check_gradients(lambda ls: (ad.node_mix(ls[0], ls[1])).sum(), [adj, feats])

    return checks


def model_check(seed: int = 0) -> float:
    """FD check of the full forecaster loss on a 2-node toy configuration."""
    from .graph_learner import extract_static_features
    from .data import SeriesDataset
    from .network import ModelConfig, TaegcnNetwork, masked_mae_loss

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(layers=2, windows=(2, 3), heads=2, hidden_channels=8,
                      state_dim=4, period=3, input_length=6, horizon=2,
                      skip_channels=8, head_hidden=16, seed=seed)
    n_nodes, channels = 2, 1
    net = TaegcnNetwork(cfg, in_channels=channels)
    series = SeriesDataset(values=rng.uniform(-1.0, 1.0, size=(n_nodes, 24, channels)),
                           node_ids=[f"n{i}" for i in range(n_nodes)],
                           timestamps=list(range(0, 24 * 300, 300)))
    net.set_static_features(extract_static_features(series))
    # redraw every parameter, biases included, so no preactivation sits
    # exactly on a ReLU kink where two-sided differences are one-sided
    for _, p in net.store.items():
        p.data = rng.uniform(-0.6, 0.6, size=p.shape)

    x = rng.uniform(-1.0, 1.0, size=(1, n_nodes, cfg.input_length, channels))
    y = rng.uniform(-1.0, 1.0, size=(1, n_nodes, cfg.horizon))

    def build(_leaves) -> Tensor:
        pred = net.forward(Tensor(x))
        return masked_mae_loss(pred, y, missing_marker=0.0)

    leaves = [t for _, t in net.store.items()]
    loss = build(leaves)
    net.store.zero_grad()
    ad.backward(loss)

    def value() -> float:
        with ad.no_grad():
            return build(leaves).item()

    worst = 0.0
    for name, p in net.store.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = central_difference(value, p.data)
        worst = max(worst, relative_gap(analytic, numeric))
    return worst


def run_suite(seed: int = 0) -> dict[str, float]:
    """All primitive checks plus the end-to-end model loss check."""
    report = primitive_checks(seed)
    report["model_loss"] = model_check(seed)
    return report
