"""Command-line surface: train, eval, predict, synth, gradcheck, export.

Every artifact is written atomically and every run echoes its fully
resolved configuration (seeds included) into the output directory, so a
finished run can be reproduced bit for bit from what it left behind.
Exit codes: 0 success, 1 usage, 2 data or configuration problem, 3
numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (
    NormStats,
    SynthSpec,
    atomic_write_text,
    chronological_split,
    compute_norm_stats,
    load_csv,
    make_windows,
    normalize,
    synth_generate,
    write_adjacency_csv,
    write_csv,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    ShapeError,
    UsageError,
)
from .gradcheck import run_suite
from .graph_learner import extract_static_features
from .network import ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, build_ablation, evaluate, fit, predict_windows

__all__ = ["main"]

GRADCHECK_TOLERANCE = 1e-4
_ABLATE_FLAG = {"tmsa": "ablate_tmsa", "egc": "ablate_egc"}


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so main() owns the exit code."""

    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="taegcn",
                     description="Spatio-temporal forecasting with a learned "
                                 "time-varying node graph.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    train = sub.add_parser("train", help="train a model from a run config")
    train.add_argument("--config", required=True, metavar="F",
                       help="run config JSON with data/model/train/output blocks")
    train.add_argument("--ablate", choices=sorted(_ABLATE_FLAG),
                       help="train a reduced variant instead of the full model")
    train.set_defaults(handler=_cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint against a series CSV")
    ev.add_argument("--checkpoint", required=True, metavar="F")
    ev.add_argument("--data", required=True, metavar="D")
    ev.add_argument("--out", metavar="F", help="also write the report as JSON")
    ev.set_defaults(handler=_cmd_eval)

    pr = sub.add_parser("predict", help="write forecasts for every window")
    pr.add_argument("--checkpoint", required=True, metavar="F")
    pr.add_argument("--data", required=True, metavar="D")
    pr.add_argument("--out", required=True, metavar="F")
    pr.set_defaults(handler=_cmd_predict)

    sy = sub.add_parser("synth", help="generate a regime-switching dataset")
    sy.add_argument("--spec", required=True, metavar="F")
    sy.add_argument("--out", required=True, metavar="DIR")
    sy.set_defaults(handler=_cmd_synth)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    gc.add_argument("--seed", type=int, default=0, metavar="S")
    gc.set_defaults(handler=_cmd_gradcheck)

    ex = sub.add_parser("export-adjacency",
                        help="dump the final layer's learned graph for one window")
    ex.add_argument("--checkpoint", required=True, metavar="F")
    ex.add_argument("--data", required=True, metavar="D")
    ex.add_argument("--nodes", required=True, metavar="i,j,...")
    ex.add_argument("--window", required=True, type=int, metavar="W")
    ex.add_argument("--out", required=True, metavar="DIR")
    ex.set_defaults(handler=_cmd_export)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        print(parser.format_usage().rstrip(), file=sys.stderr)
        return 1
    except (DataError, ConfigError, ShapeError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


# -- shared loading helpers -----------------------------------------------------


def _read_json(path: str, flag: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise DataError(f"{flag} {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{flag} {path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{flag} {path}: top level must be a JSON object")
    return raw


def _load_series(path: str, missing_marker: float):
    try:
        return load_csv(path, missing_marker=missing_marker)
    except OSError as exc:
        raise DataError(f"--data {path}: {exc.strerror or exc}") from exc


def _checkpoint_bundle(path: str):
    net, state = load_checkpoint(path)
    state = state or {}
    if "norm_stats" not in state:
        raise DataError(f"--checkpoint {path}: no normalization statistics in "
                        f"the state block; was this written by 'taegcn train'?")
    stats = NormStats.from_dict(state["norm_stats"])
    marker = float(state.get("missing_marker", 0.0))
    return net, stats, marker


def _windows_for(net, dataset, stats):
    cfg = net.config
    return make_windows(normalize(dataset, stats), cfg.input_length, cfg.horizon,
                        target_channel=cfg.target_channel, target_source=dataset)


def _dump_json(payload: dict, path: str) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _resolve_run_config(path: str):
    """Validate a RunConfigFile and apply defaults.

    Relative paths inside the file are taken relative to the file itself;
    the returned echo holds only absolute paths so it can be replayed from
    anywhere.
    """
    raw = _read_json(path, "--config")
    unknown = set(raw) - {"data", "model", "train", "output"}
    if unknown:
        raise ConfigError(f"--config {path}: unknown top-level key(s) "
                          f"{sorted(unknown)}; expected data/model/train/output")

    data_raw = raw.get("data")
    if not isinstance(data_raw, dict) or "path" not in data_raw:
        raise ConfigError(f"--config {path}: a 'data' block with a 'path' is required")
    extra = set(data_raw) - {"path", "missing_marker", "split"}
    if extra:
        raise ConfigError(f"--config {path}: unknown data key(s) {sorted(extra)}")
    out_raw = raw.get("output")
    if not isinstance(out_raw, dict) or "dir" not in out_raw:
        raise ConfigError(f"--config {path}: an 'output' block with a 'dir' is required")
    extra = set(out_raw) - {"dir"}
    if extra:
        raise ConfigError(f"--config {path}: unknown output key(s) {sorted(extra)}")

    try:
        model_cfg = ModelConfig.from_dict(raw.get("model", {}))
        train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    except ConfigError as exc:
        raise ConfigError(f"--config {path}: {exc}") from None

    split = data_raw.get("split", [0.7, 0.1, 0.2])
    if not (isinstance(split, (list, tuple)) and len(split) == 3):
        raise ConfigError(f"--config {path}: data split must be three fractions")
    marker = float(data_raw.get("missing_marker", 0.0))

    base = os.path.dirname(os.path.abspath(path))
    data_path = data_raw["path"]
    if not os.path.isabs(data_path):
        data_path = os.path.join(base, data_path)
    out_dir = out_raw["dir"]
    if not os.path.isabs(out_dir):
        out_dir = os.path.join(base, out_dir)

    resolved = {
        "data": {"path": data_path, "missing_marker": marker,
                 "split": [float(f) for f in split]},
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "output": {"dir": out_dir},
    }
    return resolved, model_cfg, train_cfg


# -- subcommands ----------------------------------------------------------------


def _cmd_train(args) -> int:
    resolved, model_cfg, train_cfg = _resolve_run_config(args.config)
    variant = _ABLATE_FLAG.get(args.ablate, "full")
    data_block = resolved["data"]
    out_dir = resolved["output"]["dir"]

    dataset = _load_series(data_block["path"], data_block["missing_marker"])
    train, val, test = chronological_split(dataset, tuple(data_block["split"]))
    stats = compute_norm_stats(train)
    train_windows = make_windows(normalize(train, stats), model_cfg.input_length,
                                 model_cfg.horizon, model_cfg.target_channel,
                                 target_source=train)
    val_windows = make_windows(normalize(val, stats), model_cfg.input_length,
                               model_cfg.horizon, model_cfg.target_channel,
                               target_source=val)
    test_windows = make_windows(normalize(test, stats), model_cfg.input_length,
                                model_cfg.horizon, model_cfg.target_channel,
                                target_source=test)

    os.makedirs(out_dir, exist_ok=True)
    _dump_json(resolved, os.path.join(out_dir, "resolved_config.json"))

    net = build_ablation(variant, model_cfg, dataset.n_channels)
    net.set_static_features(extract_static_features(normalize(train, stats)))

    def progress(epoch, train_loss, val_mae, seconds):
        print(f"epoch={epoch} train_loss={train_loss:.17g} "
              f"val_mae={val_mae:.17g} seconds={seconds:.3f}",
              file=sys.stderr, flush=True)

    history = fit(net, train_windows, val_windows, train_cfg, stats,
                  on_epoch=progress)
    report = evaluate(net, test_windows, stats,
                      batch_size=train_cfg.batch_size,
                      missing_marker=data_block["missing_marker"])

    save_checkpoint(os.path.join(out_dir, "checkpoint.json"), net,
                    state={"norm_stats": stats.to_dict(),
                           "history": history.to_dict(),
                           "missing_marker": data_block["missing_marker"],
                           "variant": variant})
    _dump_json(report.to_dict(), os.path.join(out_dir, "metrics.json"))
    atomic_write_text(os.path.join(out_dir, "metrics.txt"),
                      report.render_table() + "\n")
    print(report.render_table())
    print(f"artifacts in {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    net, stats, marker = _checkpoint_bundle(args.checkpoint)
    dataset = _load_series(args.data, marker)
    windows = _windows_for(net, dataset, stats)
    report = evaluate(net, windows, stats, missing_marker=marker)
    print(report.render_table())
    if args.out:
        _dump_json(report.to_dict(), args.out)
    return 0


def _cmd_predict(args) -> int:
    net, stats, marker = _checkpoint_bundle(args.checkpoint)
    dataset = _load_series(args.data, marker)
    windows = _windows_for(net, dataset, stats)
    preds = predict_windows(net, windows, stats)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["window_start", "node_id", "step", "forecast"])
    for w, window in enumerate(windows):
        for i, node in enumerate(dataset.node_ids):
            for step in range(preds.shape[-1]):
                writer.writerow([window.start, node, step + 1,
                                 repr(float(preds[w, i, step]))])
    atomic_write_text(args.out, buf.getvalue())
    print(f"wrote {len(windows)} windows x {dataset.n_nodes} nodes to {args.out}")
    return 0


def _cmd_synth(args) -> int:
    raw = _read_json(args.spec, "--spec")
    try:
        spec = SynthSpec.from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"--spec {args.spec}: {exc}") from None
    result = synth_generate(spec)
    os.makedirs(args.out, exist_ok=True)
    write_csv(result.dataset, os.path.join(args.out, "data.csv"))
    for k, regime in enumerate(spec.regimes):
        write_adjacency_csv(regime.adjacency, result.dataset.node_ids,
                            os.path.join(args.out, f"regime_{k}_adjacency.csv"))
    _dump_json(spec.to_dict(), os.path.join(args.out, "spec.json"))
    print(f"wrote {spec.length} steps over {spec.nodes} nodes "
          f"({len(spec.regimes)} regimes) to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed)
    for name, gap in results.items():
        print(f"op={name} max_rel_err={gap:.3e}")
    worst = max(results.values())
    ok = worst < GRADCHECK_TOLERANCE
    print(f"worst={worst:.3e} tolerance={GRADCHECK_TOLERANCE:.0e} "
          f"{'ok' if ok else 'FAIL'}")
    return 0 if ok else 3


def _parse_nodes(raw: str) -> list[int]:
    try:
        indices = [int(part) for part in raw.split(",") if part.strip() != ""]
    except ValueError:
        raise UsageError(f"--nodes must be comma-separated integers, got {raw!r}") \
            from None
    if not indices:
        raise UsageError("--nodes needs at least one index")
    if len(set(indices)) != len(indices):
        raise UsageError(f"--nodes has duplicate indices: {raw!r}")
    return indices


def _cmd_export(args) -> int:
    net, stats, marker = _checkpoint_bundle(args.checkpoint)
    dataset = _load_series(args.data, marker)
    indices = _parse_nodes(args.nodes)
    for i in indices:
        if not 0 <= i < dataset.n_nodes:
            raise DataError(f"--nodes index {i} out of range for "
                            f"{dataset.n_nodes} nodes")
    windows = _windows_for(net, dataset, stats)
    if not 0 <= args.window < len(windows):
        raise DataError(f"--window {args.window} out of range; {args.data} "
                        f"yields {len(windows)} windows")

    with ad.no_grad():
        _, adjacencies = net.forward(Tensor(windows[args.window].x),
                                     return_adjacency=True)
    final = adjacencies[-1]
    os.makedirs(args.out, exist_ok=True)
    names = [dataset.node_ids[i] for i in indices]
    for m, adj in enumerate(final, start=1):
        sub = adj.data[np.ix_(indices, indices)]
        write_adjacency_csv(sub, names,
                            os.path.join(args.out, f"A_period_{m}.csv"))
    _dump_json({"checkpoint": os.path.abspath(args.checkpoint),
                "data": os.path.abspath(args.data),
                "nodes": indices, "window": args.window,
                "periods": len(final)},
               os.path.join(args.out, "export.json"))
    print(f"wrote {len(final)} period matrices to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
