"""Command-line front end: ``ingest``, ``train``, ``attack``, ``report``.

Exit codes: 0 success, 2 input error, 3 training divergence, 4 checkpoint
incompatible with the data, 5 unreadable report.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from typing import Any, Sequence

import yaml

from . import __version__
from .attack import AttackConfig
from .ddne import CheckpointError, DdneHyper, DdneModel, DivergenceError, load_checkpoint, save_checkpoint, train
from .dynnet import DynamicNetwork, EmptyNetworkError, ParseError, SnapshotSpec, SpecError, dump_snapshots, ingest_edge_list
from .evalharness import (
    METHODS, AttackReport, NoTargetsError, SyntheticSpec, TargetSelection, dumps_reports, flips_csv, gain,
    generate_synthetic, loads_reports, run_experiment, runtime_csv, stream, summary_csv,
)

log = logging.getLogger("tgattack")

EXIT_INPUT, EXIT_DIVERGED, EXIT_INCOMPATIBLE, EXIT_REPORT = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "dataset": {"path": None, "name": None, "symmetrize": False},
    "snapshots": {"observe_start": None, "observe_end": None, "num_snapshots": None,
                  "focus_window_end": None},
    "synthetic": {f.name: f.default for f in fields(SyntheticSpec) if f.name != "rng_seed"},
    "model": {f.name: f.default for f in fields(DdneHyper) if f.name != "rng_seed"},
    "attack": {**{f.name: f.default for f in fields(AttackConfig) if f.name != "rng_seed"},
               "methods": ["tga-gre"], "horizons": [0], "checkpoint": None},
    "targets": {"strategy": ["probability"], "top_k": 100},
    "output": {"dir": "out", "checkpoint": None, "record_timing": True},
}


@dataclass
class RunConfig:
    seed: int
    dataset: dict
    snapshots: dict
    synthetic: dict
    model: dict
    attack: dict
    targets: dict
    output: dict

    def hyper(self) -> DdneHyper:
        return DdneHyper.from_dict({**self.model, "rng_seed": self.seed})

    def attack_config(self) -> AttackConfig:
        skip = {"methods", "horizons", "checkpoint"}
        return AttackConfig(**{k: v for k, v in self.attack.items() if k not in skip},
                            rng_seed=self.seed)

    def selections(self) -> list[TargetSelection]:
        strategies = self.targets["strategy"]
        if isinstance(strategies, str):
            strategies = [strategies]
        return [TargetSelection(s, int(self.targets["top_k"])) for s in strategies]

    @property
    def out(self) -> str:
        return self.output["dir"]

    @property
    def checkpoint_path(self) -> str:
        return self.output["checkpoint"] or os.path.join(self.out, "model.ckpt")

    @property
    def dataset_name(self) -> str:
        if self.dataset.get("name"):
            return self.dataset["name"]
        if self.dataset.get("path"):
            return os.path.splitext(os.path.basename(self.dataset["path"]))[0]
        return f"synthetic-{self.synthetic['generator']}"


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise CliError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CliError(f"config key {where!r} must be a section")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _set_dotted(tree: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise CliError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise CliError(f"--set {key}: {p!r} is not a section")
    node[parts[-1]] = yaml.safe_load(raw) if raw.strip() else None


def load_config(path: str | None, sets: Sequence[str] = (), out: str | None = None,
                seed: int | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise CliError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise CliError(f"{path}: top level must be a mapping")
    for s in sets:
        _set_dotted(raw, s)
    if out is not None:
        raw.setdefault("output", {})["dir"] = out
    if seed is not None:
        raw["seed"] = seed
    cfg = RunConfig(**_merge(DEFAULTS, raw))
    for m in cfg.attack["methods"]:
        if m not in METHODS:
            raise CliError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")
    try:
        cfg.hyper(), cfg.attack_config(), cfg.selections()
    except (SpecError, ValueError, TypeError) as exc:
        raise CliError(f"invalid configuration: {exc}") from None
    return cfg


def load_network(cfg: RunConfig) -> DynamicNetwork:
    path = cfg.dataset.get("path")
    try:
        if path is None:
            spec = SyntheticSpec(**cfg.synthetic, rng_seed=int(stream(cfg.seed, "synthetic").integers(2**31)))
            return generate_synthetic(spec)
        snap = cfg.snapshots
        if any(snap[k] is None for k in snap):
            raise CliError("dataset.path requires every snapshots.* key")
        spec = SnapshotSpec(**{k: int(v) for k, v in snap.items()})
        if not os.path.exists(path):
            raise CliError(f"dataset file not found: {path}")
        with open(path) as fh:
            return ingest_edge_list(fh, spec, symmetrize=bool(cfg.dataset["symmetrize"]), source=path)
    except (ParseError, SpecError, EmptyNetworkError, TypeError) as exc:
        raise CliError(str(exc)) from None


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _window(cfg: RunConfig, network: DynamicNetwork) -> tuple[int, int]:
    """(window_start, target_index) of the horizon-0 model."""
    N = int(cfg.model["history_length"])
    base = network.num_snapshots - 1 - max(cfg.attack["horizons"])
    if base - N < 0:
        raise CliError(f"{network.num_snapshots} snapshots are too few for history_length {N} "
                       f"and horizons {cfg.attack['horizons']}")
    return base - N, base


# -- commands --------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig) -> int:
    network = load_network(cfg)
    dump_snapshots(network, os.path.join(cfg.out, "snapshots"))
    stats = {
        "dataset": cfg.dataset_name,
        "n": network.n,
        "num_snapshots": network.num_snapshots,
        "link_counts": network.link_counts(),
        "density": network.density(),
        "node_labels": list(network.node_labels),
    }
    _write(os.path.join(cfg.out, "stats.json"), json.dumps(stats, indent=1) + "\n")
    print(f"n={network.n} snapshots={network.num_snapshots} links={network.link_counts()}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    network = load_network(cfg)
    ws, t = _window(cfg, network)
    try:
        model = train(network, cfg.hyper(), target_index=t, window_start=ws,
                      rng=stream(cfg.seed, "train", 0))
    except DivergenceError as exc:
        raise CliError(str(exc), EXIT_DIVERGED) from None
    os.makedirs(os.path.dirname(cfg.checkpoint_path) or ".", exist_ok=True)
    with open(cfg.checkpoint_path, "wb") as fh:
        save_checkpoint(model, fh)
    lines = ["epoch,mean_loss"] + [f"{e},{v!r}" for e, v in enumerate(model.loss_history)]
    _write(os.path.join(cfg.out, "loss.csv"), "\n".join(lines) + "\n")
    final = model.loss_history[-1] if model.loss_history else float("nan")
    print(f"trained {len(model.loss_history)} epochs, final loss {final:.6f} -> {cfg.checkpoint_path}")
    return 0


def _load_model(path: str) -> DdneModel:
    try:
        with open(path, "rb") as fh:
            return load_checkpoint(fh)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INCOMPATIBLE) from None


def cmd_attack(cfg: RunConfig, checkpoint: str | None = None) -> int:
    network = load_network(cfg)
    _window(cfg, network)
    hyper = cfg.hyper()
    models = {}
    checkpoint = checkpoint or cfg.attack.get("checkpoint")
    if checkpoint:
        model = _load_model(checkpoint)
        if model.n != network.n or model.history_length != hyper.history_length:
            raise CliError(f"checkpoint expects n={model.n}, N={model.history_length}; data has "
                           f"n={network.n}, config N={hyper.history_length}", EXIT_INCOMPATIBLE)
        models[0] = model
    try:
        reports = run_experiment(network, hyper, cfg.attack_config(), cfg.selections(),
                                 cfg.attack["methods"], cfg.attack["horizons"], seed=cfg.seed,
                                 dataset=cfg.dataset_name, models=models,
                                 timing=bool(cfg.output["record_timing"]), progress=log.info)
    except DivergenceError as exc:
        raise CliError(str(exc), EXIT_DIVERGED) from None
    except (SpecError, NoTargetsError) as exc:
        raise CliError(str(exc)) from None
    _write(os.path.join(cfg.out, "reports.json"), dumps_reports(reports))
    _write(os.path.join(cfg.out, "summary.csv"), summary_csv(reports))
    for r in reports:
        tag = "-addonly" if r.add_only else ""
        _write(os.path.join(cfg.out, "flips", f"{r.method}{tag}_{r.strategy}_h{r.horizon}.csv"), flips_csv(r))
    for r in reports:
        print(f"{r.method:8s} {r.strategy:12s} h={r.horizon} ASR={r.asr:.2f} AML={r.aml:.2f}")
    return 0


def _column(r: AttackReport) -> str:
    return r.method + ("+add" if r.add_only else "")


def render_table(reports: Sequence[AttackReport]) -> str:
    """Method columns by (dataset, strategy, horizon, n_s) rows, ASR block then AML block."""
    columns = []
    for r in reports:
        if _column(r) not in columns:
            columns.append(_column(r))
    row_keys = []
    cell: dict[tuple, AttackReport] = {}
    for r in reports:
        key = (r.dataset, r.strategy, r.horizon, r.history_length, r.budget)
        if key not in row_keys:
            row_keys.append(key)
        cell[key + (_column(r),)] = r
    gains = []
    for c in columns:
        if c.endswith("+add") and c[:-4] in columns:
            gains.append(c[:-4])
    header = ["dataset", "strategy", "h", "n_s", "gamma"]
    header += [f"ASR {c}" for c in columns] + [f"GAIN_ASR {g}" for g in gains]
    header += [f"AML {c}" for c in columns] + [f"GAIN_AML {g}" for g in gains]
    body = []
    for key in row_keys:
        line = [key[0], key[1], str(key[2]), str(key[3]), str(key[4])]
        get = lambda c: cell.get(key + (c,))  # noqa: E731
        line += [f"{get(c).asr:.2f}" if get(c) else "-" for c in columns]
        pairs = []
        for g in gains:
            a, b = get(g + "+add"), get(g)
            pairs.append(gain(a, b) if a and b and a.targets == b.targets else None)
        line += [f"{p[0]:+.2f}" if p else "-" for p in pairs]
        line += [f"{get(c).aml:.2f}" if get(c) else "-" for c in columns]
        line += [f"{p[1]:+.2f}" if p else "-" for p in pairs]
        body.append(line)
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    fmt = lambda row: "  ".join(s.rjust(w) for s, w in zip(row, widths))  # noqa: E731
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule] + [fmt(b) for b in body]) + "\n"


def cmd_report(paths: Sequence[str], out: str) -> int:
    reports: list[AttackReport] = []
    for p in paths:
        try:
            with open(p) as fh:
                reports += loads_reports(fh.read())
        except FileNotFoundError:
            raise CliError(f"report not found: {p}") from None
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(f"{p}: malformed report: {exc}", EXIT_REPORT) from None
    if not reports:
        raise CliError("no reports given", EXIT_REPORT)
    try:
        table = render_table(reports)
    except ValueError as exc:
        raise CliError(f"cannot tabulate reports: {exc}", EXIT_REPORT) from None
    print(table, end="")
    _write(os.path.join(out, "table.txt"), table)
    _write(os.path.join(out, "summary.csv"), summary_csv(reports))
    if len({r.budget for r in reports}) > 1:
        _write(os.path.join(out, "runtime.csv"), runtime_csv(reports))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tgattack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, metavar="PATH")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key by dotted path (repeatable)")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--seed", type=int)

    common(sub.add_parser("ingest", help="slice a dataset into snapshots"))
    common(sub.add_parser("train", help="train DDNE and write a checkpoint"))
    p = sub.add_parser("attack", help="select targets and attack them")
    common(p)
    p.add_argument("--checkpoint", metavar="PATH", help="reuse a trained horizon-0 model")
    p = sub.add_parser("report", help="tabulate report files")
    common(p, config_required=False)
    p.add_argument("reports", nargs="+", metavar="REPORT_JSON")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            out = args.out
            if out is None:
                out = load_config(args.config, args.set, None, args.seed).out if args.config else "."
            return cmd_report(args.reports, out)
        cfg = load_config(args.config, args.set, args.out, args.seed)
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_attack(cfg, args.checkpoint)
    except CliError as exc:
        print(f"tgattack: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
