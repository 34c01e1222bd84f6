"""Command-line pipeline: synth, train, attack, traceback, eval.

Every subcommand reads an optional JSON config (``--config``) whose section
named after the subcommand supplies defaults; explicit flags override it.
Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from poisontrace import attacks, baselines, core, evalkit, influence, trainer
from poisontrace._io import atomic_directory, atomic_write_text
from poisontrace.mpcsim import (FixedPointOverflow, MpcParams, load_cost_table,
                                protocol_traceback, protocol_traceback_heuristic, suggest_scales)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
WORKERS_ENV = "POISONTRACE_WORKERS"
METHODS = ("grad", "grad-heuristic", "unlearn", "mpc", "mpc-heuristic")


class ConfigError(Exception):
    pass


def _settings(args, section: str, defaults: dict) -> dict:
    """Defaults, overridden by the config section, overridden by given flags."""
    out = dict(defaults)
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        sec = cfg.get(section, {})
        unknown = set(sec) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown {section} settings: {sorted(unknown)}")
        out.update(sec)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _require(settings: dict, *keys) -> None:
    missing = [k for k in keys if settings.get(k) is None]
    if missing:
        raise ConfigError(f"missing required settings: {', '.join(missing)}")


def _existing(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- synth ----------------------------------------------------------------

SYNTH_DEFAULTS = {"out": None, "n": 4000, "n_test": 1000, "dim": 20, "classes": 4,
                  "separation": 6.0, "spread": 1.0, "clusters_per_class": 1,
                  "cluster_radius": 0.0, "owners": 10, "alpha": 100.0, "seed": 0}


def cmd_synth(args) -> int:
    s = _settings(args, "synth", SYNTH_DEFAULTS)
    _require(s, "out")
    if s["classes"] < 2:
        raise ConfigError("need at least two classes")
    if s["n"] < s["owners"] or s["n_test"] < 1 or s["owners"] < 1:
        raise ConfigError("sizes must be positive and n >= owners")
    if s["alpha"] <= 0:
        raise ConfigError("alpha must be positive")
    data = core.make_blobs(s["n"] + s["n_test"], s["dim"], s["classes"], s["separation"],
                           s["spread"], s["clusters_per_class"], s["cluster_radius"], s["seed"])
    train, test = core.split_dataset(data, s["n"], seed=s["seed"] + 1)
    part = core.partition_dirichlet(train, s["owners"], s["alpha"], s["seed"] + 2)
    with atomic_directory(s["out"]) as tmp:
        core.save_dataset(train, tmp / "train.bin")
        core.save_dataset(test, tmp / "test.bin")
        core.save_partition(part, tmp / "partition.json")
        # The output location is left out so reruns elsewhere are byte-identical.
        atomic_write_text(tmp / "synth.json", _dump({k: v for k, v in s.items() if k != "out"}))
    return 0


# -- train ----------------------------------------------------------------

TRAIN_KEYS = {f.name for f in fields(trainer.TrainConfig)}
TRAIN_DEFAULTS = {"data": None, "out": None, **trainer.TrainConfig().to_dict()}


def cmd_train(args) -> int:
    s = _settings(args, "train", TRAIN_DEFAULTS)
    _require(s, "data", "out")
    data = core.load_dataset(_existing(s["data"], "dataset"))
    try:
        cfg = trainer.TrainConfig.from_dict({k: v for k, v in s.items() if k in TRAIN_KEYS})
        cfg.checkpoint_set(len(data))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    _, record = trainer.train_with_checkpoints(data, cfg)
    trainer.save_record(record, s["out"])
    return 0


# -- attack ---------------------------------------------------------------

ATTACK_DEFAULTS = {"data": None, "heldout": None, "partition": None, "out": None,
                   "kind": "trigger", "poison_count": None, "poison_rate": 0.05,
                   "source": None, "target": None, "sigma": None, "trigger_size": 3,
                   "noise_rate": 0.0, "population_size": 32, "pool_size": 32,
                   "selection": "random", "event_count": 100, "n_malicious": 1, "seed": 0}


def _attack_spec(s: dict, data: core.LabeledDataset) -> attacks.AttackSpec:
    rng = np.random.default_rng([s["seed"], 0])
    count = s["poison_count"]
    if count is None:
        count = int(round(s["poison_rate"] * len(data)))
    kind = s["kind"]
    base = kind.removeprefix("noisy-")
    source, target, sigma = s["source"], s["target"], s["sigma"]
    trig_idx, trig_val = (), ()
    if base in ("trigger", "permutation-trigger"):
        trig_idx, trig_val = attacks.make_trigger(data, s["trigger_size"], s["seed"])
    if base in ("trigger", "labelflip") and (source is None or target is None):
        source, target = attacks.random_pair(data.num_classes, rng)
    if base == "permutation-trigger" and sigma is None:
        sigma = attacks.sample_derangement(data.num_classes, [s["seed"], 1])
    return attacks.AttackSpec(
        kind=kind, poison_count=count, source=source, target=target,
        sigma=None if sigma is None else tuple(sigma), trigger_indices=trig_idx,
        trigger_values=trig_val, noise_rate=s["noise_rate"],
        population_size=s["population_size"], pool_size=s["pool_size"],
        selection=s["selection"], event_count=s["event_count"], seed=s["seed"])


def cmd_attack(args) -> int:
    s = _settings(args, "attack", ATTACK_DEFAULTS)
    _require(s, "data", "heldout", "partition", "out")
    if s["kind"] not in attacks.KINDS:
        raise ConfigError(f"unknown attack kind {s['kind']!r}")
    if not 1 <= s["n_malicious"] <= 4:
        raise ConfigError("n_malicious must lie in [1, 4]")
    data = core.load_dataset(_existing(s["data"], "dataset"))
    heldout = core.load_dataset(_existing(s["heldout"], "held-out dataset"))
    part = core.load_partition(_existing(s["partition"], "partition"))
    try:
        spec = _attack_spec(s, data)
        outcome = attacks.run_attack(data, spec, heldout)
        if len(outcome.dataset) != part.dataset_size:
            # Appended poisons start with owner 0 and are then redistributed.
            extra = np.arange(part.dataset_size, len(outcome.dataset))
            sets = list(part.index_sets)
            sets[0] = np.concatenate([sets[0], extra])
            part = core.OwnerPartition(tuple(sets), len(outcome.dataset))
        poisoned = attacks.distribute_poisons(outcome, part, s["n_malicious"], s["seed"] + 7)
    except (attacks.AttackError, core.PartitionError) as exc:
        raise ConfigError(str(exc)) from exc
    with atomic_directory(s["out"]) as tmp:
        outcome.save(tmp)
        core.save_partition(poisoned, tmp / "partition.json")
    return 0


# -- traceback ------------------------------------------------------------

TRACEBACK_DEFAULTS = {"record": None, "partition": None, "events": None, "event_index": 0,
                      "data": None, "method": "grad", "k": 32, "l": 512, "out": None,
                      "csv": None, "unlearn_lr": 1e-2, "unlearn_epochs": 5,
                      "mpc_K": 64, "mpc_f": 16, "parties": 3, "cost_table": None,
                      "mpc_seed": 0, "transcript": None, "attack": None}


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def cmd_traceback(args) -> int:
    s = _settings(args, "traceback", TRACEBACK_DEFAULTS)
    _require(s, "record", "partition", "events", "out")
    if s["method"] not in METHODS:
        raise ConfigError(f"unknown method {s['method']!r}; choose from {', '.join(METHODS)}")
    if s["k"] < 1 or s["l"] < s["k"]:
        raise ConfigError("need 1 <= k <= l")
    if s["method"] == "unlearn":
        _require(s, "data")
    record = trainer.load_record(_existing(s["record"], "record"))
    part = core.load_partition(_existing(s["partition"], "partition"))
    events = core.load_events(_existing(s["events"], "events"))
    if not 0 <= s["event_index"] < len(events):
        raise ConfigError("event index out of range")
    event = events[s["event_index"]]
    method, k, l = s["method"], s["k"], s["l"]
    transcript = None
    try:
        if method == "grad":
            report = influence.traceback(record, part, event, k)
        elif method == "grad-heuristic":
            report = influence.traceback_heuristic(record, part, event, k, l)
        elif method == "unlearn":
            data = core.load_dataset(_existing(s["data"], "dataset"))
            cfg = baselines.UnlearnConfig(lr=s["unlearn_lr"], epochs=s["unlearn_epochs"])
            report = baselines.unlearning_scores(record.final_params, part, data, event, cfg,
                                                 workers=_workers())
        else:
            table = load_cost_table(_existing(s["cost_table"], "cost table")) \
                if s["cost_table"] else None
            gs, es = suggest_scales(record, event, s["mpc_f"])
            params = MpcParams(K=s["mpc_K"], f=s["mpc_f"], parties=s["parties"],
                               seed=s["mpc_seed"], grad_scale=gs, event_scale=es,
                               cost_table=table)
            if method == "mpc":
                result = protocol_traceback(record, part, event, k, params)
            else:
                result = protocol_traceback_heuristic(record, part, event, k, l, params)
            report = result.report
            transcript = result.transcript.to_text(**params.describe(), k=k, l=l,
                                                   checkpoints=len(record.checkpoints))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report.params.update(event_index=s["event_index"],
                         malicious=[bool(f) for f in part.malicious_flags])
    if s["attack"]:
        report.params["attack"] = s["attack"]
    report.save(s["out"], s["csv"])
    if s["transcript"] and transcript is not None:
        atomic_write_text(s["transcript"], transcript)
    return 0


# -- eval -----------------------------------------------------------------

EVAL_DEFAULTS = {"reports": None, "calibration": None, "fpr": evalkit.DEFAULT_FPR,
                 "standardized": False, "out": None, "roc": None}


def _trial(path) -> evalkit.TrialResult:
    rep = influence.load_report(_existing(path, "report"))
    flags = rep.params.get("malicious")
    if flags is None:
        raise ConfigError(f"report {path} lacks ground-truth flags")
    return evalkit.TrialResult(rep.scores, np.asarray(flags, dtype=bool),
                               str(rep.params.get("attack", rep.params.get("method", ""))))


def cmd_eval(args) -> int:
    s = _settings(args, "eval", EVAL_DEFAULTS)
    if not s["reports"]:
        raise ConfigError("no reports given")
    if not 0 < s["fpr"] < 1:
        raise ConfigError("fpr must lie in (0, 1)")
    trials = [_trial(p) for p in s["reports"]]
    if not any(t.malicious.any() for t in trials):
        raise ConfigError("no report has a malicious owner")
    cal = None
    if s["calibration"]:
        cal = [_trial(p) for p in s["calibration"]]
    try:
        report = evalkit.evaluate([t for t in trials if t.malicious.any()], cal, s["fpr"],
                                  bool(s["standardized"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    sys.stdout.write(report.to_text())
    if s["out"]:
        report.save(s["out"], s["roc"])
    return 0


# -- parser ---------------------------------------------------------------

def _flag(p, name: str, type_=str, **kw) -> None:
    p.add_argument("--" + name.replace("_", "-"), dest=name, type=type_, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poisontrace", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a blob dataset and an owner partition")
    _flag(p, "config")
    for name in ("out",):
        _flag(p, name)
    for name in ("n", "n_test", "dim", "classes", "clusters_per_class", "owners", "seed"):
        _flag(p, name, int)
    for name in ("separation", "spread", "cluster_radius", "alpha"):
        _flag(p, name, float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train with checkpointed gradient sketches")
    _flag(p, "config")
    _flag(p, "data")
    _flag(p, "out")
    for name in ("epochs", "batch_size", "hidden", "num_checkpoints", "projection_dim",
                 "gradient_layers", "seed"):
        _flag(p, name, int)
    for name in ("lr", "weight_decay", "momentum", "init_scale", "lr_drop_factor"):
        _flag(p, name, float)
    p.add_argument("--lr-drops", dest="lr_drops", type=int, nargs="*", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="poison the training set and place poisons with owners")
    _flag(p, "config")
    for name in ("data", "heldout", "partition", "out", "kind", "selection"):
        _flag(p, name)
    for name in ("poison_count", "source", "target", "trigger_size", "population_size",
                 "pool_size", "event_count", "n_malicious", "seed"):
        _flag(p, name, int)
    for name in ("poison_rate", "noise_rate"):
        _flag(p, name, float)
    p.add_argument("--sigma", dest="sigma", type=int, nargs="+", default=None)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("traceback", help="score owners for one misclassification event")
    _flag(p, "config")
    for name in ("record", "partition", "events", "data", "method", "out", "csv",
                 "cost_table", "transcript", "attack"):
        _flag(p, name)
    for name in ("event_index", "k", "l", "unlearn_epochs", "mpc_K", "mpc_f", "parties",
                 "mpc_seed"):
        _flag(p, name, int)
    _flag(p, "unlearn_lr", float)
    p.set_defaults(func=cmd_traceback)

    p = sub.add_parser("eval", help="ranking and detection metrics over reports")
    _flag(p, "config")
    p.add_argument("--reports", dest="reports", nargs="+", default=None)
    p.add_argument("--calibration", dest="calibration", nargs="+", default=None)
    _flag(p, "fpr", float)
    p.add_argument("--standardized", dest="standardized", action="store_true", default=None)
    _flag(p, "out")
    _flag(p, "roc")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"poisontrace {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (trainer.DivergenceError, FixedPointOverflow) as exc:
        print(f"poisontrace {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
