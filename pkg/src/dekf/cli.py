"""Command-line front end.

::

    dekf validate-config --config mf
    dekf estimate --config regression --static --out runs/reg
    dekf bandit --config mf --policy thompson --policy greedy --out runs/mf
    dekf update-stream --config my.toml --input obs.csv --out runs/stream
    dekf snapshot-export --input runs/stream/state.npz --out snapshot.txt
    dekf snapshot-import --input snapshot.txt --out state.npz

``--config`` takes a TOML file, a JSON run manifest written by an earlier
run, or the name of a shipped configuration (``regression``, ``mf``,
``tf``). Exit status is 0 on success, 2 for configuration errors, 3 for
unreadable or malformed input files and 4 for numerical failures.
"""

import argparse
import csv
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, config, sim, snapshot
from .errors import ConfigError, DEKFError, IoError, NumericalError
from .filter import EntityStore, update
from .signal import EntityId

log = logging.getLogger("dekf")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3, 4
STREAM_COLUMNS = ("t", "entities", "context", "y")


def _resolve_config(spec):
    path = Path(spec)
    if not path.exists() and (config.CONFIG_DIR / f"{spec}.toml").exists():
        path = config.CONFIG_DIR / f"{spec}.toml"
    if not path.exists():
        raise IoError(f"config file {spec!r} not found")
    return config.load(path)


def _experiment_config(args):
    cfg = _resolve_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "static", False):
        changes["dynamic"] = False
    if getattr(args, "no_reference_vectors", False):
        changes["reference_vectors"] = False
    if getattr(args, "n_sims", None) is not None:
        changes["n_sims"] = args.n_sims
    if getattr(args, "horizon", None) is not None:
        changes["horizon"] = args.horizon
    return cfg.replace(**changes) if changes else cfg


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(command, cfg, args, outputs, **extra):
    doc = {
        "command": command,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "replica_seeds": [[cfg.seed, r] for r in range(cfg.n_sims)],
        "jobs": getattr(args, "jobs", 1),
        "outputs": outputs,
    }
    doc.update(extra)
    return doc


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _summary(series):
    return {k: {"final": s.final_mean(), "final_stderr": s.final_stderr()} for k, s in series.items()}


def cmd_validate(args):
    cfg = _resolve_config(args.config)
    n = sum(ns.count for ns in cfg.namespaces)
    print(f"ok: {cfg.name} ({cfg.model}, {cfg.family}/{cfg.link}, {n} entities, horizon {cfg.horizon})")
    return EXIT_OK


def cmd_estimate(args):
    cfg = _experiment_config(args)
    out = _out_dir(args)
    if args.method:
        cfg = cfg.replace(methods=list(args.method))
    series = sim.run_estimation(cfg, jobs=args.jobs, tune_adagrad=args.tune_adagrad)
    outputs = {}
    for method, s in series.items():
        name = f"{cfg.name}-estimate-{method}.csv"
        sim.write_csv(s, out / name)
        outputs[method] = name
    extra = {"tune_adagrad": args.tune_adagrad}
    if "adagrad" in series:
        extra["adagrad"] = {"lr": series["adagrad"].meta["lr"],
                            "grid": {repr(k): v for k, v in series["adagrad"].meta.get("grid", {}).items()}}
    _write_json(out / "manifest.json", _manifest("estimate", cfg, args, outputs, summary=_summary(series), **extra))
    for method, s in series.items():
        print(f"{method}: final cumulative average error {s.final_mean():.6f} (+/- {s.final_stderr():.6f})")
    return EXIT_OK


def cmd_bandit(args):
    cfg = _experiment_config(args)
    out = _out_dir(args)
    if args.policy:
        cfg = cfg.replace(policies=list(args.policy))
    series = sim.run_bandit(cfg, jobs=args.jobs)
    outputs = {}
    for policy, s in series.items():
        name = f"{cfg.name}-bandit-{policy}.csv"
        sim.write_csv(s, out / name)
        outputs[policy] = name
    _write_json(out / "manifest.json", _manifest(
        "bandit", cfg, args, outputs, summary=_summary(series),
        candidate_rule=sim.CANDIDATE_RULES[cfg.model],
    ))
    for policy, s in series.items():
        print(f"{policy}: final normalized regret {s.final_mean():.6f} (+/- {s.final_stderr():.6f})")
    return EXIT_OK


def _parse_floats(text):
    text = text.strip()
    return [float(v) for v in text.split(";")] if text else []


def _parse_ids(text):
    out = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        ns, sep, idx = part.rpartition(":")
        if not sep or not ns:
            raise ValueError(f"entity {part!r} is not of the form namespace:index")
        out.append(EntityId(ns, int(idx)))
    return out


def stream_context(cfg, signal, ids, values):
    """Signal context for one row of an observation stream."""
    if cfg.model == "glm":
        if ids and ids != [signal.partition[0][0]]:
            raise ValueError(f"a GLM row involves only {signal.partition[0][0]}, got {ids}")
        return np.array(values)
    if cfg.model in ("mf", "tf"):
        if values:
            raise ValueError("factorization rows carry no context values")
        return tuple(ids)
    if not values:
        values = [1.0] * len(ids)
    if len(values) != len(ids):
        raise ValueError(f"{len(ids)} entities but {len(values)} context values")
    return list(zip(ids, values))


def read_stream(path, cfg, signal):
    """Yield ``(line, t, ctx, y)`` for every row of an observation CSV."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot open observation file: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != STREAM_COLUMNS:
            raise IoError(f"{path}:1: expected header {','.join(STREAM_COLUMNS)}, got {header}")
        for row in reader:
            line = reader.line_num
            if not row or not "".join(row).strip():
                continue
            try:
                if len(row) != len(STREAM_COLUMNS):
                    raise ValueError(f"expected {len(STREAM_COLUMNS)} fields, got {len(row)}")
                t = int(row[0])
                ctx = stream_context(cfg, signal, _parse_ids(row[1]), _parse_floats(row[2]))
                y = _parse_floats(row[3])
            except ValueError as exc:
                raise IoError(f"{path}:{line}: {exc}") from None
            yield line, t, ctx, y


def cmd_update_stream(args):
    cfg = _experiment_config(args)
    out = _out_dir(args)
    family, link, signal = sim.make_family(cfg), cfg.link, sim.make_signal(cfg)
    store = EntityStore(sim.stream_dynamics(cfg))
    preds = []
    for line, t, ctx, y in read_stream(args.input, cfg, signal):
        try:
            rep = update(store, family, link, signal, y, ctx, t, mode=cfg.update)
        except NumericalError:
            raise
        except DEKFError as exc:
            raise IoError(f"{args.input}:{line}: {exc}") from None
        preds.append((t, rep.predicted_mean, y))
    snapshot.write_text(out / "snapshot.txt", store.entities)
    snapshot.save_state(out / "state.npz", store.entities)
    with open(out / "predictions.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,prediction,y\n")
        for t, h, y in preds:
            fh.write(f"{t},{';'.join(repr(float(v)) for v in h)},{';'.join(repr(float(v)) for v in y)}\n")
    _write_json(out / "manifest.json", _manifest(
        "update-stream", cfg, args,
        {"snapshot": "snapshot.txt", "state": "state.npz", "predictions": "predictions.csv"},
        input=str(args.input), observations=len(preds), entities=len(store),
    ))
    print(f"{len(preds)} observations, {len(store)} entities -> {out}")
    return EXIT_OK


def cmd_snapshot_export(args):
    snapshot.write_text(args.out, snapshot.load_state(args.input))
    return EXIT_OK


def cmd_snapshot_import(args):
    snapshot.save_state(args.out, snapshot.read_text(args.input))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="dekf", description="Decoupled EKF experiments and filtering.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config_required=True):
        p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
        if config_required:
            p.add_argument("--config", required=True, help="TOML file, run manifest or shipped config name")
        return p

    def experiment(p):
        common(p)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override experiment.seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel replicas (default 1)")
        p.add_argument("--static", action="store_true", help="freeze the parameters (dynamic = false)")
        p.add_argument("--no-reference-vectors", action="store_true", help="decay toward zero instead")
        p.add_argument("--n-sims", type=int, help="override experiment.n_sims")
        p.add_argument("--horizon", type=int, help="override experiment.horizon")
        return p

    common(sub.add_parser("validate-config", help="parse and check a configuration"))
    p = experiment(sub.add_parser("estimate", help="prediction error of each method"))
    p.add_argument("--method", action="append", choices=config.METHODS, help="repeatable; default from config")
    p.add_argument("--tune-adagrad", action="store_true", help="report AdaGrad at the best rate of adagrad.lr_grid")
    p = experiment(sub.add_parser("bandit", help="normalized regret of each policy"))
    p.add_argument("--policy", action="append", choices=config.POLICIES, help="repeatable; default from config")
    p = common(sub.add_parser("update-stream", help="filter an observation CSV and export the posteriors"))
    p.add_argument("--input", required=True, help="observation CSV (t,entities,context,y)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.add_argument("--static", action="store_true", help="treat every entity as static")
    p.add_argument("--no-reference-vectors", action="store_true", help="decay toward zero instead")
    p = common(sub.add_parser("snapshot-export", help="binary state (.npz) to text snapshot"), False)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p = common(sub.add_parser("snapshot-import", help="text snapshot to binary state (.npz)"), False)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {
    "validate-config": cmd_validate,
    "estimate": cmd_estimate,
    "bandit": cmd_bandit,
    "update-stream": cmd_update_stream,
    "snapshot-export": cmd_snapshot_export,
    "snapshot-import": cmd_snapshot_import,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"dekf: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IoError, OSError) as exc:
        print(f"dekf: input/output error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"dekf: numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DEKFError as exc:
        print(f"dekf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
