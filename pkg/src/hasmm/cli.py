"""Command-line entry point.

Exit codes:
  0  success
  1  unexpected internal error
  2  usage error (unknown flag, bad option value)
  3  missing or malformed input file
  4  parameter fingerprint does not match the transition table
  5  numerical failure (no convergence, vanishing message mass, sampler stall)

Errors are reported on stderr as one JSON object
``{"error": <kind>, "message": <text>, "exit_code": <n>}``.
The log level is taken from the HASMM_LOG environment variable.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .eval import ScoredEpisode, operating_point, roc_curve
from .filter import FilterError, stream_filter
from .generate import RunawayEpisode, generate_dataset, read_episodes, write_episodes
from .learn.em import EmConfig, ffbs_mcem
from .learn.sampling import SamplerError
from .model import ParameterSet
from .volterra import (
    ConvergenceError,
    FingerprintMismatch,
    PlateauError,
    TableError,
    build_table,
    default_grid,
    load_table,
    save_table,
)

log = logging.getLogger("hasmm")

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_INPUT, EXIT_FINGERPRINT, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- provenance -------------------------------------------------------------------

def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


_INPUT_ARGS = ("params", "table", "episodes", "config", "init", "scores")
_OUTPUT_ARGS = ("out", "trace", "summary", "threads")


def provenance(args) -> dict:
    cfg = {}
    for k, v in sorted(vars(args).items()):
        if k in _OUTPUT_ARGS or k == "func" or v is None:
            continue
        if k in _INPUT_ARGS and os.path.exists(v):
            cfg[k] = _file_digest(v)
        else:
            cfg[k] = v
    blob = json.dumps(cfg, sort_keys=True, default=str)
    head = {
        "tool": "hasmm",
        "version": __version__,
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
    }
    if not args.deterministic:
        head["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    return head


def _write_sidecar(path, head) -> None:
    Path(f"{path}.provenance.json").write_text(json.dumps(head, indent=2, sort_keys=True) + "\n")


# -- input helpers ------------------------------------------------------------------

def _load_params(path) -> ParameterSet:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read parameters {path}: {exc.strerror}") from exc
    try:
        return ParameterSet.from_json(text)
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: malformed parameter set ({exc})") from exc


def _load_episodes(path, n_streams=None):
    try:
        return read_episodes(path, n_streams)
    except OSError as exc:
        raise InputError(f"cannot read episodes {path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _grid_from_args(params, args):
    grid = default_grid(params, dt=args.grid_dt)
    if args.grid_a or args.grid_b or args.grid_c:
        from dataclasses import replace

        grid = replace(
            grid,
            A=args.grid_a or grid.A,
            B=args.grid_b or grid.B,
            C=args.grid_c or grid.C,
        )
    return grid


def _table_for(params, args):
    """Load ``--table`` or build one, caching it beside the params file."""
    if args.table:
        try:
            return load_table(args.table, params)
        except FingerprintMismatch:
            raise
        except TableError as exc:
            raise InputError(str(exc)) from exc
    cache = Path(f"{args.params}.table")
    if cache.exists():
        try:
            table = load_table(cache, params)
            log.info("using cached table %s", cache)
            return table
        except TableError as exc:
            log.warning("ignoring stale table cache %s: %s", cache, exc)
    table = build_table(params, _grid_from_args(params, args), eps=args.epsilon)
    save_table(table, cache)
    log.info("built and cached table %s", cache)
    return table


def _parse_sweep(spec):
    try:
        lo, hi, steps = spec.split(":")
        lo, hi, steps = float(lo), float(hi), int(steps)
    except ValueError as exc:
        raise UsageError(f"--threshold-sweep expects lo:hi:steps, got {spec!r}") from exc
    if steps < 2 or not hi > lo:
        raise UsageError("--threshold-sweep needs hi > lo and at least 2 steps")
    return np.linspace(lo, hi, steps)


# -- subcommands ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    params = _load_params(args.params)
    eps = generate_dataset(params, args.count, args.seed, missing=args.missing, prefix=args.prefix)
    write_episodes(eps, args.out, header=provenance(args))
    return EXIT_OK


def cmd_build_table(args) -> int:
    params = _load_params(args.params)
    table = build_table(params, _grid_from_args(params, args), eps=args.epsilon)
    save_table(table, args.out)
    _write_sidecar(args.out, provenance(args))
    d = table.diagnostics
    log.info("table built: %d iterations, residual %.3g", d["iterations"], d["final_residual"])
    return EXIT_OK


def _run_filter(args, table) -> int:
    params = _load_params(args.params)
    if table is None:
        table = _table_for(params, args)
    episodes = _load_episodes(args.episodes, params.n_streams)
    with open(args.out, "w") as fh:
        fh.write(json.dumps({"provenance": provenance(args)}, sort_keys=True) + "\n")
        for ep in episodes:
            for snap in stream_filter(params, table, ep, censor_aware=not args.no_censor_survival):
                fh.write(json.dumps(snap.to_dict(ep.id), sort_keys=True) + "\n")
    return EXIT_OK


def cmd_filter(args) -> int:
    if not args.table:
        raise UsageError("filter needs --table (score builds one on demand)")
    params = _load_params(args.params)
    try:
        table = load_table(args.table, params)
    except FingerprintMismatch:
        raise
    except TableError as exc:
        raise InputError(str(exc)) from exc
    return _run_filter(args, table)


def cmd_score(args) -> int:
    return _run_filter(args, None)


def cmd_learn(args) -> int:
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}: invalid JSON ({exc.msg})") from exc
    overrides = {"G": args.mc_samples, "max_iter": args.max_iter, "eps": args.epsilon_em,
                 "ess_refresh": args.ess_refresh or None}
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    n_states = int(cfg.pop("n_states", args.n_states))
    cfg["seed"] = args.seed
    cfg["n_jobs"] = 1 if args.deterministic else args.threads
    try:
        config = EmConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad EM config: {exc}") from exc
    episodes = _load_episodes(args.episodes)
    init = _load_params(args.init) if args.init else None
    result = ffbs_mcem(episodes, n_states, config, init=init)
    head = provenance(args)
    head["ess_refresh"] = config.ess_refresh
    Path(args.out).write_text(result.params.to_json() + "\n")
    _write_sidecar(args.out, head)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            fh.write("# " + json.dumps(head, sort_keys=True) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "q_hat", "est_loglik", "min_ess", "wall_time", "refreshed"])
            for it in result.trace:
                wall = 0.0 if args.deterministic else it.wall_time
                w.writerow([it.iteration, repr(it.q_hat), repr(it.est_loglik), repr(it.min_ess),
                            f"{wall:.3f}", int(it.refreshed)])
    return EXIT_OK


def _read_scores(path):
    by_id = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise InputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
                if "provenance" in d:
                    continue
                try:
                    by_id.setdefault(d["id"], []).append((float(d["t"]), float(d["risk"])))
                except (KeyError, TypeError, ValueError) as exc:
                    raise InputError(f"{path}:{lineno}: malformed snapshot ({exc})") from exc
    except OSError as exc:
        raise InputError(f"cannot read scores {path}: {exc.strerror}") from exc
    return by_id


def cmd_evaluate(args) -> int:
    thresholds = _parse_sweep(args.threshold_sweep) if args.threshold_sweep else None
    by_id = _read_scores(args.scores)
    episodes = _load_episodes(args.episodes)
    scored = []
    for ep in episodes:
        rows = by_id.get(ep.id, [])
        t = np.array([r[0] for r in rows])
        r = np.array([r[1] for r in rows])
        scored.append(ScoredEpisode(ep.id, ep.label, ep.censor_time, t, r))
    curve = roc_curve(scored, thresholds)
    op = operating_point(scored, curve, 0.5)
    head = provenance(args)
    with open(args.out, "w", newline="") as fh:
        fh.write("# " + json.dumps(head, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "tpr", "ppv"])
        for row in curve.rows():
            w.writerow([repr(float(x)) for x in row])
    prevalence = float(np.mean([s.label != 0 for s in scored]))
    summary = {
        "auc": curve.auc,
        "prevalence": prevalence,
        "timeliness_at_tpr50": op[3] if op else None,
        "threshold_at_tpr50": op[0] if op else None,
        "n_episodes": len(scored),
    }
    summary_path = args.summary or f"{os.path.splitext(args.out)[0]}.summary.json"
    Path(summary_path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_sidecar(summary_path, head)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(quick=not args.full, stream=sys.stdout)
    return EXIT_OK if ok else EXIT_NUMERIC


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = __doc__.split("\n\n", 1)[1]
    parser = _Parser(prog="hasmm", description="Hidden absorbing semi-Markov models.",
                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"hasmm {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p, seed_required=False):
        p.add_argument("--deterministic", action="store_true",
                       help="omit timestamps from provenance and run single-threaded")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)

    def grid(p):
        p.add_argument("--grid-dt", type=float, default=1.0)
        p.add_argument("--grid-a", type=int)
        p.add_argument("--grid-b", type=int)
        p.add_argument("--grid-c", type=int)
        p.add_argument("--epsilon", type=float, default=1e-8, help="fixed-point tolerance")

    p = sub.add_parser("generate", help="sample synthetic episodes")
    p.add_argument("--params", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--missing", type=float, default=0.0)
    p.add_argument("--prefix", default="ep")
    p.add_argument("--out", required=True)
    common(p, seed_required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build-table", help="solve for the interval transition table")
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    grid(p)
    common(p)
    p.set_defaults(func=cmd_build_table)

    for name, func, helptext in (("filter", cmd_filter, "posterior snapshots with a prebuilt table"),
                                 ("score", cmd_score, "posterior snapshots, building the table on demand")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--params", required=True)
        p.add_argument("--table")
        p.add_argument("--episodes", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--no-censor-survival", action="store_true",
                       help="drop the survival factor of absorbing states")
        grid(p)
        common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("learn", help="fit parameters by Monte Carlo EM")
    p.add_argument("--episodes", required=True)
    p.add_argument("--config", help="EM config JSON (G, eps, max_iter, ess_refresh, ...)")
    p.add_argument("--n-states", type=int, default=3)
    p.add_argument("--init", help="starting parameter set (default: data-driven)")
    p.add_argument("--mc-samples", type=int, dest="mc_samples")
    p.add_argument("--max-iter", type=int)
    p.add_argument("--epsilon", type=float, dest="epsilon_em", help="parameter-change tolerance")
    p.add_argument("--ess-refresh", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    common(p, seed_required=True)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("evaluate", help="detection curve and summary from scored episodes")
    p.add_argument("--scores", required=True)
    p.add_argument("--episodes", required=True, help="episodes file providing labels and censor times")
    p.add_argument("--threshold-sweep")
    p.add_argument("--out", required=True)
    p.add_argument("--summary")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.add_argument("--full", action="store_true")
    common(p)
    p.set_defaults(func=cmd_selftest)
    return parser


def _fail(kind, message, code) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("HASMM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be at least 1")
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except InputError as exc:
        return _fail("input", str(exc), EXIT_INPUT)
    except FingerprintMismatch as exc:
        return _fail("fingerprint", str(exc), EXIT_FINGERPRINT)
    except (ConvergenceError, PlateauError, FilterError, SamplerError, RunawayEpisode,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail("numerical", str(exc), EXIT_NUMERIC)
    except Exception as exc:  # noqa: BLE001 - last-resort report
        log.debug("unexpected failure", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}", EXIT_OTHER)


if __name__ == "__main__":
    sys.exit(main())
