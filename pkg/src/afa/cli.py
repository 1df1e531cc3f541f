"""Command-line entry points: train, eval, sweep, session, export-dot.

Exit codes: 0 ok, 2 configuration/schema error, 3 data error,
4 non-convergence under --strict, 130 interactive session aborted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from contextlib import nullcontext
from dataclasses import fields

import numpy as np

from . import dataset as ds
from .artifact import load_model, save_model
from .errors import AfaError, DataError, SchemaError
from .evaluation import (TRACE_COLUMNS, aggregate, mask_label, policy_dot, trace_rows,
                         trace_visits, write_csv)
from .mdp import FINISH, ROOT, greedy_action, members
from .pipeline import RunConfig, load_data, load_schema, metrics_rows, run_splits, sweep_rows

log = logging.getLogger("afa")

THREADS_ENV = "AFA_NUM_THREADS"
EXIT_ABORT = 130


# -- config flags ------------------------------------------------------------

def _opt(kind):
    def parse(text):
        return None if text.lower() == "none" else kind(text)
    parse.__name__ = kind.__name__
    return parse


_TYPES = {"str": str, "float": float, "int": int,
          "str | None": _opt(str), "int | None": _opt(int)}


def add_config_flags(p):
    """One flag per RunConfig field; unset flags keep the config-file value."""
    p.add_argument("--config", help="JSON run configuration (flags override it)")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "output":
            p.add_argument("-o", flag, dest=f.name, default=argparse.SUPPRESS,
                           help="output directory (default: %s)" % f.default)
        elif f.type == "bool":
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                           default=argparse.SUPPRESS)
        else:
            p.add_argument(flag, dest=f.name, type=_TYPES[f.type], default=argparse.SUPPRESS,
                           help="default: %s" % f.default)


def config_from(args) -> RunConfig:
    base = RunConfig.load(args.config).to_dict() if args.config else {}
    base.update({f.name: getattr(args, f.name) for f in fields(RunConfig) if hasattr(args, f.name)})
    return RunConfig.from_dict(base)


# -- helpers -----------------------------------------------------------------

def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v).__name__)


def _split_trace_rows(results, names):
    for r in results:
        for row in trace_rows(r.traces, names):
            yield dict(split=r.split, **row)


def _resolve_data(spec, schema, seed=0):
    if spec == "hta":
        return ds.hta_surrogate(seed=seed)
    if spec in ds.BUILTIN:
        return ds.load_builtin(spec)
    return ds.load_csv(spec, schema)


def _artifact_schema(model) -> ds.Schema:
    cols = list(model.columns)
    off = model.raw_offsets
    groups = [(g.name, cols[off[i]:off[i + 1]], g.cost) for i, g in enumerate(model.groups)]
    return ds.Schema(model.label, groups, model.name)


def _eval_data(model, data, schema, seed):
    if data in ds.BUILTIN or data == "hta":
        return _resolve_data(data, None, seed)
    return ds.load_csv(data, schema if schema else _artifact_schema(model))


# -- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = config_from(args)
    d = load_data(cfg)
    schema = load_schema(cfg)
    by_lam = run_splits(d, cfg)
    results = by_lam[cfg.lam]
    names = [g.name for g in d.groups]
    model = results[0].model
    if schema is not None:
        model.label = schema.label

    rows = metrics_rows(results, names)
    report = dict(dataset=ds.describe(d), config=cfg.to_dict(),
                  splits=[dict(split=r.split, **r.model.report, **r.report.row(names))
                          for r in results],
                  aggregate=aggregate([r.report for r in results]))
    out = cfg.output
    os.makedirs(out, exist_ok=True)
    cfg.dump(os.path.join(out, "config.json"))
    save_model(os.path.join(out, "policy.npz"), model)
    _write_json(os.path.join(out, "report.json"), report)
    write_csv(os.path.join(out, "metrics.csv"), rows)
    write_csv(os.path.join(out, "traces.csv"), _split_trace_rows(results, names),
              ["split"] + TRACE_COLUMNS)
    explore_rows = [dict(split=r.split, **row) for r in results for row in r.model.trace]
    if explore_rows:
        cols = ["split", "step", "node", "score", "root_value", "n_nodes",
                "test_return", "mean_cost", "depth"]
        write_csv(os.path.join(out, "exploration.csv"), explore_rows,
                  [c for c in cols if c in explore_rows[-1]])
    reg_rows = [dict(split=r.split, **row) for r in results for row in r.model.reg_history]
    if reg_rows:
        write_csv(os.path.join(out, "regularisation.csv"), reg_rows)
    visits, finishes = trace_visits(results[0].traces)
    with open(os.path.join(out, "policy.dot"), "w") as fh:
        fh.write(policy_dot(model.policy, names, visits, finishes, d.name))
    if args.figures:
        from . import plots
        fig = os.path.join(out, "figures")
        os.makedirs(fig, exist_ok=True)
        plots.usage_bars([rows[-2]["usage_" + n] for n in names], names,
                         os.path.join(fig, "usage.png"))
        if explore_rows:
            plots.exploration_curve(explore_rows, os.path.join(fig, "exploration.png"))
        if reg_rows:
            plots.regularisation_history([r for r in reg_rows if r["split"] == 0],
                                         os.path.join(fig, "regularisation.png"))
    agg = report["aggregate"]
    print("auc=%.4f accuracy=%.4f mean_cost=%.4g mean_return=%.4f nodes=%d -> %s"
          % (agg["auc"], agg["accuracy"], agg["mean_cost"], agg["mean_return"],
             model.policy.n_nodes, out))
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.artifact)
    d = _eval_data(model, args.data, args.schema, args.seed)
    if d.n_rows == 0:
        raise DataError("test set is empty")
    traces, rep = model.evaluate(d)
    names = model.group_names
    if model.policy.budget is not None and rep.max_depth > model.policy.budget:
        raise AfaError("budget violated: depth %d > %d" % (rep.max_depth, model.policy.budget))
    os.makedirs(args.output, exist_ok=True)
    write_csv(os.path.join(args.output, "traces.csv"), trace_rows(traces, names), TRACE_COLUMNS)
    write_csv(os.path.join(args.output, "metrics.csv"),
              [dict(rep.row(names), policy_nodes=model.policy.n_nodes)])
    visits, finishes = trace_visits(traces)
    with open(os.path.join(args.output, "policy.dot"), "w") as fh:
        fh.write(policy_dot(model.policy, names, visits, finishes, model.name))
    if args.figures:
        from . import plots
        os.makedirs(os.path.join(args.output, "figures"), exist_ok=True)
        plots.usage_bars(rep.usage, names, os.path.join(args.output, "figures", "usage.png"))
    print("auc=%.4f accuracy=%.4f mean_cost=%.4g mean_return=%.4f max_depth=%d"
          % (rep.auc, rep.accuracy, rep.mean_cost, rep.mean_return, rep.max_depth))
    return 0


def dedupe(values):
    out = list(dict.fromkeys(values))
    if len(out) < len(values):
        log.warning("duplicate lambda values dropped: %s", values)
    return out


def cmd_sweep(args) -> int:
    cfg = config_from(args)
    lams = dedupe(args.lambdas)
    if any(lam < 0 for lam in lams):
        raise SchemaError("lambda must be >= 0")
    d = load_data(cfg)
    rows = sweep_rows(run_splits(d, cfg, lams))
    os.makedirs(cfg.output, exist_ok=True)
    cfg.dump(os.path.join(cfg.output, "config.json"))
    write_csv(os.path.join(cfg.output, "sweep.csv"), rows)
    if args.figures:
        from . import plots
        plots.frontier(rows, os.path.join(cfg.output, "frontier.png"))
    for r in rows:
        print("lam=%g accuracy=%.4f mean_cost=%.4g" % (r["lam"], r["accuracy"], r["mean_cost"]))
    return 0


class SessionAbort(Exception):
    pass


def _read_values(prompt, dims, infile, outfile):
    while True:
        outfile.write(prompt)
        outfile.flush()
        line = infile.readline()
        if not line:
            raise SessionAbort("end of input")
        text = line.strip()
        if text.lower() in ("q", "quit", "exit"):
            raise SessionAbort("user quit")
        parts = [t for t in re.split(r"[,\s]+", text) if t]
        try:
            vals = [float(t) for t in parts]
        except ValueError:
            outfile.write("  not a number, try again\n")
            continue
        if len(vals) != dims or not np.all(np.isfinite(vals)):
            outfile.write("  expected %d finite value(s), got %d\n" % (dims, len(vals)))
            continue
        return vals


def session(model, infile, outfile) -> dict:
    """Interactive episode. Returns the transcript; ``status`` is 'finished'
    or 'aborted' (partial steps kept)."""
    pg, off = model.policy, model.raw_offsets
    names = model.group_names
    x = np.full(off[-1], np.nan)
    s = ROOT
    t = dict(status="running", steps=[], values={})
    try:
        while True:
            z = model.transform(x)[0]
            a = greedy_action(pg, s, z)
            t["steps"].append([s, a])
            if a == FINISH:
                p = float(model.classifier.predict_proba(z[None, :], s)[0])
                t.update(status="finished", probability=p, predicted=int(p > 0.5),
                         cost=float(sum(pg.costs[g] for g in members(s))))
                outfile.write("finish after %s: probability %.4f, predicted label %d\n"
                              % (mask_label(s, names), p, int(p > 0.5)))
                return t
            g = model.groups[a]
            prompt = "acquire %s (cost %g); enter %d value(s): " % (g.name, pg.costs[a], g.dims)
            vals = _read_values(prompt, g.dims, infile, outfile)
            x[off[a]:off[a + 1]] = vals
            t["values"][g.name] = vals
            s |= 1 << a
    except (SessionAbort, KeyboardInterrupt) as exc:
        t["status"] = "aborted"
        t["reason"] = str(exc) or "interrupted"
        t["steps"] = t["steps"][:-1] if t["steps"] and t["steps"][-1][1] != FINISH else t["steps"]
        return t


def cmd_session(args) -> int:
    model = load_model(args.artifact)
    infile = open(args.input) if args.input else sys.stdin
    with (infile if args.input else nullcontext(infile)):
        t = session(model, infile, sys.stdout)
    if args.transcript:
        _write_json(args.transcript, t)
    if t["status"] == "aborted":
        print("\nsession aborted (%s); partial transcript in %s"
              % (t["reason"], args.transcript), file=sys.stderr)
        return EXIT_ABORT
    return 0


def cmd_export_dot(args) -> int:
    model = load_model(args.artifact)
    names = model.group_names
    if args.data:
        d = _eval_data(model, args.data, args.schema, args.seed)
        visits, finishes = trace_visits(model.episodes(d.values, d.labels))
    else:
        visits, finishes = {s: 0 for s in model.policy.nodes}, {}
    text = policy_dot(model.policy, names, visits, finishes, model.name)
    if args.output == "-":
        sys.stdout.write(text)
    else:
        with open(args.output, "w") as fh:
            fh.write(text)
    return 0


# -- entry -------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="afa", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy and evaluate it on held-out splits")
    add_config_flags(p)
    p.add_argument("--figures", action="store_true", help="also render PNG figures")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run a saved policy on a dataset")
    p.add_argument("artifact")
    p.add_argument("data", help="CSV path or builtin name")
    p.add_argument("--schema", help="schema file (default: the artifact's own layout)")
    p.add_argument("--seed", type=int, default=0, help="seed for the hta surrogate")
    p.add_argument("-o", "--output", default="afa-eval")
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="accuracy/cost frontier over lambda values")
    add_config_flags(p)
    p.add_argument("--lambdas", type=float, nargs="+", required=True)
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("session", help="step through one acquisition episode interactively")
    p.add_argument("artifact")
    p.add_argument("--transcript", default="session-transcript.json")
    p.add_argument("--input", help="read answers from this file instead of stdin")
    p.set_defaults(func=cmd_session)

    p = sub.add_parser("export-dot", help="Graphviz view of a saved policy")
    p.add_argument("artifact")
    p.add_argument("data", nargs="?", help="rows to replay for visit counts")
    p.add_argument("--schema")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_export_dot)
    return ap


def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return nullcontext()
    try:
        n = int(n)
    except ValueError:
        raise SchemaError("%s must be an integer" % THREADS_ENV) from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except AfaError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
