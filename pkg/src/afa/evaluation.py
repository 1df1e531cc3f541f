"""Held-out episodes, metrics and tabular/DOT exports."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata, spearmanr

from .mdp import FINISH, PolicyGraph, members, popcount, rollout


@dataclass
class EpisodeTrace:
    instance: int
    steps: list  # [(superstate, action)], last action FINISH
    probability: float
    predicted: int
    label: int
    cost: float
    ret: float

    @property
    def final(self) -> int:
        return self.steps[-1][0]

    @property
    def depth(self) -> int:
        return len(self.steps) - 1

    @property
    def acquired(self) -> list:
        return [a for _, a in self.steps if a != FINISH]

    @property
    def correct(self) -> bool:
        return self.predicted == self.label and self.probability != 0.5


def _outcome(prob, label):
    pred = (prob > 0.5).astype(int)
    correct = np.where(label == 1, prob > 0.5, prob < 0.5)
    return pred, correct


def run_episodes(pg: PolicyGraph, classifier, X, labels, lam=None, ids=None) -> list:
    """Greedy episodes on full-width (transformed) rows; only the columns of
    acquired groups are ever read."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    labels = np.asarray(labels).astype(int)
    lam = pg.lam if lam is None else lam
    ids = np.arange(len(X)) if ids is None else np.asarray(ids)
    final, paths = rollout(pg, X)
    prob = np.empty(len(X))
    for s in np.unique(final):
        rows = final == s
        prob[rows] = classifier.predict_proba(X[rows], int(s))
    pred, correct = _outcome(prob, labels)
    out = []
    for i, path in enumerate(paths):
        steps = [(s, members(t ^ s)[0]) for s, t in zip(path, path[1:])] + [(path[-1], FINISH)]
        cost = float(sum(pg.costs[g] for g in members(path[-1])))
        out.append(EpisodeTrace(int(ids[i]), steps, float(prob[i]), int(pred[i]), int(labels[i]),
                                cost, float(correct[i]) - lam * cost))
    return out


def run_episode(pg: PolicyGraph, classifier, x, label=0, lam=None) -> EpisodeTrace:
    return run_episodes(pg, classifier, np.asarray(x, dtype=float)[None, :], [label], lam)[0]


def auc(probabilities, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg); tied scores count one half."""
    p = np.asarray(probabilities, dtype=float)
    y = np.asarray(labels).astype(int)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(p)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def usage_frequencies(traces, n_groups: int) -> np.ndarray:
    if not traces:
        raise ValueError("no traces")
    use = np.zeros(n_groups)
    for t in traces:
        for g in members(t.final):
            use[g] += 1
    return use / len(traces)


@dataclass
class MetricsReport:
    auc: float
    accuracy: float
    mean_cost: float
    mean_return: float
    mean_depth: float
    max_depth: int
    n_nodes: int
    usage: list = field(default_factory=list)
    n: int = 0

    def row(self, group_names=None) -> dict:
        r = {k: v for k, v in asdict(self).items() if k != "usage"}
        names = group_names or ["g%d" % i for i in range(len(self.usage))]
        r.update({"usage_" + n: u for n, u in zip(names, self.usage)})
        return r


def metrics(traces, n_groups: int) -> MetricsReport:
    prob = np.array([t.probability for t in traces])
    y = np.array([t.label for t in traces])
    depth = np.array([t.depth for t in traces])
    try:
        a = auc(prob, y)
    except ValueError:
        a = float("nan")
    visited = {s for t in traces for s, _ in t.steps}
    return MetricsReport(
        auc=a,
        accuracy=float(np.mean([t.correct for t in traces])),
        mean_cost=float(np.mean([t.cost for t in traces])),
        mean_return=float(np.mean([t.ret for t in traces])),
        mean_depth=float(depth.mean()),
        max_depth=int(depth.max()),
        n_nodes=len(visited),
        usage=[float(u) for u in usage_frequencies(traces, n_groups)],
        n=len(traces),
    )


def aggregate(reports) -> dict:
    """Per-field mean and std over splits (no pooling of episodes)."""
    rows = [r.row() if isinstance(r, MetricsReport) else r for r in reports]
    out = {}
    for k in rows[0]:
        vals = np.array([r[k] for r in rows], dtype=float)
        out[k] = float(vals.mean())
        out[k + "_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    out["splits"] = len(rows)
    return out


# -- writers -----------------------------------------------------------------

def mask_label(mask: int, names) -> str:
    return "+".join(names[g] for g in members(mask)) if mask else "root"


def write_csv(path, rows, columns=None):
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def trace_rows(traces, names):
    for t in traces:
        yield dict(instance=t.instance, path=">".join(names[a] for a in t.acquired),
                   final=t.final, n_acquired=t.depth, cost=t.cost,
                   probability=t.probability, predicted=t.predicted, label=t.label,
                   return_=t.ret)


TRACE_COLUMNS = ["instance", "path", "final", "n_acquired", "cost", "probability",
                 "predicted", "label", "return_"]


def policy_dot(pg: PolicyGraph, names, visits: dict, finishes: dict, title="policy") -> str:
    """Graphviz source: visited superstates shaded by traffic, annotated with
    'visited / finished' counts."""
    top = max(max(visits.values(), default=0), 1)
    buf = io.StringIO()
    buf.write('digraph "%s" {\n  node [shape=box, style=filled, fontname="Helvetica"];\n' % title)
    for s in sorted(visits, key=lambda m: (popcount(m), m)):
        shade = 95 - int(60 * visits[s] / top)
        font = "white" if shade < 50 else "black"
        buf.write('  n%d [label="%s\\n%d / %d", fillcolor="gray%d", fontcolor="%s"];\n'
                  % (s, mask_label(s, names), visits[s], finishes.get(s, 0), shade, font))
    for s in sorted(visits):
        for a in pg.actions(s)[1:] if s in pg.nodes else []:
            c = s | 1 << a
            if c in visits:
                buf.write('  n%d -> n%d [label="%s"];\n' % (s, c, names[a]))
    buf.write("}\n")
    return buf.getvalue()


def trace_visits(traces):
    visits, finishes = {}, {}
    for t in traces:
        for s, _ in t.steps:
            visits[s] = visits.get(s, 0) + 1
        finishes[t.final] = finishes.get(t.final, 0) + 1
    return visits, finishes


def cost_usage_rank_correlation(costs, usage) -> float:
    """Spearman correlation between per-group cost and usage frequency."""
    return float(spearmanr(costs, usage)[0])


def lambda_sweep(d, lambdas, cfg) -> list:
    """(lambda, mean accuracy, mean cost, ...) rows, one per lambda, averaged
    over the splits of ``cfg``; each lambda gets a full train/evaluate."""
    from .pipeline import lambda_sweep as sweep
    return sweep(d, lambdas, cfg)
