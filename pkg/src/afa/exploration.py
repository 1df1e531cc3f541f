"""Sampling-guided growth of the explored superstate set.

Starting from the empty superstate, the open set holds every child of an
explored node. Each open node is scored by the optimistic return heuristic
(or a random score for the baseline), the best one is explored, and the
restricted policy is patched in place by propagating value changes upwards.
"""

from __future__ import annotations

import heapq
from itertools import combinations
from math import comb
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError
from .mdp import (ROOT, PolicyGraph, Problem, _fit_edge, _fit_finish,
                  _recompute_value, children, members, parents, popcount,
                  rollout, solve_full)

DEFAULT_SAMPLES = 16
VALUE_TOL = 1e-9


@dataclass
class HeuristicEstimate:
    node: int
    score: float
    samples_used: int


def sample_supersets(f: int, n_groups: int, n_samples: int, rng, max_size=None) -> list:
    """Supersets of ``f`` (``f`` included) by logarithmic sampling: the number
    of extra groups is drawn uniformly, then the groups themselves. When
    ``n_samples`` covers every superset they are enumerated instead.
    ``max_size`` caps the superset size (a budget makes larger ones unreachable)."""
    free = [g for g in range(n_groups) if not f >> g & 1]
    room = len(free) if max_size is None else max(0, min(len(free), max_size - popcount(f)))
    total = sum(comb(len(free), j) for j in range(room + 1))
    if total <= n_samples + 1:
        out = []
        for extra in range(room + 1):
            for pick in combinations(free, extra):
                out.append(f | sum(1 << g for g in pick))
        return sorted(out)
    out = {f}
    free = np.array(free)
    for _ in range(n_samples):
        k = int(rng.integers(1, room + 1))
        pick = rng.choice(free, size=k, replace=False)
        out.add(f | int(np.bitwise_or.reduce(np.left_shift(1, pick))))
    return sorted(out)


def estimate_return(problem: Problem, f: int, n_samples=DEFAULT_SAMPLES, rng=None,
                    max_size=None) -> HeuristicEstimate:
    """Mean over rows of the best terminal reward among sampled supersets."""
    return estimate_many(problem, [f], n_samples, rng, max_size)[0]


def best_rewards(rewards, items) -> list:
    """Row-wise max of terminal rewards over each ``(f, supersets)`` pair.

    Accuracy is 0/1, so superset k can only raise row j when
    1 - lam*cost(k) exceeds the best value found so far. Visiting supersets
    by increasing cost lets most rows be skipped; the result is exact.
    Requests from all pairs are batched step by step.
    """
    partial = getattr(rewards.source, "accuracy_pairs", None)
    best = [np.array(rewards(f)) for f, _ in items]
    order = [sorted((k for k in ks if k != f), key=lambda k: (rewards.cost(k), k))
             for f, ks in items]
    for step in range(max((len(o) for o in order), default=0)):
        todo = []
        for i, o in enumerate(order):
            if step < len(o):
                k = o[step]
                c = rewards.lam * rewards.cost(k)
                need = np.flatnonzero(best[i] < 1.0 - c)
                if need.size:
                    todo.append((i, k, need, c))
        if partial is None:
            accs = [rewards.accuracy(k)[need] for _, k, need, _ in todo]
        else:
            accs = partial([(k, need) for _, k, need, _ in todo])
        for (i, k, need, c), acc in zip(todo, accs):
            best[i][need] = np.maximum(best[i][need], acc - c)
    return best


def estimate_many(problem: Problem, nodes, n_samples=DEFAULT_SAMPLES, rng=None,
                  max_size=None) -> list:
    rng = np.random.default_rng(0) if rng is None else rng
    samples = [sample_supersets(f, problem.n_groups, n_samples, rng, max_size) for f in nodes]
    problem.rewards.many(nodes)
    best = best_rewards(problem.rewards, list(zip(nodes, samples)))
    return [HeuristicEstimate(f, float(b.mean()), len(ks))
            for f, ks, b in zip(nodes, samples, best)]


def update_policy(pg: PolicyGraph, new: int, problem: Problem | None = None) -> PolicyGraph:
    """Insert ``new`` and repair values upwards, in place.

    Parents refit the Q of the action leading to a changed child; propagation
    stops at nodes whose value vector did not move (elementwise, 1e-9).
    Deeper nodes are processed first so every node is settled once.
    """
    problem = problem or pg.problem
    if new in pg.nodes:
        raise GraphError("superstate %s already explored" % members(new))
    ps = [p for p in parents(new) if p in pg.nodes and not pg.closed(p)]
    if not ps:
        raise GraphError("superstate %s has no open parent in the policy" % members(new))
    pg.nodes.add(new)
    _fit_finish(pg, problem, new)
    for a in pg.actions(new)[1:]:
        _fit_edge(pg, problem, new, a)
    _recompute_value(pg, new)

    queue, queued = [], set()

    def push(s):
        if s not in queued:
            queued.add(s)
            heapq.heappush(queue, (-popcount(s), s))

    for p in ps:
        _fit_edge(pg, problem, p, members(new ^ p)[0])
        push(p)
    while queue:
        _, s = heapq.heappop(queue)
        queued.discard(s)
        old = pg.values[s]
        v = _recompute_value(pg, s)
        if np.max(np.abs(v - old)) <= VALUE_TOL:
            continue
        for m in parents(s):
            if m in pg.nodes and not pg.closed(m):
                _fit_edge(pg, problem, m, members(s ^ m)[0])
                push(m)
    return pg


def policy_depth(pg: PolicyGraph, X) -> int:
    final, _ = rollout(pg, X)
    return max(popcount(int(s)) for s in np.unique(final))


@dataclass
class Frontier:
    explored: set
    open: dict  # mask -> cached score
    seed: int
    n_max: int

    def choose(self) -> int:
        # highest score; ties to fewer groups, then lower mask
        return min(self.open, key=lambda m: (-self.open[m], popcount(m), m))


@dataclass
class ExplorationRun:
    policy: PolicyGraph
    frontier: Frontier
    trace: list = field(default_factory=list)
    heuristic: str = "sampling"


def explore(problem: Problem, n_max: int, heuristic="sampling", n_samples=DEFAULT_SAMPLES,
            seed=0, budget=None, rescore=False, plateau=None, monitor=None,
            record_depth=False) -> ExplorationRun:
    """Grow the explored set to ``n_max`` superstates and return the restricted policy.

    ``heuristic`` is 'sampling' (optimistic return estimate) or 'random'.
    Scores are computed once, when a node enters the open set, unless
    ``rescore``. ``plateau`` stops after that many insertions without a
    change of the mean root value. ``monitor(pg)`` may return extra columns
    (e.g. test return) for the trace.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if heuristic not in ("sampling", "random"):
        raise ValueError("unknown heuristic %r" % heuristic)
    rng = np.random.default_rng(seed)
    pg = solve_full(problem, {ROOT}, budget=budget)
    frontier = Frontier({ROOT}, {}, seed, n_max)
    run = ExplorationRun(pg, frontier, heuristic=heuristic)

    def score(nodes):
        if not nodes:
            return []
        if heuristic == "random":
            return list(rng.random(len(nodes)))
        return [e.score for e in estimate_many(problem, nodes, n_samples, rng, budget)]

    def open_children(s):
        if pg.closed(s):
            return
        fresh = [c for a, c in children(s, problem.n_groups)[:-1]
                 if c not in frontier.explored and c not in frontier.open]
        if heuristic == "sampling":
            problem.rewards.prefetch_children(s, [members(c ^ s)[0] for c in fresh])
        frontier.open.update(zip(fresh, score(fresh)))

    def record(step, node, sc):
        row = dict(step=step, node=node, score=sc, root_value=pg.root_value(),
                   n_nodes=pg.n_nodes)
        if record_depth:
            row["depth"] = policy_depth(pg, problem.X)
        if monitor is not None:
            row.update(monitor(pg))
        run.trace.append(row)

    open_children(ROOT)
    record(1, ROOT, float("nan"))
    last_change, last_root = 1, pg.root_value()
    while len(frontier.explored) < n_max and frontier.open:
        if rescore:
            nodes = sorted(frontier.open)
            frontier.open = dict(zip(nodes, score(nodes)))
        node = frontier.choose()
        sc = frontier.open.pop(node)
        frontier.explored.add(node)
        update_policy(pg, node, problem)
        open_children(node)
        step = len(frontier.explored)
        record(step, node, float(sc))
        if pg.root_value() != last_root:
            last_change, last_root = step, pg.root_value()
        elif plateau is not None and step - last_change >= plateau:
            break
    return run


def exploration_curve(run: ExplorationRun) -> list:
    """One row per insertion: step, node, score and whatever was recorded
    (test_return, mean_cost, depth)."""
    cols = ["step", "node", "score", "test_return", "mean_cost", "depth", "n_nodes", "root_value"]
    return [{c: row[c] for c in cols if c in row} for row in run.trace]
