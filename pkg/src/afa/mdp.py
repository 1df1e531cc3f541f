"""The superstate MDP: feature-subset bitmasks as nodes, terminal rewards
acc - lambda*cost, postorder Bellman solve with per-(node, action) regressors,
greedy policies and the hard acquisition budget."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError
from .estimators import RidgeDesign, kernel_for, column_bandwidths

FINISH = -1
ROOT = 0


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def members(mask: int) -> list:
    out, g = [], 0
    while mask:
        if mask & 1:
            out.append(g)
        mask >>= 1
        g += 1
    return out


def mask_of(groups) -> int:
    m = 0
    for g in groups:
        m |= 1 << int(g)
    return m


def children(s: int, n_groups: int) -> list:
    """(action, next superstate) pairs: one acquisition per missing group in
    id order, then (FINISH, None)."""
    if s >> n_groups:
        raise GraphError("mask %d has bits beyond %d groups" % (s, n_groups))
    out = [(g, s | 1 << g) for g in range(n_groups) if not s >> g & 1]
    out.append((FINISH, None))
    return out


def parents(s: int) -> list:
    return [s & ~(1 << g) for g in members(s)]


def check_rooted(nodes):
    """Every node is reachable from the empty mask through the set."""
    if ROOT not in nodes:
        raise GraphError("node set must contain the empty superstate")
    for s in nodes:
        if s != ROOT and not any(p in nodes for p in parents(s)):
            raise GraphError("superstate %s has no parent in the node set" % members(s))


# -- rewards -----------------------------------------------------------------

@dataclass(frozen=True)
class TerminalReward:
    acc: np.ndarray
    cost: float
    lam: float

    @property
    def reward(self) -> np.ndarray:
        return self.acc - self.lam * self.cost


class TerminalRewards:
    """Cached per-superstate reward vectors acc - lam*cost.

    ``accuracy`` is a CrossValClassifier, any object with ``accuracy(mask)``,
    or a plain callable.
    """

    def __init__(self, accuracy, costs, lam: float):
        self.source = accuracy
        self.costs = np.asarray(costs, dtype=float)
        self.lam = float(lam)
        self._cache = {}
        self._costs = {}

    def accuracy(self, mask: int) -> np.ndarray:
        if hasattr(self.source, "accuracy"):
            return self.source.accuracy(mask)
        return np.asarray(self.source(mask), dtype=float)

    def accuracy_many(self, masks) -> dict:
        if hasattr(self.source, "accuracy_many"):
            return self.source.accuracy_many(masks)
        return {s: self.accuracy(s) for s in masks}

    def cost(self, mask: int) -> float:
        c = self._costs.get(mask)
        if c is None:
            c = self._costs[mask] = float(sum(self.costs[g] for g in members(mask)))
        return c

    def __call__(self, mask: int) -> np.ndarray:
        r = self._cache.get(mask)
        if r is None:
            r = self.accuracy(mask) - self.lam * self.cost(mask)
            r.setflags(write=False)
            self._cache[mask] = r
        return r

    def many(self, masks) -> dict:
        todo = [s for s in dict.fromkeys(masks) if s not in self._cache]
        if todo:
            for s, acc in self.accuracy_many(todo).items():
                r = acc - self.lam * self.cost(s)
                r.setflags(write=False)
                self._cache[s] = r
        return {s: self._cache[s] for s in masks}

    def prefetch_children(self, parent: int, groups):
        """Warm the accuracy cache for children of one parent (cheaper than
        computing each child from scratch when the source supports it)."""
        fn = getattr(self.source, "accuracy_children", None)
        if fn is not None:
            fn(parent, list(groups))

    def terminal(self, mask: int) -> TerminalReward:
        return TerminalReward(self.accuracy(mask), self.cost(mask), self.lam)


def terminal_reward(cv, costs, s: int, lam: float) -> TerminalReward:
    """acc from cross-validation, cost summed over the groups in ``s``."""
    return TerminalRewards(cv, costs, lam).terminal(s)


# -- Q-value regressors ------------------------------------------------------

class KernelQ:
    """Nystrom kernel ridge per superstate; landmark rows are shared by all
    superstates, designs are LRU-cached because every action leaving a node
    reuses its kernel factorisation."""

    def __init__(self, X, offsets, rank=200, ridge=1.0, seed=0, bandwidths=None, cache=64):
        self.X = np.asarray(X, dtype=float)
        self.offsets = np.asarray(offsets)
        self.base_bw = column_bandwidths(self.X) if bandwidths is None else np.asarray(bandwidths)
        self.rank, self.ridge, self.seed = rank, ridge, seed
        self._designs = OrderedDict()
        self._cache_size = cache

    def columns(self, mask):
        return columns_of(self.offsets, mask)

    def design(self, mask) -> RidgeDesign:
        d = self._designs.get(mask)
        if d is None:
            cols = self.columns(mask)
            spec = kernel_for(self.base_bw, cols, self.rank, self.ridge, self.seed)
            d = RidgeDesign(self.X[:, cols], spec)
            self._designs[mask] = d
            if len(self._designs) > self._cache_size:
                self._designs.popitem(last=False)
        else:
            self._designs.move_to_end(mask)
        return d

    def fit(self, mask, y):
        return self.design(mask).fit_predict(y)


@dataclass
class NearestModel:
    """1-nearest-neighbour regressor; equidistant neighbours are averaged."""

    landmarks: np.ndarray
    targets: np.ndarray

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape[0] == 0:
            return np.zeros(0)
        if self.landmarks.shape[1] == 0:
            return np.full(X.shape[0], self.targets.mean())
        d2 = ((X[:, None, :] - self.landmarks[None, :, :]) ** 2).sum(-1)
        near = d2 <= d2.min(axis=1, keepdims=True)
        return (near * self.targets).sum(1) / near.sum(1)


class NearestQ:
    """Interpolating oracle backend: exact on rows with unique features."""

    def __init__(self, X, offsets):
        self.X = np.asarray(X, dtype=float)
        self.offsets = np.asarray(offsets)

    def columns(self, mask):
        return columns_of(self.offsets, mask)

    def fit(self, mask, y):
        m = NearestModel(self.X[:, self.columns(mask)], np.array(y, dtype=float))
        return m, m.predict(m.landmarks)


def columns_of(offsets, mask) -> np.ndarray:
    parts = [np.arange(offsets[g], offsets[g + 1]) for g in members(mask)]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=int)


# -- training problem and policy graph ---------------------------------------

@dataclass
class Problem:
    """Training rows plus everything a solve needs."""

    X: np.ndarray
    offsets: np.ndarray
    rewards: TerminalRewards
    backend: object

    @property
    def n_groups(self):
        return len(self.offsets) - 1

    @property
    def lam(self):
        return self.rewards.lam

    @property
    def costs(self):
        return self.rewards.costs

    @property
    def n_rows(self):
        return self.X.shape[0]


@dataclass
class PolicyGraph:
    n_groups: int
    offsets: np.ndarray
    costs: np.ndarray
    lam: float
    nodes: set = field(default_factory=lambda: {ROOT})
    budget: int | None = None
    q: dict = field(default_factory=dict)        # mask -> {action: model}
    fitted: dict = field(default_factory=dict)   # mask -> {action: train predictions}
    values: dict = field(default_factory=dict)   # mask -> V on training rows
    penalties: dict = field(default_factory=dict)  # mask -> virtual reward on entry
    refit_log: list = field(default_factory=list, repr=False)
    problem: Problem | None = field(default=None, repr=False)

    def closed(self, s: int) -> bool:
        return self.budget is not None and popcount(s) >= self.budget

    def actions(self, s: int) -> list:
        """Available actions at ``s``: FINISH then acquisitions into the set."""
        if s not in self.nodes:
            raise GraphError("superstate %s not in policy" % members(s))
        acts = [FINISH]
        if not self.closed(s):
            acts += [a for a, c in children(s, self.n_groups)[:-1] if c in self.nodes]
        return acts

    def q_values(self, s: int, X) -> tuple:
        """(actions, Q matrix rows x actions) for full-width rows ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cols = columns_of(self.offsets, s)
        Xs = X[:, cols]
        acts = self.actions(s)
        Q = np.column_stack([self.q[s][a].predict(Xs) for a in acts])
        return acts, Q

    def act(self, s: int, X) -> np.ndarray:
        """Greedy actions for many rows; ties go to FINISH, then lower group id."""
        acts, Q = self.q_values(s, X)
        return np.asarray(acts)[np.argmax(Q, axis=1)]

    def edges(self):
        for s in self.nodes:
            for a in self.actions(s):
                if a != FINISH:
                    yield s, a, s | 1 << a

    @property
    def n_nodes(self):
        return len(self.nodes)

    def root_value(self) -> float:
        return float(self.values[ROOT].mean())


def greedy_action(pg: PolicyGraph, s: int, x) -> int:
    """argmax_a Q(s, a) for one full-width row (unacquired entries unused)."""
    return int(pg.act(s, np.asarray(x, dtype=float)[None, :])[0])


def _target(pg, child):
    return pg.values[child] + pg.penalties.get(child, 0.0)


def _fit_finish(pg, problem, s):
    model, fitted = problem.backend.fit(s, problem.rewards(s))
    pg.q.setdefault(s, {})[FINISH] = model
    pg.fitted.setdefault(s, {})[FINISH] = fitted


def _fit_edge(pg, problem, s, a):
    child = s | 1 << a
    model, fitted = problem.backend.fit(s, _target(pg, child))
    pg.q.setdefault(s, {})[a] = model
    pg.fitted.setdefault(s, {})[a] = fitted
    pg.refit_log.append((s, a))


def _recompute_value(pg, s):
    acts = pg.actions(s)
    # stale entries for actions that left the set
    for a in list(pg.q.get(s, {})):
        if a not in acts:
            del pg.q[s][a]
            del pg.fitted[s][a]
    pg.values[s] = np.max(np.column_stack([pg.fitted[s][a] for a in acts]), axis=1)
    return pg.values[s]


def new_policy(problem: Problem, budget=None, penalties=None) -> PolicyGraph:
    return PolicyGraph(problem.n_groups, problem.offsets, problem.costs, problem.lam,
                       nodes=set(), budget=budget, penalties=dict(penalties or {}),
                       problem=problem)


def solve_full(problem: Problem, nodes, budget=None, penalties=None) -> PolicyGraph:
    """Bellman solve on a rooted superstate set, deepest nodes first.

    Each node gets a FINISH regressor on its terminal rewards and one regressor
    per acquisition whose child is in the set, with target V_child (+ the
    child's virtual reward when regularising). V is the row-wise max.
    """
    nodes = set(nodes)
    if budget is not None:
        nodes = {s for s in nodes if popcount(s) <= budget}
    check_rooted(nodes)
    pg = new_policy(problem, budget, penalties)
    pg.nodes = nodes
    for s in sorted(nodes, key=lambda m: (-popcount(m), m)):
        _fit_finish(pg, problem, s)
        for a in pg.actions(s)[1:]:
            _fit_edge(pg, problem, s, a)
        _recompute_value(pg, s)
    return pg


def full_lattice(n_groups: int, budget=None) -> set:
    nodes = set(range(1 << n_groups))
    if budget is not None:
        nodes = {s for s in nodes if popcount(s) <= budget}
    return nodes


def apply_budget(pg: PolicyGraph, k: int) -> PolicyGraph:
    """Force FINISH at depth ``k``; deeper nodes are dropped and values re-propagated."""
    if k < 0:
        raise ValueError("budget must be >= 0")
    if pg.problem is None:
        raise GraphError("policy has no training problem attached; cannot re-solve")
    if k >= pg.n_groups:
        return pg
    return solve_full(pg.problem, pg.nodes, budget=k, penalties=pg.penalties)


def rollout(pg: PolicyGraph, X):
    """Greedy episodes for every row of ``X``.

    Returns (final masks, list of visited-mask paths). Rows are advanced in
    groups that share the current superstate.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    state = np.zeros(n, dtype=np.int64)
    paths = [[ROOT] for _ in range(n)]
    active = np.arange(n)
    for _ in range(pg.n_groups + 1):
        if active.size == 0:
            break
        still = []
        for s in np.unique(state[active]):
            rows = active[state[active] == s]
            acts = pg.act(int(s), X[rows])
            for r, a in zip(rows, acts):
                if a == FINISH:
                    continue
                nxt = int(s) | 1 << int(a)
                state[r] = nxt
                paths[r].append(nxt)
                still.append(r)
        active = np.array(sorted(still), dtype=int)
    return state, paths


def train_return(pg: PolicyGraph, problem: Problem | None = None) -> float:
    """Mean realised terminal reward of the greedy policy on training rows."""
    problem = problem or pg.problem
    final, _ = rollout(pg, problem.X)
    r = np.empty(len(final))
    for s in np.unique(final):
        rows = final == s
        r[rows] = problem.rewards(int(s))[rows]
    return float(r.mean())


def make_problem(d, lam, cv=None, backend=None, folds=10, rank=200, ridge=1.0,
                 clf_rank=200, clf_ridge=1.0, seed=0):
    """Kernel-backed training problem for a standardised Dataset."""
    from .estimators import CrossValClassifier
    bw = column_bandwidths(d.values)
    if cv is None:
        cv = CrossValClassifier(d.values, d.labels, d.offsets, bw, folds=folds,
                                rank=clf_rank, ridge=clf_ridge, seed=seed)
    if backend is None:
        backend = KernelQ(d.values, d.offsets, rank=rank, ridge=ridge, seed=seed, bandwidths=bw)
    return Problem(d.values, d.offsets, TerminalRewards(cv, d.costs, lam), backend)
