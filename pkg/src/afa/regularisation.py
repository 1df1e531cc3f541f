"""Policy compaction through an occupancy-measure sparsity penalty.

The count of visited superstates is relaxed to sum(mu^q). Linearising it
around the current occupancy turns it into a per-visit virtual reward that
punishes rarely used superstates; re-solving with that reward and repeating
drives low-traffic nodes to zero occupancy, after which they are dropped.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .mdp import ROOT, PolicyGraph, Problem, popcount, rollout, solve_full


@dataclass
class OccupancyMeasure:
    mu: dict  # mask -> expected visits per episode
    n: int

    def visited(self) -> set:
        return {s for s, m in self.mu.items() if m > 0}

    def __getitem__(self, s):
        return self.mu.get(s, 0.0)


@dataclass(frozen=True)
class RegularisationConfig:
    q: float = 0.5
    alpha: float = 0.05
    max_iters: int = 10
    eps: float = 1e-3
    tol: int = 0  # allowed node-set change still counted as converged
    form: str = "gradient"  # or "literal": +alpha*q*mu^(1-q)

    def __post_init__(self):
        if not 0 < self.q < 1:
            raise ValueError("q must lie in (0, 1)")
        if self.alpha < 0 or self.eps <= 0 or self.max_iters < 1:
            raise ValueError("need alpha >= 0, eps > 0, max_iters >= 1")
        if self.form not in ("gradient", "literal"):
            raise ValueError("form must be 'gradient' or 'literal'")


def occupancy(pg: PolicyGraph, X) -> OccupancyMeasure:
    """Fraction of greedy episodes over the rows of ``X`` visiting each node."""
    _, paths = rollout(pg, X)
    counts = Counter(s for p in paths for s in p)
    n = len(paths)
    return OccupancyMeasure({s: counts.get(s, 0) / n for s in pg.nodes}, n)


def e_reg_q(mu, q: float) -> float:
    vals = np.array(list(mu.mu.values()) if isinstance(mu, OccupancyMeasure) else list(mu), dtype=float)
    vals = vals[vals > 0]
    return float(np.sum(vals ** q))


def virtual_reward(mu: OccupancyMeasure, cfg: RegularisationConfig) -> dict:
    """Per-node reward added on entry.

    Default form is the gradient of the relaxed penalty, -alpha*q*max(mu, eps)^(q-1);
    unvisited nodes get -inf (discarded). The root is always entered, so its
    entry is a constant and never changes a decision.
    """
    out = {}
    for s, m in mu.mu.items():
        if m <= 0:
            out[s] = 0.0 if s == ROOT else -np.inf
        elif cfg.form == "gradient":
            out[s] = -cfg.alpha * cfg.q * max(m, cfg.eps) ** (cfg.q - 1.0)
        else:
            out[s] = cfg.alpha * cfg.q * m ** (1.0 - cfg.q)
    return out


def mean_train_return(pg: PolicyGraph, problem: Problem) -> float:
    final, _ = rollout(pg, problem.X)
    r = np.empty(len(final))
    for s in np.unique(final):
        rows = final == s
        r[rows] = problem.rewards(int(s))[rows]
    return float(r.mean())


@dataclass
class RegularisationResult:
    policy: PolicyGraph
    history: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def regularise(pg: PolicyGraph, cfg: RegularisationConfig, problem: Problem | None = None) -> RegularisationResult:
    """Alternate occupancy measurement and penalised re-solves until the set of
    visited superstates stops changing.

    Nodes never come back once dropped. On hitting ``max_iters`` the
    iterate with the best penalised objective is returned, flagged
    non-converged.
    """
    problem = problem or pg.problem
    X = problem.X

    def stats(it, policy, mu):
        ret = mean_train_return(policy, problem)
        ereg = e_reg_q(mu, cfg.q)
        return dict(iteration=it, n_nodes=len(mu.visited()), mean_return=ret,
                    e_reg=ereg, objective=ret - cfg.alpha * ereg)

    mu = occupancy(pg, X)
    history = [stats(0, pg, mu)]
    if cfg.alpha == 0:
        history[0]["converged"] = True
        return RegularisationResult(pg, history, True, 1)
    policies = [pg]
    current, visited = pg, mu.visited()
    for it in range(1, cfg.max_iters + 1):
        pen = {s: v for s, v in virtual_reward(mu, cfg).items() if s in visited}
        current = solve_full(problem, visited, budget=pg.budget, penalties=pen)
        mu = occupancy(current, X)
        row = stats(it, current, mu)
        policies.append(current)
        new_visited = mu.visited()
        done = len(visited ^ new_visited) <= cfg.tol
        row["converged"] = done
        history.append(row)
        visited = new_visited
        if done:
            return RegularisationResult(current, history, True, it)
    best = max(range(len(history)), key=lambda i: (history[i]["objective"], -i))
    return RegularisationResult(policies[best], history, False, cfg.max_iters)


ALPHA_GRID = (0.01, 0.05, 0.1)


def select_alpha(pg: PolicyGraph, cfg: RegularisationConfig, problem: Problem | None = None,
                 grid=ALPHA_GRID, max_drop=0.01):
    """Walk ``grid`` upward and keep the last alpha whose training return is
    at most ``max_drop`` below the unregularised one (training rows only).
    Returns (alpha, result); (0.0, unregularised result) if none qualifies."""
    problem = problem or pg.problem
    base = mean_train_return(pg, problem)
    best = (0.0, regularise(pg, replace(cfg, alpha=0.0), problem))
    for a in sorted(grid):
        res = regularise(pg, replace(cfg, alpha=a), problem)
        if base - mean_train_return(res.policy, problem) > max_drop:
            break
        best = (a, res)
    return best


@dataclass
class PolicyStats:
    mean_return: float
    n_visited: int
    depth: int
    visits: dict  # mask -> episodes passing through
    finishes: dict  # mask -> episodes ending there


def policy_stats(pg: PolicyGraph, X=None, returns=None) -> PolicyStats:
    """Episode-replay counts on ``X`` (training rows by default).

    ``returns(final_masks) -> per-row return``; defaults to the training
    terminal rewards of the attached problem.
    """
    problem = pg.problem
    if X is None:
        X = problem.X
    final, paths = rollout(pg, X)
    visits = Counter(s for p in paths for s in p)
    finishes = Counter(int(s) for s in final)
    if returns is None and problem is not None and X is problem.X:
        r = np.empty(len(final))
        for s in np.unique(final):
            r[final == s] = problem.rewards(int(s))[final == s]
        mean_return = float(r.mean())
    elif returns is not None:
        mean_return = float(np.mean(returns(final)))
    else:
        mean_return = float("nan")
    depth = max(popcount(s) for s in finishes)
    return PolicyStats(mean_return, len(visits), depth, dict(visits), dict(finishes))
