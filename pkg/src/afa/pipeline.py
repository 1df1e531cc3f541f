"""Run configuration and the train / evaluate / sweep orchestration shared by
the CLI and the experiment tests."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import dataset as ds
from .errors import ConvergenceError, DataError, SchemaError
from .estimators import MaskedClassifier, classifier_fit, column_bandwidths, kernel_for
from .evaluation import EpisodeTrace, MetricsReport, aggregate, metrics, run_episodes
from .exploration import explore
from .mdp import PolicyGraph, apply_budget, full_lattice, make_problem, solve_full, train_return
from .regularisation import RegularisationConfig, regularise

MAX_FULL_GROUPS = 15
HTA_PCA_MODES = 5


@dataclass
class RunConfig:
    data: str = "heart"           # builtin name (heart, breast, spam, hta) or CSV path
    schema: str | None = None     # required for CSV paths
    pca_modes: int | None = None  # reduce groups wider than this; hta defaults to 5
    lam: float = 1e-3
    costs: str = "schema"         # or "uniform"
    uniform_cost: float = 1.0
    solver: str = "explore"       # or "full" (F <= 15)
    n_max: int = 200
    heuristic: str = "sampling"   # or "random"
    n_samples: int = 16
    rescore: bool = False
    plateau: int | None = None
    regularise: bool = False
    q: float = 0.5
    alpha: float = 0.05
    eps: float = 1e-3
    max_iters: int = 10
    reg_form: str = "gradient"
    rank: int = 200
    ridge: float = 1.0
    clf_rank: int = 200
    clf_ridge: float = 1.0
    folds: int = 10
    budget: int | None = None
    split_kind: str = "holdout"
    split_fraction: float = 0.3
    split_count: int = 1
    seed: int = 0
    strict: bool = False          # non-converged regularisation is an error
    curve: bool = False           # record test return after every exploration step
    output: str = "afa-run"

    def __post_init__(self):
        checks = [
            (self.lam >= 0, "lam must be >= 0"),
            (self.costs in ("schema", "uniform"), "costs must be 'schema' or 'uniform'"),
            (self.uniform_cost >= 0, "uniform_cost must be >= 0"),
            (self.solver in ("explore", "full"), "solver must be 'explore' or 'full'"),
            (self.n_max >= 1, "n_max must be >= 1"),
            (self.heuristic in ("sampling", "random"), "heuristic must be 'sampling' or 'random'"),
            (self.n_samples >= 1, "n_samples must be >= 1"),
            (self.plateau is None or self.plateau >= 1, "plateau must be >= 1"),
            (self.rank >= 1 and self.clf_rank >= 1, "ranks must be >= 1"),
            (self.ridge >= 0 and self.clf_ridge > 0, "need ridge >= 0 and clf_ridge > 0"),
            (self.folds >= 2, "folds must be >= 2"),
            (self.budget is None or self.budget >= 0, "budget must be >= 0"),
            (self.pca_modes is None or self.pca_modes >= 1, "pca_modes must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise SchemaError(msg)
        try:
            self.split_spec()
            self.reg_config()
        except ValueError as exc:
            raise SchemaError(str(exc)) from None
        if not self.is_builtin():
            if self.schema is None:
                raise SchemaError("a schema file is required for CSV data")
            for p in (self.data, self.schema):
                if not os.path.exists(p):
                    raise SchemaError("file not found: %s" % p)

    def is_builtin(self):
        return self.data in ds.BUILTIN or self.data == "hta"

    def split_spec(self) -> ds.SplitSpec:
        return ds.SplitSpec(self.split_kind, self.seed, self.split_fraction, self.split_count)

    def reg_config(self) -> RegularisationConfig:
        return RegularisationConfig(self.q, self.alpha, self.max_iters, self.eps, form=self.reg_form)

    def effective_pca_modes(self):
        if self.pca_modes is None and self.data == "hta":
            return HTA_PCA_MODES
        return self.pca_modes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise SchemaError("unknown config keys: %s" % ", ".join(extra))
        try:
            return cls(**d)
        except TypeError as exc:
            raise SchemaError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except FileNotFoundError:
            raise SchemaError("config not found: %s" % path) from None
        except json.JSONDecodeError as exc:
            raise SchemaError("config %s is not valid JSON: %s" % (path, exc)) from None

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_data(cfg: RunConfig) -> ds.Dataset:
    if cfg.data == "hta":
        d = ds.hta_surrogate(seed=cfg.seed)
    elif cfg.data in ds.BUILTIN:
        d = ds.load_builtin(cfg.data)
    else:
        d = ds.load_csv(cfg.data, cfg.schema)
    if cfg.costs == "uniform":
        d = d.with_costs(cfg.uniform_cost)
    return d


def load_schema(cfg: RunConfig) -> ds.Schema | None:
    if cfg.data in ds.BUILTIN:
        return ds.read_schema(ds.builtin_paths(cfg.data)[1])
    if cfg.schema is not None:
        return ds.read_schema(cfg.schema)
    return None


@dataclass
class TrainedModel:
    """Everything needed to run episodes on raw rows."""

    groups: tuple          # raw FeatureGroups (pre-PCA dims, costs used in training)
    columns: tuple         # raw column names
    pcas: list
    scaler: ds.Scaler
    classifier: MaskedClassifier
    policy: PolicyGraph
    label: str = "label"
    name: str = "data"
    report: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)        # exploration rows
    reg_history: list = field(default_factory=list)  # regularisation rows

    @property
    def group_names(self):
        return [g.name for g in self.groups]

    @property
    def raw_offsets(self):
        return np.concatenate([[0], np.cumsum([g.dims for g in self.groups])]).astype(int)

    def transform(self, values) -> np.ndarray:
        """Raw rows (NaN allowed in unacquired groups) to model space."""
        values = np.atleast_2d(np.asarray(values, dtype=float))
        d = ds.Dataset(self.groups, values, np.zeros(len(values), dtype=int))
        return ds.apply_transforms(d, self.pcas, self.scaler).values

    def episodes(self, values, labels, ids=None) -> list:
        if len(values) == 0:
            raise DataError("no rows to evaluate")
        return run_episodes(self.policy, self.classifier, self.transform(values), labels, ids=ids)

    def evaluate(self, d: ds.Dataset):
        if d.values.shape[1] != self.raw_offsets[-1]:
            raise DataError("data has %d columns, model expects %d"
                            % (d.values.shape[1], self.raw_offsets[-1]))
        traces = self.episodes(d.values, d.labels)
        return traces, metrics(traces, len(self.groups))


def _final_classifier(train: ds.Dataset, cfg: RunConfig) -> MaskedClassifier:
    bw = column_bandwidths(train.values)
    spec = kernel_for(bw, np.arange(train.values.shape[1]), cfg.clf_rank, cfg.clf_ridge, cfg.seed)
    return classifier_fit(train.values, train.labels, train.offsets, spec)


class SplitState:
    """Pieces of one split that depend on neither lambda nor costs: transforms,
    cross-validated accuracies, the Q design cache and the final classifier."""

    def __init__(self, train_raw: ds.Dataset, cfg: RunConfig):
        train_raw.check_trainable()
        self.raw = train_raw
        self.pcas, self.scaler = ds.fit_transforms(train_raw, cfg.effective_pca_modes())
        self.train = ds.apply_transforms(train_raw, self.pcas, self.scaler)
        self.classifier = _final_classifier(self.train, cfg)
        base = make_problem(self.train, cfg.lam, folds=cfg.folds, rank=cfg.rank, ridge=cfg.ridge,
                            clf_rank=cfg.clf_rank, clf_ridge=cfg.clf_ridge, seed=cfg.seed)
        self.cv, self.backend = base.rewards.source, base.backend

    def problem(self, lam, costs=None):
        d = self.train if costs is None else self.train.with_costs(costs)
        return make_problem(d, lam, cv=self.cv, backend=self.backend)


def fit(train_raw: ds.Dataset, cfg: RunConfig, test_raw: ds.Dataset | None = None,
        shared: SplitState | None = None) -> TrainedModel:
    """Train a policy on raw training rows.

    ``test_raw`` is only used when ``cfg.curve`` asks for held-out returns
    along the exploration.
    """
    sh = shared or SplitState(train_raw, cfg)
    problem = sh.problem(cfg.lam, cfg.uniform_cost if cfg.costs == "uniform" else None)
    F = problem.n_groups
    trace = []
    if cfg.solver == "full":
        if F > MAX_FULL_GROUPS:
            raise SchemaError("full-lattice solve limited to %d groups (have %d); use exploration"
                              % (MAX_FULL_GROUPS, F))
        pg = solve_full(problem, full_lattice(F, cfg.budget), budget=cfg.budget)
    else:
        monitor = None
        if cfg.curve and test_raw is not None:
            Xt = ds.apply_transforms(test_raw, sh.pcas, sh.scaler).values

            def monitor(pg):
                ts = run_episodes(pg, sh.classifier, Xt, test_raw.labels)
                return dict(test_return=float(np.mean([t.ret for t in ts])),
                            mean_cost=float(np.mean([t.cost for t in ts])),
                            depth=max(t.depth for t in ts))
        run = explore(problem, cfg.n_max, cfg.heuristic, cfg.n_samples, seed=cfg.seed,
                      budget=cfg.budget, rescore=cfg.rescore, plateau=cfg.plateau, monitor=monitor)
        pg, trace = run.policy, run.trace
    if cfg.budget is not None and pg.budget != cfg.budget:
        pg = apply_budget(pg, cfg.budget)
    report = dict(explored_nodes=pg.n_nodes, train_return=train_return(pg, problem))
    history = []
    if cfg.regularise:
        res = regularise(pg, cfg.reg_config(), problem)
        history = res.history
        if not res.converged and cfg.strict:
            raise ConvergenceError("regularisation did not converge in %d iterations" % cfg.max_iters)
        pg = res.policy
        report.update(reg_converged=res.converged, reg_iterations=res.iterations,
                      reg_train_return=train_return(pg, problem))
    return TrainedModel(train_raw.with_costs(problem.costs).groups, train_raw.columns, sh.pcas, sh.scaler, sh.classifier,
                        pg, name=train_raw.name, report=report, trace=trace, reg_history=history)


@dataclass
class SplitResult:
    split: int
    model: TrainedModel
    traces: list
    report: MetricsReport


def run_splits(d: ds.Dataset, cfg: RunConfig, lams=None) -> dict:
    """Train and evaluate on every split; returns {lam: [SplitResult]}.

    The cross-validated reward table, Q design cache and final classifier
    depend only on the split, so they are shared by all λ values.
    """
    lams = [cfg.lam] if lams is None else list(lams)
    out = {lam: [] for lam in lams}
    for i, (tr, te) in enumerate(ds.split(d, cfg.split_spec())):
        if te.n_rows == 0:
            raise DataError("split %d has an empty test part" % i)
        sh = SplitState(tr, cfg)
        for lam in lams:
            model = fit(tr, replace(cfg, lam=lam), te, sh)
            traces, rep = model.evaluate(te)
            out[lam].append(SplitResult(i, model, traces, rep))
    return out


def metrics_rows(results, names) -> list:
    """One row per split followed by 'mean' and 'std' rows."""
    rows = []
    for r in results:
        row = dict(split=r.split, **r.report.row(names))
        row["policy_nodes"] = r.model.policy.n_nodes
        rows.append(row)
    agg = aggregate([{k: v for k, v in row.items() if k != "split"} for row in rows])
    keys = [k for k in rows[0] if k != "split"]
    rows.append(dict(split="mean", **{k: agg[k] for k in keys}))
    rows.append(dict(split="std", **{k: agg[k + "_std"] for k in keys}))
    return rows


def sweep_rows(by_lam: dict) -> list:
    rows = []
    for lam, results in by_lam.items():
        agg = aggregate([r.report for r in results])
        rows.append(dict(lam=lam, accuracy=agg["accuracy"], accuracy_std=agg["accuracy_std"],
                         mean_cost=agg["mean_cost"], mean_cost_std=agg["mean_cost_std"],
                         auc=agg["auc"], auc_std=agg["auc_std"], mean_return=agg["mean_return"],
                         mean_depth=agg["mean_depth"], n_nodes=agg["n_nodes"],
                         splits=agg["splits"]))
    return rows


def lambda_sweep(d: ds.Dataset, lambdas, cfg: RunConfig) -> list:
    """Mean accuracy / cost per λ over the configured splits."""
    lambdas = list(lambdas)
    if len(lambdas) < 1:
        raise SchemaError("need at least one lambda")
    if any(lam < 0 for lam in lambdas):
        raise SchemaError("lambda must be >= 0")
    return sweep_rows(run_splits(d, cfg, lambdas))


__all__ = ["RunConfig", "TrainedModel", "SplitResult", "EpisodeTrace", "fit", "run_splits",
           "lambda_sweep", "load_data", "load_schema", "metrics_rows", "sweep_rows"]
