"""Grouped-feature datasets: CSV/schema ingestion, scaling, PCA of
multidimensional groups and reproducible train/test splits."""

from __future__ import annotations

import configparser
import csv
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Sequence

import numpy as np

from .errors import DataError, SchemaError

DEFAULT_COST = 1.0
MAX_SPLIT_ATTEMPTS = 100
BUILTIN = ("heart", "breast", "spam")


@dataclass(frozen=True)
class FeatureGroup:
    """One acquirable unit; may span several columns."""

    id: int
    name: str
    dims: int = 1
    cost: float = DEFAULT_COST

    def __post_init__(self):
        if self.dims < 1:
            raise SchemaError("group %r: dims must be >= 1" % self.name)
        if not self.cost >= 0:
            raise SchemaError("group %r: cost must be >= 0" % self.name)


@dataclass(frozen=True, eq=False)
class Dataset:
    groups: tuple
    values: np.ndarray
    labels: np.ndarray
    name: str = "data"
    columns: tuple = ()
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        groups = tuple(self.groups)
        object.__setattr__(self, "groups", groups)
        if [g.id for g in groups] != list(range(len(groups))):
            raise SchemaError("group ids must be contiguous 0..F-1")
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise DataError("values must be a 2-d matrix")
        labels = np.asarray(self.labels)
        if labels.shape != (values.shape[0],):
            raise DataError("one label per row required")
        if not np.isin(labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        offsets = np.concatenate([[0], np.cumsum([g.dims for g in groups])]).astype(int)
        if offsets[-1] != values.shape[1]:
            raise DataError(
                "groups cover %d columns, matrix has %d" % (offsets[-1], values.shape[1]))
        if not self.columns:
            cols = tuple("%s_%d" % (g.name, j) if g.dims > 1 else g.name
                         for g in groups for j in range(g.dims))
            object.__setattr__(self, "columns", cols)
        values.setflags(write=False)
        labels = labels.astype(np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "offsets", offsets)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def costs(self) -> np.ndarray:
        return np.array([g.cost for g in self.groups])

    @property
    def prevalence(self) -> float:
        return float(self.labels.mean())

    def group_columns(self, gid: int) -> np.ndarray:
        return np.arange(self.offsets[gid], self.offsets[gid + 1])

    def mask_columns(self, mask: int) -> np.ndarray:
        """Global column indices of every group in the bitmask, in group order."""
        parts = [self.group_columns(g) for g in range(self.n_groups) if mask >> g & 1]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=int)

    def column_group(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_groups), [g.dims for g in self.groups])

    def mask_cost(self, mask: int) -> float:
        return float(sum(g.cost for g in self.groups if mask >> g.id & 1))

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return replace(self, values=self.values[rows], labels=self.labels[rows])

    def with_costs(self, costs) -> "Dataset":
        costs = np.broadcast_to(np.asarray(costs, dtype=float), (self.n_groups,))
        groups = tuple(replace(g, cost=float(c)) for g, c in zip(self.groups, costs))
        return replace(self, groups=groups)

    def check_trainable(self):
        if self.n_rows < 2:
            raise DataError("need at least 2 rows")
        if len(np.unique(self.labels)) < 2:
            raise DataError("both classes must be present")


# -- ingestion ---------------------------------------------------------------

@dataclass
class Schema:
    label: str
    groups: list  # (name, [columns], cost)
    name: str = "data"


def read_schema(path) -> Schema:
    """Parse an INI schema::

        [dataset]
        name = heart
        [label]
        column = disease
        [groups]
        age = age ; cost=1.0
        mitral = mv_0, mv_1, mv_2 ; cost=2.5
    """
    if not os.path.exists(path):
        raise SchemaError("schema file not found: %s" % path)
    cp = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",),
                                   inline_comment_prefixes=None, interpolation=None)
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise SchemaError("unreadable schema %s: %s" % (path, exc)) from exc
    if not cp.has_option("label", "column"):
        raise SchemaError("schema needs [label] column = <name>")
    if not cp.has_section("groups") or not cp.items("groups"):
        raise SchemaError("schema needs a non-empty [groups] section")
    groups = []
    for gname, spec in cp.items("groups"):
        cols, _, rest = spec.partition(";")
        cols = [c.strip() for c in cols.split(",") if c.strip()]
        if not cols:
            raise SchemaError("group %r lists no columns" % gname)
        cost = DEFAULT_COST
        rest = rest.strip()
        if rest:
            key, _, val = rest.partition("=")
            if key.strip() != "cost":
                raise SchemaError("group %r: expected 'cost=<value>'" % gname)
            try:
                cost = float(val)
            except ValueError:
                raise SchemaError("group %r: bad cost %r" % (gname, val)) from None
        groups.append((gname, cols, cost))
    name = cp.get("dataset", "name", fallback=os.path.splitext(os.path.basename(path))[0])
    return Schema(label=cp.get("label", "column").strip(), groups=groups, name=name)


def load_csv(path, schema) -> Dataset:
    """Load a header-first CSV into a Dataset laid out in schema group order.

    ``schema`` is a Schema or a path to a schema file. Columns the schema does
    not mention are ignored.
    """
    if not isinstance(schema, Schema):
        schema = read_schema(schema)
    if not os.path.exists(path):
        raise DataError("data file not found: %s" % path)
    seen = {schema.label: "label"}
    for gname, cols, _ in schema.groups:
        for c in cols:
            if c in seen:
                raise SchemaError("column %r assigned twice (%s, %s)" % (c, seen[c], gname))
            seen[c] = gname
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty file: %s" % path) from None
        rows = [r for r in reader if r]
    index = {h: i for i, h in enumerate(header)}
    missing = [c for c in seen if c not in index]
    if missing:
        raise SchemaError("columns not in CSV header: %s" % ", ".join(missing))
    order = [c for _, cols, _ in schema.groups for c in cols]
    values = np.empty((len(rows), len(order)))
    labels = np.empty(len(rows))
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError("line %d: expected %d fields, got %d" % (r + 2, len(header), len(row)))
        try:
            values[r] = [float(row[index[c]]) for c in order]
            labels[r] = float(row[index[schema.label]])
        except ValueError as exc:
            raise DataError("line %d: non-numeric cell (%s)" % (r + 2, exc)) from None
    if not np.isfinite(values).all():
        raise DataError("non-finite values in %s" % path)
    if not np.isin(labels, (0.0, 1.0)).all():
        bad = labels[~np.isin(labels, (0.0, 1.0))][0]
        raise DataError("label %r not in {0,1}" % bad)
    groups = [FeatureGroup(i, g, len(cols), cost) for i, (g, cols, cost) in enumerate(schema.groups)]
    return Dataset(groups, values, labels.astype(int), name=schema.name, columns=tuple(order))


def builtin_paths(name: str):
    if name not in BUILTIN:
        raise DataError("unknown builtin dataset %r (have %s)" % (name, ", ".join(BUILTIN)))
    base = resources.files("afa") / "data"
    return str(base / (name + ".csv")), str(base / (name + ".schema"))


def load_builtin(name: str) -> Dataset:
    """Bundled UCI datasets: heart (with dollar costs), breast, spam."""
    return load_csv(*builtin_paths(name))


def hta_surrogate(n: int = 248, n_samples: int = 40, prevalence: float = 0.7,
                  seed: int = 0) -> Dataset:
    """Synthetic stand-in for five echocardiographic waveform modalities.

    Every group is a ``n_samples``-point cycle. Positive cases carry one of three
    abnormality patterns, each visible in a different subset of modalities, so
    the best modality to acquire depends on the instance. The mitral inflow
    signal sees two of the three patterns and is the cheapest.
    """
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, n_samples)
    y = (rng.random(n) < prevalence).astype(int)
    pattern = np.where(y == 1, rng.integers(0, 3, n), -1)
    severity = np.where(y == 1, rng.uniform(0.6, 1.4, n), 0.0)

    def bump(centre, width, amp):
        return amp[:, None] * np.exp(-0.5 * ((t[None, :] - centre[:, None]) / width) ** 2)

    def jitter(scale):
        return scale * rng.standard_normal(n)

    # E/A inversion on mitral inflow for patterns 0 and 1
    ea = severity * np.isin(pattern, (0, 1))
    mitral = bump(0.55 + jitter(0.01), 0.05, 1.0 - 0.4 * ea + jitter(0.15)) \
        + bump(0.85 + jitter(0.01), 0.04, 0.6 + 0.4 * ea + jitter(0.15))
    # higher ejection peak for pattern 1
    aortic = bump(0.2 + jitter(0.01) - 0.03 * severity * (pattern == 1), 0.06,
                  1.0 + 0.35 * severity * (pattern == 1) + jitter(0.15))
    # reduced early-diastolic tissue velocity for pattern 0
    tdi = bump(0.15 + jitter(0.01), 0.04, 0.8 + jitter(0.12)) \
        - bump(0.55 + jitter(0.01), 0.05, 1.0 - 0.35 * severity * (pattern == 0) + jitter(0.15))
    # global strain: weakly informative for everyone
    strain = -bump(0.35 + jitter(0.02), 0.15, 1.0 - 0.12 * severity + jitter(0.15))
    # septal strain: the only view of pattern 2
    septal = -bump(0.35 + jitter(0.02) + 0.06 * severity * (pattern == 2), 0.13,
                   1.0 - 0.45 * severity * (pattern == 2) + jitter(0.15))
    waves = [mitral, aortic, tdi, strain, septal]
    waves = [w + 0.05 * rng.standard_normal(w.shape) for w in waves]
    names = ["mitral_doppler", "aortic_doppler", "tdi_basal", "strain_global", "strain_septal"]
    costs = [1.0, 1.0, 1.0, 1.0, 1.0]
    groups = [FeatureGroup(i, nm, n_samples, c) for i, (nm, c) in enumerate(zip(names, costs))]
    return Dataset(groups, np.hstack(waves), y, name="hta_surrogate")


# -- transforms --------------------------------------------------------------

@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, d: Dataset) -> Dataset:
        return replace(d, values=(d.values - self.mean) / self.std)

    def inverse(self, values):
        return np.asarray(values) * self.std + self.mean

    def apply_values(self, values):
        return (np.asarray(values, dtype=float) - self.mean) / self.std


def standardize(d: Dataset, fit_rows=None):
    """Z-score every column; constant columns map to 0 with std recorded as 1."""
    ref = d.values if fit_rows is None else d.values[np.asarray(fit_rows)]
    mean = ref.mean(axis=0)
    std = ref.std(axis=0)
    std = np.where(std > 1e-12 * np.maximum(1.0, np.abs(mean)), std, 1.0)
    scaler = Scaler(mean, std)
    return scaler.apply(d), scaler


@dataclass(frozen=True)
class GroupPCA:
    group: int
    mean: np.ndarray
    components: np.ndarray  # k x dims
    explained_variance_ratio: np.ndarray

    def transform(self, block):
        return (block - self.mean) @ self.components.T


def fit_group_pca(d: Dataset, group: int, k: int, fit_rows=None) -> GroupPCA:
    g = d.groups[group]
    if g.dims <= 1:
        raise SchemaError("group %r is scalar; nothing to reduce" % g.name)
    if not 1 <= k <= g.dims:
        raise SchemaError("k=%d outside 1..%d for group %r" % (k, g.dims, g.name))
    block = d.values[:, d.group_columns(group)]
    if fit_rows is not None:
        block = block[np.asarray(fit_rows)]
    mean = block.mean(axis=0)
    _, s, vt = np.linalg.svd(block - mean, full_matrices=False)
    # sign convention: largest-magnitude loading positive
    signs = np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(axis=1)])
    vt = vt * np.where(signs == 0, 1.0, signs)[:, None]
    var = s ** 2
    total = var.sum()
    ratio = var / total if total > 0 else np.zeros_like(var)
    return GroupPCA(group, mean, vt[:k], ratio[:k])


def apply_group_pca(d: Dataset, pca: GroupPCA) -> Dataset:
    cols = d.group_columns(pca.group)
    scores = pca.transform(d.values[:, cols])
    k = scores.shape[1]
    values = np.hstack([d.values[:, :cols[0]], scores, d.values[:, cols[-1] + 1:]])
    g = d.groups[pca.group]
    groups = list(d.groups)
    groups[pca.group] = replace(g, dims=k)
    names = list(d.columns)
    names[cols[0]:cols[-1] + 1] = ["%s_pc%d" % (g.name, j) for j in range(k)]
    return replace(d, groups=tuple(groups), values=values, columns=tuple(names))


def pca_reduce_group(d: Dataset, group: int, k: int, fit_rows=None) -> Dataset:
    """Replace a multidimensional group by its first ``k`` principal scores.

    Components are fit on ``fit_rows`` only (all rows when None) and applied
    to every row.
    """
    return apply_group_pca(d, fit_group_pca(d, group, k, fit_rows))


# -- splitting ---------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """``kind`` is 'holdout' (test ``fraction``, ``count`` repeats),
    'bootstrap' (``count`` repetitions, out-of-bag test) or 'kfold'."""

    kind: str = "holdout"
    seed: int = 0
    fraction: float = 0.3
    count: int = 1

    def __post_init__(self):
        if self.kind not in ("holdout", "bootstrap", "kfold"):
            raise SchemaError("unknown split kind %r" % self.kind)
        if self.kind == "holdout" and not 0.0 < self.fraction < 1.0:
            raise SchemaError("holdout fraction must be in (0, 1)")
        if self.kind in ("bootstrap", "kfold") and self.count < 2:
            raise SchemaError("%s count must be >= 2" % self.kind)
        if self.count < 1:
            raise SchemaError("count must be >= 1")


def _both_classes(labels):
    return labels.min() != labels.max()


def split_indices(labels, spec: SplitSpec) -> list:
    """(train_rows, test_rows) index pairs; pure function of (labels, spec)."""
    labels = np.asarray(labels)
    n = len(labels)
    out = []
    if spec.kind == "kfold":
        if spec.count > n:
            raise DataError("more folds than rows")
        for attempt in range(MAX_SPLIT_ATTEMPTS):
            perm = np.random.default_rng([spec.seed, attempt]).permutation(n)
            folds = np.array_split(perm, spec.count)
            pairs = [(np.sort(np.setdiff1d(perm, f)), np.sort(f)) for f in folds]
            if all(_both_classes(labels[tr]) for tr, _ in pairs):
                return pairs
        raise DataError("no k-fold partition with both classes in every train part")
    for rep in range(spec.count):
        for attempt in range(MAX_SPLIT_ATTEMPTS):
            rng = np.random.default_rng([spec.seed, rep, attempt])
            if spec.kind == "holdout":
                perm = rng.permutation(n)
                n_test = max(1, int(round(spec.fraction * n)))
                if n_test >= n:
                    raise DataError("holdout leaves no training rows")
                train, test = np.sort(perm[n_test:]), np.sort(perm[:n_test])
            else:
                train = rng.integers(0, n, n)
                test = np.setdiff1d(np.arange(n), train)
                if len(test) == 0:
                    continue
            if _both_classes(labels[train]):
                out.append((train, test))
                break
        else:
            raise DataError("could not draw a train part with both classes "
                            "after %d attempts" % MAX_SPLIT_ATTEMPTS)
    return out


def split(d: Dataset, spec: SplitSpec) -> list:
    return [(d.take(tr), d.take(te)) for tr, te in split_indices(d.labels, spec)]


def fit_transforms(train: Dataset, pca_modes: int | None = None):
    """PCA for every group wider than ``pca_modes``, then a scaler, all fit on ``train``."""
    pcas = []
    if pca_modes:
        for g in train.groups:
            if g.dims > pca_modes:
                pca = fit_group_pca(train, g.id, pca_modes)
                pcas.append(pca)
                train = apply_group_pca(train, pca)
    _, scaler = standardize(train)
    return pcas, scaler


def apply_transforms(d: Dataset, pcas, scaler: Scaler) -> Dataset:
    for pca in pcas:
        d = apply_group_pca(d, pca)
    return scaler.apply(d)


def prepare(train: Dataset, test: Dataset | None = None, pca_modes: int | None = None):
    """Fit PCA on multidimensional groups and scaling on ``train``, apply to both."""
    pcas, scaler = fit_transforms(train, pca_modes)
    train = apply_transforms(train, pcas, scaler)
    if test is not None:
        test = apply_transforms(test, pcas, scaler)
    return train, test, scaler


def describe(d: Dataset) -> dict:
    return {
        "name": d.name,
        "rows": d.n_rows,
        "groups": d.n_groups,
        "columns": d.values.shape[1],
        "prevalence": round(d.prevalence, 4),
    }


def group_names(d: Dataset) -> Sequence[str]:
    return [g.name for g in d.groups]
