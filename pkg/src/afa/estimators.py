"""Kernel backends: per-column RBF Gram matrices, (Nystrom) kernel ridge
regression for Q-values and the shared-weight masked kernel logistic
classifier that produces terminal accuracies."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import linalg

from .errors import ConvergenceError, DataError, IllConditioned

BANDWIDTH_FLOOR = 1e-6
MAX_BANDWIDTH_ROWS = 2000
EIG_RTOL = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    bandwidths: np.ndarray
    nystrom_rank: Union[int, str] = 200
    ridge: float = 1.0
    seed: int = 0

    def __post_init__(self):
        bw = np.atleast_1d(np.asarray(self.bandwidths, dtype=float))
        if (bw <= 0).any():
            raise ValueError("bandwidths must be positive")
        object.__setattr__(self, "bandwidths", bw)
        if self.nystrom_rank != "exact" and int(self.nystrom_rank) < 1:
            raise ValueError("nystrom_rank must be positive or 'exact'")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")

    def select(self, cols) -> "KernelSpec":
        return KernelSpec(self.bandwidths[cols], self.nystrom_rank, self.ridge, self.seed)


def _scaled_sqdist(X, Y, bandwidths):
    Xs = X / bandwidths
    Ys = Y / bandwidths
    d2 = (Xs * Xs).sum(1)[:, None] + (Ys * Ys).sum(1)[None, :] - 2.0 * Xs @ Ys.T
    np.maximum(d2, 0.0, out=d2)
    return d2


def rbf_gram(X, Y, spec) -> np.ndarray:
    """K[i, j] = exp(-sum_c (X[i,c] - Y[j,c])^2 / (2 bw_c^2)).

    ``spec`` is a KernelSpec or a bandwidth vector.
    """
    bw = spec.bandwidths if isinstance(spec, KernelSpec) else np.asarray(spec, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != Y.shape[1] or bw.shape != (X.shape[1],):
        raise ValueError("dimension mismatch: X %s, Y %s, %d bandwidths"
                         % (X.shape, Y.shape, bw.size))
    if X.shape[1] == 0:
        return np.ones((X.shape[0], Y.shape[0]))
    return np.exp(-0.5 * _scaled_sqdist(X, Y, bw))


def _pair_index(n):
    return np.triu_indices(n, k=1)


def _bandwidth_rows(X):
    n = X.shape[0]
    if n <= MAX_BANDWIDTH_ROWS:
        return X
    idx = np.sort(np.random.default_rng(0).choice(n, MAX_BANDWIDTH_ROWS, replace=False))
    return X[idx]


def median_bandwidth(X) -> np.ndarray:
    """Per-column median of |X[i,c] - X[j,c]| over pairs i < j, floored at 1e-6.

    Above 2000 rows a fixed (seed 0) subsample of 2000 rows is used.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 2:
        raise DataError("need at least 2 rows for a bandwidth")
    X = _bandwidth_rows(X)
    i, j = _pair_index(X.shape[0])
    out = np.empty(X.shape[1])
    for c in range(X.shape[1]):
        out[c] = np.median(np.abs(X[i, c] - X[j, c]))
    return np.maximum(out, BANDWIDTH_FLOOR)


def column_bandwidths(X) -> np.ndarray:
    """Median bandwidths, falling back to the mean pairwise gap for sparse
    columns whose median gap is zero but which are not constant."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    bw = median_bandwidth(X)
    low = np.flatnonzero(bw <= BANDWIDTH_FLOOR)
    if low.size:
        Xs = _bandwidth_rows(X)
        i, j = _pair_index(Xs.shape[0])
        for c in low:
            gap = np.abs(Xs[i, c] - Xs[j, c]).mean()
            if gap > 0:
                bw[c] = gap
    return bw


def kernel_for(base_bandwidths, cols, rank=200, ridge=1.0, seed=0) -> KernelSpec:
    """KernelSpec on a column subset; per-column widths grow with sqrt(#cols)
    so the summed squared distance stays O(1) as columns are added."""
    cols = np.asarray(cols, dtype=int)
    scale = np.sqrt(max(len(cols), 1))
    return KernelSpec(np.asarray(base_bandwidths)[cols] * scale, rank, ridge, seed)


def landmark_rows(n, rank, seed=0) -> np.ndarray:
    """Uniform landmark subsample, sorted; all rows when rank >= n."""
    if rank == "exact" or int(rank) >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, int(rank), replace=False))


def nystrom_map(K_mm):
    """Projection P with K_nm @ P the Nystrom feature map (drops null directions)."""
    evals, evecs = linalg.eigh(K_mm)
    keep = evals > EIG_RTOL * max(evals[-1], 1e-300)
    return evecs[:, keep] / np.sqrt(evals[keep])


# -- kernel ridge ------------------------------------------------------------

@dataclass
class RidgeModel:
    """Prediction = K(x, landmarks) @ alpha + intercept."""

    landmarks: np.ndarray
    alpha: np.ndarray
    intercept: float
    bandwidths: np.ndarray
    columns: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] == 0:
            return np.zeros(0)
        if X.shape[1] != self.landmarks.shape[1]:
            raise ValueError("expected %d columns, got %d" % (self.landmarks.shape[1], X.shape[1]))
        if self.landmarks.shape[1] == 0:
            return np.full(X.shape[0], self.intercept)
        return rbf_gram(X, self.landmarks, self.bandwidths) @ self.alpha + self.intercept


class RidgeDesign:
    """Kernel ridge machinery for one input matrix, reusable for many targets.

    All Q-estimators leaving a superstate regress on the same rows, so the
    kernel factorisation is computed once and each target costs a solve.
    """

    def __init__(self, X, spec: KernelSpec, center=True):
        X = np.asarray(X, dtype=float)
        self.n, self.d = X.shape
        self.spec = spec
        self.center = center
        if self.d == 0:
            self.landmarks = np.zeros((0, 0))
            self.mode = "constant"
            return
        if spec.nystrom_rank == "exact":
            self.mode = "exact"
            self.landmarks = X
            self.K = rbf_gram(X, X, spec)
            A = self.K + spec.ridge * np.eye(self.n)
            try:
                self.factor = linalg.cho_factor(A, check_finite=False)
            except linalg.LinAlgError:
                raise IllConditioned("kernel system is singular; use ridge > 0 "
                                     "or remove duplicate rows") from None
            if spec.ridge == 0 and np.linalg.cond(A) > 1e12:
                raise IllConditioned("kernel system is singular; use ridge > 0 "
                                     "or remove duplicate rows")
        else:
            self.mode = "nystrom"
            idx = landmark_rows(self.n, spec.nystrom_rank, spec.seed)
            self.landmarks = X[idx]
            K_nm = rbf_gram(X, self.landmarks, spec)
            self.P = nystrom_map(K_nm[idx])
            self.Phi = K_nm @ self.P
            A = self.Phi.T @ self.Phi + spec.ridge * np.eye(self.Phi.shape[1])
            try:
                self.factor = linalg.cho_factor(A, check_finite=False)
            except linalg.LinAlgError:
                raise IllConditioned("Nystrom normal equations are singular; "
                                     "use ridge > 0") from None

    def _solve(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n,):
            raise ValueError("target length %s != %d rows" % (y.shape, self.n))
        if not np.isfinite(y).all():
            raise ValueError("non-finite regression targets")
        c = float(y.mean()) if self.center else 0.0
        r = y - c
        if self.mode == "constant":
            return np.zeros(0), c, None
        if self.mode == "exact":
            alpha = linalg.cho_solve(self.factor, r, check_finite=False)
            return alpha, c, None
        beta = linalg.cho_solve(self.factor, self.Phi.T @ r, check_finite=False)
        return self.P @ beta, c, beta

    def fit(self, y) -> RidgeModel:
        alpha, c, _ = self._solve(y)
        return RidgeModel(self.landmarks, alpha, c, self.spec.bandwidths)

    def fit_predict(self, y):
        """Fitted model plus its predictions on the design rows."""
        alpha, c, beta = self._solve(y)
        model = RidgeModel(self.landmarks, alpha, c, self.spec.bandwidths)
        if self.mode == "constant":
            fitted = np.full(self.n, c)
        elif self.mode == "exact":
            fitted = self.K @ alpha + c
        else:
            fitted = self.Phi @ beta + c
        return model, fitted


def ridge_fit(X, y, spec: KernelSpec, center=True) -> RidgeModel:
    """Exact mode solves (K + ridge I) alpha = y - mean(y); Nystrom mode solves
    the ridge problem in the rank-``nystrom_rank`` landmark feature space."""
    return RidgeDesign(X, spec, center=center).fit(y)


def ridge_predict(m: RidgeModel, X) -> np.ndarray:
    return m.predict(X)


# -- masked kernel logistic classifier ---------------------------------------

@dataclass
class MaskedClassifier:
    """Kernel logistic model over all columns, evaluated on partial rows by
    substituting population means for columns not yet acquired."""

    landmarks: np.ndarray
    alpha: np.ndarray
    intercept: float
    bandwidths: np.ndarray
    means: np.ndarray
    offsets: np.ndarray  # group g owns columns offsets[g]:offsets[g+1]
    prior: float  # training prevalence, returned when nothing is acquired

    @property
    def n_groups(self):
        return len(self.offsets) - 1

    def acquired_columns(self, mask: int) -> np.ndarray:
        out = np.zeros(self.offsets[-1], dtype=bool)
        for g in range(self.n_groups):
            if mask >> g & 1:
                out[self.offsets[g]:self.offsets[g + 1]] = True
        return out

    def decision(self, X, mask: int) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if mask == 0:
            p = min(max(self.prior, 1e-12), 1 - 1e-12)
            return np.full(X.shape[0], np.log(p / (1 - p)))
        keep = self.acquired_columns(mask)
        Xm = np.where(keep, X, self.means)
        return rbf_gram(Xm, self.landmarks, self.bandwidths) @ self.alpha + self.intercept

    def predict_proba(self, X, mask: int) -> np.ndarray:
        return _sigmoid(self.decision(X, mask))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _irls(Phi, y, ridge, max_iter=100, tol=1e-6):
    """Newton / IRLS for L2-penalised logistic regression with free intercept."""
    n, r = Phi.shape
    A = np.hstack([Phi, np.ones((n, 1))])
    w = np.zeros(r + 1)
    pen = np.full(r + 1, ridge)
    pen[-1] = 0.0

    def objective(w):
        z = A @ w
        return np.sum(np.logaddexp(0.0, z) - y * z) + 0.5 * np.sum(pen * w * w)

    f = objective(w)
    gnorm = np.inf
    for _ in range(max_iter):
        p = _sigmoid(A @ w)
        g = A.T @ (p - y) + pen * w
        gnorm = np.linalg.norm(g) / n
        if gnorm < tol:
            return w, gnorm
        s = np.maximum(p * (1 - p), 1e-12)
        H = (A * s[:, None]).T @ A + np.diag(pen) + 1e-10 * np.eye(r + 1)
        step = linalg.solve(H, g, assume_a="pos", check_finite=False)
        t = 1.0
        while t > 1e-8:
            w_new = w - t * step
            f_new = objective(w_new)
            if f_new <= f:
                break
            t *= 0.5
        w, f = w_new, f_new
    p = _sigmoid(A @ w)
    gnorm = np.linalg.norm(A.T @ (p - y) + pen * w) / n
    if gnorm < tol:
        return w, gnorm
    raise ConvergenceError("logistic fit did not converge in %d iterations "
                           "(gradient norm %.3g)" % (max_iter, gnorm), grad_norm=gnorm)


def classifier_fit(X, y, offsets, spec: KernelSpec, max_iter=100, tol=1e-6) -> MaskedClassifier:
    """Fit on full rows. ``spec.bandwidths`` covers every column."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.min() == y.max():
        raise DataError("classifier needs both classes")
    idx = landmark_rows(X.shape[0], spec.nystrom_rank, spec.seed)
    L = X[idx]
    K_nm = rbf_gram(X, L, spec)
    P = nystrom_map(K_nm[idx])
    w, _ = _irls(K_nm @ P, y, spec.ridge, max_iter, tol)
    return MaskedClassifier(L, P @ w[:-1], float(w[-1]), spec.bandwidths,
                            X.mean(axis=0), np.asarray(offsets), float(y.mean()))


def classifier_predict(m: MaskedClassifier, x, acquired: int) -> float:
    """Probability of class 1 for one full-width row given the acquired mask."""
    return float(m.predict_proba(np.asarray(x, dtype=float)[None, :], acquired)[0])


# -- cross-validated terminal accuracy ---------------------------------------

def stratified_folds(labels, k, seed=0, attempts=100) -> np.ndarray:
    """Fold id per row; classes dealt round-robin after a seeded shuffle."""
    labels = np.asarray(labels)
    n = len(labels)
    if not 2 <= k <= n:
        raise DataError("fold count %d outside 2..%d" % (k, n))
    for attempt in range(attempts):
        rng = np.random.default_rng([seed, attempt])
        fold = np.empty(n, dtype=int)
        start = 0
        for cls in (0, 1):
            rows = np.flatnonzero(labels == cls)
            rows = rows[rng.permutation(len(rows))]
            fold[rows] = (start + np.arange(len(rows))) % k
            start += len(rows)
        if all(len(np.unique(labels[fold != f])) == 2 for f in range(k)):
            return fold
    raise DataError("could not build %d folds with both classes in every training part" % k)


class CrossValClassifier:
    """Held-out correctness of every training row under any acquisition mask.

    One shared-weight classifier is fit per fold (on all columns); a mask only
    changes which columns are replaced by the fold's training means, so each
    superstate costs a prediction pass, never a refit. Results are cached.
    """

    def __init__(self, X, y, offsets, base_bandwidths, folds=10, rank=200,
                 ridge=1.0, seed=0):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y).astype(int)
        self.offsets = np.asarray(offsets)
        self.n_groups = len(self.offsets) - 1
        self.fold = stratified_folds(self.y, folds, seed)
        D = self.X.shape[1]
        spec = kernel_for(base_bandwidths, np.arange(D), rank, ridge, seed)
        self.spec = spec
        self.models = []
        self._parts = []
        for f in range(folds):
            tr = self.fold != f
            te = np.flatnonzero(~tr)
            m = classifier_fit(self.X[tr], self.y[tr], self.offsets, spec)
            self.models.append(m)
            bw = m.bandwidths
            Z = self.X[te] / bw
            Mz = m.means / bw
            Lz = m.landmarks / bw
            # -0.5 * |z - l|^2 with unacquired columns at the mean splits into
            # a landmark-only term plus per-column terms; see _finish
            self._parts.append(dict(
                rows=te,
                delta=Z - Mz,
                hsq=-0.5 * (Z * Z - Mz * Mz),
                LzT=np.ascontiguousarray(Lz.T),
                nbase=-0.5 * ((Mz - Lz) ** 2).sum(1),
                prior_logit=m.decision(np.zeros((1, D)), 0)[0],
            ))
        self._local = np.empty(len(self.y), dtype=int)
        for part in self._parts:
            self._local[part["rows"]] = np.arange(len(part["rows"]))
        self._cache = {}

    def column_mask(self, mask):
        out = np.zeros(self.offsets[-1])
        for g in range(self.n_groups):
            if mask >> g & 1:
                out[self.offsets[g]:self.offsets[g + 1]] = 1.0
        return out

    @staticmethod
    def _finish(E, part, m):
        """E holds sum over acquired columns of delta*Lz - 0.5*(z^2 - mean^2);
        adding the landmark term gives -0.5 * squared distance. In place."""
        E += part["nbase"]
        np.minimum(E, 0.0, out=E)
        np.exp(E, out=E)
        return E @ m.alpha + m.intercept

    def _partial(self, part, rows, cols):
        return part["delta"][rows][:, cols] @ part["LzT"][cols] \
            + part["hsq"][rows][:, cols].sum(1)[:, None]

    def _decisions(self, masks):
        """Held-out decision values, shape (len(masks), N)."""
        masks = list(masks)
        out = np.empty((len(masks), len(self.y)))
        for i, s in enumerate(masks):
            cols = np.flatnonzero(self.column_mask(s))
            for m, part in zip(self.models, self._parts):
                if s == 0:
                    out[i, part["rows"]] = part["prior_logit"]
                    continue
                E = self._partial(part, slice(None), cols)
                out[i, part["rows"]] = self._finish(E, part, m)
        return out

    def accuracy_children(self, parent: int, groups) -> dict:
        """Cache and return accuracies of ``parent | 1 << g`` for each g.

        Siblings share the parent's landmark distances; each child only adds
        the contribution of its own group's columns.
        """
        groups = [g for g in groups if (parent | 1 << g) not in self._cache]
        if groups:
            cols = np.flatnonzero(self.column_mask(parent))
            dec = np.empty((len(groups), len(self.y)))
            for m, part in zip(self.models, self._parts):
                Ep = self._partial(part, slice(None), cols)
                for i, g in enumerate(groups):
                    c = np.arange(self.offsets[g], self.offsets[g + 1])
                    E = Ep + self._partial(part, slice(None), c)
                    dec[i, part["rows"]] = self._finish(E, part, m)
            correct = np.where(self.y == 1, dec > 0, dec < 0).astype(float)
            for g, acc in zip(groups, correct):
                acc.setflags(write=False)
                self._cache[parent | 1 << g] = acc
        return {parent | 1 << g: self._cache[parent | 1 << g] for g in groups}

    def accuracy_pairs(self, items, chunk=512) -> list:
        """Held-out correctness for many (mask, rows) requests at once (not
        cached). One pass per fold covers every request."""
        items = [(m, np.asarray(r, dtype=int)) for m, r in items]
        if not items:
            return []
        rows = np.concatenate([r for _, r in items])
        which = np.repeat(np.arange(len(items)), [len(r) for _, r in items])
        A = np.array([self.column_mask(m) for m, _ in items])
        empty = np.array([m == 0 for m, _ in items])
        dec = np.empty(len(rows))
        fold = self.fold[rows]
        for f in np.unique(fold):
            part, m = self._parts[f], self.models[f]
            sel_all = np.flatnonzero(fold == f)
            for j in range(0, len(sel_all), chunk):
                sel = sel_all[j:j + chunk]
                loc = self._local[rows[sel]]
                a = A[which[sel]]
                E = (part["delta"][loc] * a) @ part["LzT"]
                E += (part["hsq"][loc] * a).sum(1)[:, None]
                d = self._finish(E, part, m)
                dec[sel] = np.where(empty[which[sel]], part["prior_logit"], d)
        y = self.y[rows]
        correct = np.where(y == 1, dec > 0, dec < 0).astype(float)
        return np.split(correct, np.cumsum([len(r) for _, r in items])[:-1])

    def accuracy_rows(self, mask: int, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=int)
        if mask in self._cache:
            return self._cache[mask][rows]
        return self.accuracy_pairs([(mask, rows)])[0]

    def accuracy_many(self, masks, chunk=64) -> dict:
        todo = [s for s in dict.fromkeys(masks) if s not in self._cache]
        for i in range(0, len(todo), chunk):
            batch = todo[i:i + chunk]
            dec = self._decisions(batch)
            correct = np.where(self.y == 1, dec > 0, dec < 0).astype(float)
            for s, acc in zip(batch, correct):
                acc.setflags(write=False)
                self._cache[s] = acc
        return {s: self._cache[s] for s in masks}

    def accuracy(self, mask: int) -> np.ndarray:
        if mask not in self._cache:
            self.accuracy_many([mask])
        return self._cache[mask]

    def held_out_proba(self, mask: int) -> np.ndarray:
        return _sigmoid(self._decisions([mask])[0])

    @property
    def n_cached(self):
        return len(self._cache)


def cv_accuracy(d, s: int, folds=10, rank=200, ridge=1.0, seed=0) -> np.ndarray:
    """acc[i] = 1 iff row i is classified correctly (threshold 0.5, ties wrong)
    by the fold model that did not see it, using only the groups in ``s``."""
    d.check_trainable()
    cv = CrossValClassifier(d.values, d.labels, d.offsets, column_bandwidths(d.values),
                            folds=folds, rank=rank, ridge=ridge, seed=seed)
    return cv.accuracy(s).copy()
