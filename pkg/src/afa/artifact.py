"""Versioned policy artifacts: one .npz holding arrays plus a JSON header.

Only what greedy decisions and terminal predictions need is stored (node
set, per-(node, action) regressors, transforms, classifier); training-time
caches are not. Writes go through a temporary file, so a failed save never
leaves a partial artifact behind.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .dataset import FeatureGroup, GroupPCA, Scaler
from .errors import DataError
from .estimators import MaskedClassifier, RidgeModel
from .mdp import FINISH, NearestModel, PolicyGraph

FORMAT = "afa-policy"
VERSION = 1


def _akey(a):
    return "f" if a == FINISH else str(a)


def _model_meta(m, arrays, prefix, node_L):
    if isinstance(m, RidgeModel):
        meta = dict(kind="ridge", intercept=float(m.intercept))
        arrays[prefix + "_alpha"] = m.alpha
        arrays[prefix + "_bw"] = np.asarray(m.bandwidths)
        if node_L is not None and np.array_equal(m.landmarks, node_L):
            meta["shared_landmarks"] = True
        else:
            arrays[prefix + "_L"] = m.landmarks
        return meta
    if isinstance(m, NearestModel):
        arrays[prefix + "_L"] = m.landmarks
        arrays[prefix + "_t"] = m.targets
        return dict(kind="nearest")
    raise TypeError("cannot serialise %s" % type(m).__name__)


def _model_load(meta, z, prefix, node_L):
    if meta["kind"] == "nearest":
        return NearestModel(z[prefix + "_L"], z[prefix + "_t"])
    L = node_L if meta.get("shared_landmarks") else z[prefix + "_L"]
    return RidgeModel(L, z[prefix + "_alpha"], meta["intercept"], z[prefix + "_bw"])


def policy_arrays(pg: PolicyGraph, arrays: dict) -> dict:
    """Serialise the node set and per-action regressors; returns the JSON part."""
    nodes = {}
    for s in sorted(pg.nodes):
        prefix = "n%d" % s
        first = pg.q[s][FINISH]
        node_L = getattr(first, "landmarks", None)
        if isinstance(first, RidgeModel):
            arrays[prefix + "_L"] = node_L
        acts = {}
        for a in pg.actions(s):
            acts[_akey(a)] = _model_meta(pg.q[s][a], arrays, "%s_%s" % (prefix, _akey(a)), node_L)
        nodes[str(s)] = acts
    return dict(n_groups=pg.n_groups, offsets=[int(o) for o in pg.offsets],
                costs=[float(c) for c in pg.costs], lam=pg.lam, budget=pg.budget, nodes=nodes)


def policy_from(meta: dict, z) -> PolicyGraph:
    pg = PolicyGraph(meta["n_groups"], np.asarray(meta["offsets"]), np.asarray(meta["costs"]),
                     meta["lam"], nodes={int(s) for s in meta["nodes"]}, budget=meta["budget"])
    for s_key, acts in meta["nodes"].items():
        s = int(s_key)
        prefix = "n%d" % s
        node_L = z[prefix + "_L"] if prefix + "_L" in z else None
        pg.q[s] = {}
        for a_key, m in acts.items():
            a = FINISH if a_key == "f" else int(a_key)
            pg.q[s][a] = _model_load(m, z, "%s_%s" % (prefix, a_key), node_L)
    return pg


def save_model(path, model) -> str:
    """Write a TrainedModel; returns the final path."""
    arrays = {}
    clf = model.classifier
    for k in ("landmarks", "alpha", "bandwidths", "means", "offsets"):
        arrays["clf_" + k] = np.asarray(getattr(clf, k))
    arrays["scaler_mean"] = model.scaler.mean
    arrays["scaler_std"] = model.scaler.std
    for i, p in enumerate(model.pcas):
        arrays["pca%d_mean" % i] = p.mean
        arrays["pca%d_components" % i] = p.components
        arrays["pca%d_evr" % i] = p.explained_variance_ratio
    meta = dict(
        format=FORMAT, version=VERSION, name=model.name, label=model.label,
        groups=[dict(name=g.name, dims=g.dims, cost=g.cost) for g in model.groups],
        columns=list(model.columns),
        pca_groups=[p.group for p in model.pcas],
        classifier=dict(intercept=float(clf.intercept), prior=float(clf.prior)),
        policy=policy_arrays(model.policy, arrays),
        report=model.report,
    )
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    path = str(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_model(path):
    from .pipeline import TrainedModel
    if not os.path.exists(path):
        raise DataError("artifact not found: %s" % path)
    try:
        z = np.load(path, allow_pickle=False)
        meta = json.loads(str(z["meta"]))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError("not a policy artifact: %s (%s)" % (path, exc)) from None
    if meta.get("format") != FORMAT:
        raise DataError("not a policy artifact: %s" % path)
    if meta.get("version") != VERSION:
        raise DataError("artifact version %s unsupported (expected %d)" % (meta.get("version"), VERSION))
    with z:
        groups = tuple(FeatureGroup(i, g["name"], g["dims"], g["cost"])
                       for i, g in enumerate(meta["groups"]))
        pcas = [GroupPCA(g, z["pca%d_mean" % i], z["pca%d_components" % i], z["pca%d_evr" % i])
                for i, g in enumerate(meta["pca_groups"])]
        c = meta["classifier"]
        clf = MaskedClassifier(z["clf_landmarks"], z["clf_alpha"], c["intercept"],
                               z["clf_bandwidths"], z["clf_means"], z["clf_offsets"], c["prior"])
        pg = policy_from(meta["policy"], z)
        scaler = Scaler(z["scaler_mean"], z["scaler_std"])
    return TrainedModel(groups, tuple(meta["columns"]), pcas, scaler, clf, pg,
                        label=meta["label"], name=meta["name"], report=meta["report"])
