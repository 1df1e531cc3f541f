import csv
import io
import json
import logging

import numpy as np
import pytest

from afa import dataset as ds
from afa.artifact import load_model
from afa.cli import EXIT_ABORT, dedupe, main, session
from afa.mdp import FINISH, ROOT

QUICK = ["--n-max", "20", "--rank", "60", "--clf-rank", "60", "--folds", "5"]


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    rc = main(["train", "--data", "heart", "--lam", "0.001", "--seed", "7", "--curve",
               "--regularise", "--figures", "-o", str(out)] + QUICK)
    assert rc == 0
    return out


def test_train_outputs(trained):
    for name in ("config.json", "policy.npz", "report.json", "metrics.csv", "traces.csv",
                 "exploration.csv", "regularisation.csv", "policy.dot",
                 "figures/usage.png", "figures/exploration.png", "figures/regularisation.png"):
        assert (trained / name).exists(), name
    report = json.loads((trained / "report.json").read_text())
    split = report["splits"][0]
    for key in ("explored_nodes", "mean_cost", "auc", "accuracy", "reg_iterations"):
        assert np.isfinite(split[key])
    assert json.loads((trained / "config.json").read_text())["seed"] == 7
    m = rows(trained / "metrics.csv")
    assert [r["split"] for r in m] == ["0", "mean", "std"]
    assert "test_return" in rows(trained / "exploration.csv")[0]
    assert (trained / "figures/usage.png").read_bytes()[:4] == b"\x89PNG"


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(dict(data="breast", lam=0.5, n_max=5, rank=40, clf_rank=40, folds=5)))
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--lam", "0.01", "-o", str(out)]) == 0
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["lam"] == 0.01 and echoed["data"] == "breast" and echoed["n_max"] == 5


def toy_csv(tmp_path, n=60, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3))
    y = (X[:, 0] + X[:, 1] * X[:, 2] > 0).astype(int)
    lines = ["a,b,c,y"] + ["%r,%r,%r,%d" % (*x, t) for x, t in zip(X.tolist(), y.tolist())]
    (tmp_path / "toy.csv").write_text("\n".join(lines) + "\n")
    (tmp_path / "toy.schema").write_text(
        "[label]\ncolumn = y\n[groups]\na = a ; cost=0.01\nb = b ; cost=0.02\nc = c ; cost=0.01\n")
    return str(tmp_path / "toy.csv"), str(tmp_path / "toy.schema")


def test_full_lattice_equals_exhaustive_explore(tmp_path):
    data, schema = toy_csv(tmp_path)
    common = ["--data", data, "--schema", schema, "--lam", "0.5", "--rank", "40",
              "--clf-rank", "40", "--folds", "5"]
    assert main(["train", "--solver", "full", "-o", str(tmp_path / "f")] + common) == 0
    assert main(["train", "--n-max", "8", "-o", str(tmp_path / "e")] + common) == 0
    full, expl = load_model(str(tmp_path / "f/policy.npz")), load_model(str(tmp_path / "e/policy.npz"))
    assert full.policy.nodes == expl.policy.nodes
    X = full.transform(ds.load_csv(data, ds.read_schema(schema)).values)
    for s in full.policy.nodes:
        assert np.array_equal(full.policy.act(s, X), expl.policy.act(s, X))


# -- error paths -------------------------------------------------------------

def test_invalid_schema_exit_and_no_artifact(tmp_path, capsys):
    (tmp_path / "bad.schema").write_text("[groups]\na = a\n")
    data, _ = toy_csv(tmp_path)
    out = tmp_path / "o"
    rc = main(["train", "--data", data, "--schema", str(tmp_path / "bad.schema"), "-o", str(out)])
    assert rc == 2 and not (out / "policy.npz").exists()
    assert "error:" in capsys.readouterr().err


@pytest.mark.parametrize("argv,code", [
    (["train", "--data", "nowhere.csv", "--schema", "nowhere.schema"], 2),
    (["train", "--data", "iris"], 2),  # unknown name is read as a CSV path
    (["train", "--lam", "-1"], 2),
    (["eval", "missing.npz", "heart"], 3),
])
def test_error_exit_codes(tmp_path, argv, code):
    out = tmp_path / "o"
    assert main(argv + ["-o", str(out)]) == code
    assert not (out / "policy.npz").exists()


def test_thread_env_validation(tmp_path, monkeypatch):
    monkeypatch.setenv("AFA_NUM_THREADS", "many")
    assert main(["train", "--data", "heart", "-o", str(tmp_path / "o")]) == 2
    monkeypatch.setenv("AFA_NUM_THREADS", "1")
    assert main(["sweep", "--data", "heart", "--lambdas", "0.01", "-o", str(tmp_path / "s")]
                + QUICK) == 0


# -- eval / sweep / export ---------------------------------------------------

def test_eval_outputs_and_empty(trained, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", str(trained / "policy.npz"), "heart", "-o", str(out), "--figures"]) == 0
    assert {"instance", "path", "probability"} <= set(rows(out / "traces.csv")[0])
    assert float(rows(out / "metrics.csv")[0]["auc"]) > 0.5
    assert (out / "policy.dot").exists() and (out / "figures/usage.png").exists()
    empty = tmp_path / "empty.csv"
    header = ",".join(load_model(str(trained / "policy.npz")).columns) + ",disease\n"
    empty.write_text(header)
    assert main(["eval", str(trained / "policy.npz"), str(empty), "-o", str(tmp_path / "e2")]) == 3


def test_eval_budget_artifact(tmp_path):
    out = tmp_path / "b"
    assert main(["train", "--data", "breast", "--budget", "2", "-o", str(out)] + QUICK) == 0
    assert main(["eval", str(out / "policy.npz"), "breast", "-o", str(tmp_path / "be")]) == 0
    assert max(int(r["n_acquired"]) for r in rows(tmp_path / "be/traces.csv")) <= 2


def test_sweep_rows_dedupe_and_frontier(tmp_path, caplog):
    out = tmp_path / "sw"
    with caplog.at_level(logging.WARNING, logger="afa"):
        rc = main(["sweep", "--data", "heart", "--lambdas", "0", "0.001", "0.01", "0.01",
                   "--figures", "-o", str(out)] + QUICK)
    assert rc == 0 and "duplicate" in caplog.text
    r = rows(out / "sweep.csv")
    assert [float(x["lam"]) for x in r] == [0.0, 0.001, 0.01]
    assert (out / "frontier.png").exists()
    assert dedupe([0.1, 0.2]) == [0.1, 0.2]
    assert main(["sweep", "--data", "heart", "--lambdas", "0.01", "-o", str(tmp_path / "one")]
                + QUICK) == 0
    assert len(rows(tmp_path / "one/sweep.csv")) == 1


def test_export_dot(trained, tmp_path, capsys):
    assert main(["export-dot", str(trained / "policy.npz")]) == 0
    assert capsys.readouterr().out.startswith("digraph")
    out = tmp_path / "p.dot"
    assert main(["export-dot", str(trained / "policy.npz"), "heart", "-o", str(out)]) == 0
    assert "/ " in out.read_text()


# -- session -----------------------------------------------------------------

def test_session_transcript_equals_episode(trained):
    model = load_model(str(trained / "policy.npz"))
    d = ds.load_builtin("heart")
    off = model.raw_offsets
    for i in (0, 5, 17, 42):
        ep = model.episodes(d.values[i:i + 1], d.labels[i:i + 1])[0]
        answers = "".join("%r\n" % float(d.values[i, off[a]]) for a in ep.acquired)
        t = session(model, io.StringIO(answers), io.StringIO())
        assert t["status"] == "finished"
        assert [tuple(s) for s in t["steps"]] == ep.steps
        assert t["probability"] == pytest.approx(ep.probability, abs=1e-12)
        assert t["cost"] == ep.cost


def test_session_reprompts_and_abort(trained, tmp_path):
    model = load_model(str(trained / "policy.npz"))
    first = model.policy.act(ROOT, np.zeros((1, len(model.columns))))[0]
    if first == FINISH:
        pytest.skip("policy finishes at the root")
    out = io.StringIO()
    t = session(model, io.StringIO("abc\n1 2\nq\n"), out)
    text = out.getvalue()
    assert "not a number" in text and "expected 1" in text
    assert t["status"] == "aborted" and t["steps"] == []
    inp = tmp_path / "answers.txt"
    inp.write_text("")
    tr = tmp_path / "t.json"
    rc = main(["session", str(trained / "policy.npz"), "--input", str(inp), "--transcript", str(tr)])
    assert rc == EXIT_ABORT and json.loads(tr.read_text())["status"] == "aborted"


def test_session_immediate_finish(tmp_path):
    out = tmp_path / "z"
    assert main(["train", "--data", "heart", "--budget", "0", "-o", str(out)] + QUICK) == 0
    model = load_model(str(out / "policy.npz"))
    buf = io.StringIO()
    t = session(model, io.StringIO(""), buf)
    assert t["status"] == "finished" and t["steps"] == [[ROOT, FINISH]]
    assert "enter" not in buf.getvalue()
