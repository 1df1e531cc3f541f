"""Report figures rendered straight to files (Agg backend, no display needed).

Each function takes the same rows that go into the CSV outputs, so a figure
never shows anything the tables do not contain.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}
FIG_W = 4.8
GOLDEN = (np.sqrt(5) - 1) / 2


def _figure(width=FIG_W, ratio=GOLDEN):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, width * ratio))
    return fig, ax


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def usage_bars(usage, names, path, title="feature usage"):
    fig, ax = _figure(width=max(FIG_W, 0.35 * len(names)))
    x = np.arange(len(names))
    ax.bar(x, usage, color="0.35")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=60, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("fraction of episodes acquiring")
    ax.set_title(title)
    return _save(fig, path)


def exploration_curve(rows, path, key="test_return"):
    """Return (and score) against number of explored superstates."""
    rows = [r for r in rows if key in r]
    fig, ax = _figure()
    if not rows:
        ax.set_title("no %s recorded (run with --curve)" % key)
    else:
        for split in sorted({r.get("split", 0) for r in rows}):
            part = [r for r in rows if r.get("split", 0) == split]
            ax.plot([r["step"] for r in part], [r[key] for r in part], lw=1, alpha=0.8)
        ax.set_xlabel("explored superstates")
        ax.set_ylabel(key.replace("_", " "))
    return _save(fig, path)


def frontier(rows, path):
    """Mean accuracy against mean cost, one point per lambda."""
    fig, ax = _figure()
    cost = np.array([r["mean_cost"] for r in rows])
    acc = np.array([r["accuracy"] for r in rows])
    order = np.argsort(cost)
    ax.errorbar(cost[order], acc[order],
                yerr=np.array([r.get("accuracy_std", 0.0) for r in rows])[order],
                marker="o", ms=3, lw=1, color="k", capsize=2)
    for r in rows:
        ax.annotate("%g" % r["lam"], (r["mean_cost"], r["accuracy"]), fontsize=7,
                    xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("mean acquisition cost")
    ax.set_ylabel("mean accuracy")
    return _save(fig, path)


def regularisation_history(rows, path):
    fig, ax = _figure()
    it = [r["iteration"] for r in rows]
    ax.plot(it, [r["n_nodes"] for r in rows], marker="o", ms=3, color="k")
    ax.set_xlabel("iteration")
    ax.set_ylabel("visited superstates")
    ax2 = ax.twinx()
    ax2.plot(it, [r["mean_return"] for r in rows], marker="s", ms=3, color="0.55", ls="--")
    ax2.set_ylabel("mean training return")
    return _save(fig, path)
