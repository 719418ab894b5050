"""Figures for training runs and scan benchmarks (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(history: list[dict], lr_trace, out_dir: str | Path) -> dict[str, Path]:
    """Loss, validation accuracy and learning-rate curves as ``training.png``."""
    out = Path(out_dir)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        for split, style in (("train", "-"), ("val", "--")):
            rows = [r for r in history if r["split"] == split]
            axes[0].plot([r["epoch"] for r in rows], [r["loss"] for r in rows], style, label=split)
        axes[0].set_xlabel("epoch")
        axes[0].set_ylabel("loss")
        axes[0].legend(frameon=False)

        val = [r for r in history if r["split"] == "val"]
        for key in ("verb_acc", "noun_acc", "action_acc", "recall5"):
            axes[1].plot([r["epoch"] for r in val], [r[key] for r in val], label=key)
        axes[1].set_ylim(0, 1.02)
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("validation")
        axes[1].legend(frameon=False)

        if lr_trace:
            steps = [s for s, _, _ in lr_trace]
            axes[2].plot(steps, [d for _, d, _ in lr_trace], label="default")
            axes[2].plot(steps, [f for _, _, f in lr_trace], label="fusion")
            axes[2].set_yscale("log")
        axes[2].set_xlabel("step")
        axes[2].set_ylabel("learning rate")
        axes[2].legend(frameon=False)
        return {"figure": _save(fig, out / "training.png")}


def plot_bench(rows: list[dict], path: str | Path) -> Path:
    """Median wall time against sequence length, one line per method, log-log."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for method in sorted({r["method"] for r in rows}):
            sel = sorted((r for r in rows if r["method"] == method), key=lambda r: r["length"])
            ax.plot([r["length"] for r in sel], [r["median_s"] for r in sel], "o-", label=method)
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel("sequence length")
        ax.set_ylabel("median time (s)")
        ax.legend(frameon=False)
        return _save(fig, Path(path))


def plot_gradcheck(rows: list[dict], path: str | Path, tol: float) -> Path:
    """Relative error per check on a log axis with the tolerance marked."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, max(2.5, 0.16 * len(rows))))
        names = [r["check"] for r in rows]
        errs = [max(r["rel_err"], 1e-18) for r in rows]
        ax.barh(range(len(rows)), errs, color=["tab:blue" if r["ok"] else "tab:red" for r in rows])
        ax.axvline(tol, color="k", lw=0.8, ls="--")
        ax.set_yticks(range(len(rows)), names, fontsize=6)
        ax.set_xscale("log")
        ax.set_xlabel("relative error")
        ax.invert_yaxis()
        return _save(fig, Path(path))
