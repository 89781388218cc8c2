"""Figure rendering for CLI reports. Every function writes one PNG."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .mixture import GRID, mixture_logpdf  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
})

_COLORS = {"fkl": "tab:blue", "rkl": "tab:red", "cakld": "tab:green", "jsd": "tab:purple"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_curve(losses, path, window: int = 20, title: str = ""):
    fig, ax = plt.subplots(figsize=(5, 3))
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=0.6, alpha=0.4, color="gray", label="loss")
    if len(losses) >= window:
        sm = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1:], sm, lw=1.4, color="black", label=f"mean of {window}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    _save(fig, path)


def mixture_fits(mixture, finals: dict[str, tuple[float, float]], path):
    """Teacher mixture density with each fitted Gaussian overlaid."""
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.fill_between(GRID, np.exp(mixture_logpdf(GRID, *mixture)), color="0.85", label="teacher")
    for name, (mu, sigma) in finals.items():
        q = np.exp(-0.5 * ((GRID - mu) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
        ls = "--" if name.startswith("jsd") else "-"
        ax.plot(GRID, q, color=_COLORS.get(name.split("_")[0]), lw=1.5, ls=ls, label=name)
    ax.set_xlim(-6, 6)
    ax.set_xlabel("x")
    ax.set_ylabel("density")
    ax.legend(frameon=False)
    _save(fig, path)


def token_histogram(values, path, xlabel: str, bins: int = 40):
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.hist(np.asarray(values), bins=bins, color="tab:blue", alpha=0.8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("tokens")
    _save(fig, path)


def start_end_bars(rows, path):
    """Grouped bars of start and end perplexity per variant (log scale)."""
    names = [r["variant"] for r in rows]
    start = [r["start_ppl"] for r in rows]
    end = [r["end_ppl"] for r in rows]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3))
    ax.bar(x - 0.2, start, width=0.4, label="start", color="0.6")
    ax.bar(x + 0.2, end, width=0.4, label="end", color="tab:green")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_yscale("log")
    ax.set_ylabel("perplexity")
    ax.legend(frameon=False)
    _save(fig, path)
