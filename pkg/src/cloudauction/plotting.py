"""Figures for scenario outputs.  PNGs carry no software/date metadata so reruns match byte for byte."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _png(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_META)
    plt.close(fig)
    return buf.getvalue()


def scenario1_figure(results) -> bytes:
    """Analytic lines and simulated markers, one panel per mechanism."""
    fig, axes = plt.subplots(1, len(results), figsize=(5 * len(results), 4), squeeze=False)
    for ax, res in zip(axes[0], results):
        lams = sorted({r.N for r in res.rows})
        for lam in lams:
            rows = [r for r in res.rows if r.N == lam]
            x = [r.Delta for r in rows]
            line = ax.plot(x, [r.analytic_income for r in rows], label=f"N={lam:g} analytic")[0]
            ax.errorbar(
                x, [r.simulated_income for r in rows], yerr=[3 * r.stderr for r in rows],
                fmt="o", color=line.get_color(), label=f"N={lam:g} simulated",
            )
        ax.set_title(f"{res.mechanism.value}-price OBSA")
        ax.set_xlabel("patience Delta")
        ax.set_ylabel("expected income")
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _png(fig)


def curves_figure(curves: dict) -> bytes:
    fig, ax = plt.subplots(figsize=(6, 4))
    for g in sorted(curves):
        c = curves[g]
        ax.plot(c.r, c.values, label=f"gamma={g:g}")
    ax.set_xlabel("residual time r")
    ax.set_ylabel("bid b(r)")
    ax.legend()
    fig.tight_layout()
    return _png(fig)


def scenario3_figure(obsa, baseline) -> bytes:
    labels = ["winners", "sold servers"]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    x = np.arange(len(labels))
    axes[0].bar(x - 0.2, [obsa.total_winners, obsa.total_sold], 0.4, label="OBSA")
    axes[0].bar(x + 0.2, [baseline.total_winners, baseline.total_sold], 0.4, label="combinatorial")
    axes[0].set_xticks(x, labels)
    axes[0].legend()
    axes[1].bar([0, 1], [obsa.mean_income, baseline.mean_income])
    axes[1].set_xticks([0, 1], ["OBSA", "combinatorial"])
    axes[1].set_ylabel("income")
    fig.tight_layout()
    return _png(fig)


def scenario4_figure(res, variance_rows=None) -> bytes:
    panels = 2 if variance_rows else 1
    fig, axes = plt.subplots(1, panels, figsize=(6 * panels, 4), squeeze=False)
    ax = axes[0][0]
    t = np.arange(len(res.obsa))
    ax.plot(t, res.baseline, label="combinatorial (deferred entry)")
    ax.plot(t, res.obsa, label="OBSA")
    ax.set_xlabel("instant")
    ax.set_ylabel("participants")
    ax.legend()
    if variance_rows:
        ax = axes[0][1]
        for lam in sorted({r.N for r in variance_rows}):
            rows = [r for r in variance_rows if r.N == lam]
            deltas = sorted({r.Delta for r in rows})
            ob = [np.mean([r.obsa_variance for r in rows if r.Delta == d]) for d in deltas]
            bl = np.mean([r.baseline_variance for r in rows])
            line = ax.plot(deltas, ob, marker="o", label=f"OBSA N={lam:g}")[0]
            ax.axhline(bl, color=line.get_color(), ls="--", label=f"combinatorial N={lam:g}")
        ax.set_xlabel("patience Delta")
        ax.set_ylabel("winner payment variance")
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _png(fig)
