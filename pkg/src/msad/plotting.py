"""Figures for rate tables (written with the Agg backend, reproducible bytes)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# PNG metadata without version strings or timestamps, so reruns give identical files
_PNG_META = {"Software": None}


def plot_rate_table(table, metric, path, predicted_slope=None, xlabel=None):
    """Log-log plot of one metric with error bars and the fitted line."""
    x, y, e = table.series(metric)
    fig, ax = plt.subplots(figsize=(5.0, 3.8), dpi=100)
    pos = y > 0
    ax.errorbar(x[pos], y[pos], yerr=e[pos] if np.any(e[pos] > 0) else None, fmt="o", color="k",
                capsize=3, label=metric)
    fit = table.fits.get(metric)
    if fit is not None:
        xs = np.geomspace(x.min(), x.max(), 50)
        ax.plot(xs, np.exp(fit.intercept) * xs**fit.slope, "-", color="C0",
                label=f"fit slope {fit.slope:.3f} $\\pm$ {fit.stderr:.3f}")
        if predicted_slope is not None:
            x0 = x[pos][0]
            y0 = np.exp(fit.intercept) * x0**fit.slope
            ax.plot(xs, y0 * (xs / x0) ** predicted_slope, "--", color="C3", label=f"slope {predicted_slope:.3f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(xlabel or ("eps" if table.experiment == "pde-error" else "N"))
    ax.set_ylabel(metric)
    ax.set_title(table.experiment)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path
