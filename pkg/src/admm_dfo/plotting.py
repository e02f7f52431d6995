"""Figure data (CSV) and rendered PNGs for the convergence of a run."""

import csv
import os

import numpy as np

__all__ = ["write_figure_data", "render_figures"]

_RESIDUALS = ("eps1_kr", "eps2_kr", "eps3_kr")


def write_figure_data(trace, out_dir):
    """
    Write ``fig_lagrangian.csv`` and ``fig_residuals.csv``: one row per inner
    iteration with its outer index ``k`` and a running iteration count.

    Returns the list of written paths.
    """
    k = trace.column("k").astype(int)
    r = trace.column("r").astype(int)
    step = np.arange(len(k))
    paths = []
    specs = [("fig_lagrangian.csv", ("L",)), ("fig_residuals.csv", _RESIDUALS)]
    for name, cols in specs:
        path = os.path.join(out_dir, name)
        data = [trace.column(c) for c in cols]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("k", "r", "iteration") + cols)
            for j in range(len(k)):
                w.writerow([k[j], r[j], step[j]] + [format(d[j], ".17g") for d in data])
        paths.append(path)
    return paths


def render_figures(trace, out_dir, title=None):
    """
    Render ``convergence.png``: the augmented Lagrangian and the three
    residual norms against the inner iteration count, coloured from blue
    (first outer iteration) to red (last).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    k = trace.column("k").astype(int)
    if k.size == 0:
        return None
    ks = np.unique(k)
    colors = plt.get_cmap("coolwarm")(np.linspace(0.0, 1.0, len(ks)))
    step = np.arange(len(k))
    fig, axes = plt.subplots(1, 4, figsize=(16, 3.6))
    panels = [("L", "augmented Lagrangian")] + [(c, c.replace("_kr", "")) for c in _RESIDUALS]
    for ax, (col, label) in zip(axes, panels):
        vals = trace.column(col)
        for color, kk in zip(colors, ks):
            sel = k == kk
            ax.plot(step[sel], vals[sel], color=color, lw=1.0)
        if col != "L" or np.all(vals > 0):
            ax.set_yscale("log")
        ax.set_xlabel("inner iteration")
        ax.set_title(label)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = os.path.join(out_dir, "convergence.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
