"""SVG figures for report tables."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_table"]

# (x column, y columns, log-y) per table; unknown tables fall back to the first two columns
_LAYOUT = {
    "krylov": ("lambda", ["median_alpha", "q10_alpha", "threshold"], False),
    "krylov_control": ("n_paths", ["median_alpha", "q10_alpha"], False),
    "sqrtlaw": ("c", ["mean_ratio", "q95_ratio"], False),
    "hitting": ("p", ["p_not_through_A"], False),
    "flow": ("m", ["newton_residual", "composition_residual"], True),
    "solve": ("h", ["sup_norm_mean", "oracle_error"], True),
    "fk": ("probe_x", ["estimate"], False),
    "shells": ("n_paths", ["median_ratio", "max_ratio"], False),
}


def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return np.nan


def plot_table(name, header, rows, dest):
    """Line/marker plot of a table's value columns against its key column."""
    plt.rcParams["svg.hashsalt"] = "spdelab"
    xcol, ycols, logy = _LAYOUT.get(name, (header[0], header[1:2], False))
    xi = header.index(xcol)
    x = np.array([_num(r[xi]) for r in rows])
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for col in ycols:
        y = np.array([_num(r[header.index(col)]) for r in rows])
        ok = np.isfinite(x) & np.isfinite(y)
        if logy:
            ok &= y > 0
        if ok.any():
            ax.plot(x[ok], y[ok], marker="o", label=col)
    if name == "hitting" and "se" in header:
        y = np.array([_num(r[header.index("p_not_through_A")]) for r in rows])
        se = np.array([_num(r[header.index("se")]) for r in rows])
        ax.errorbar(x, y, yerr=3 * se, fmt="none", capsize=3, color="k", label="3 SE")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xcol)
    ax.set_title(name)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(dest, format="svg", metadata={"Date": None})
    plt.close(fig)
