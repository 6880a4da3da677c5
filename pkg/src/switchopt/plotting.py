"""Figures for trajectory CSVs and a standalone script that redraws them.

Every figure has the same layout: tank levels with the reference on top,
discrete inputs in the middle and the continuous pipe input at the bottom.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .model import Trajectory, reference

#: Figure name -> (trajectory CSV, title) drawn by the compare command.
FIGURES = {
    "relaxed": ("relaxed_trajectory.csv", "Relaxed solution"),
    "projected": ("projected_trajectory.csv", "Projected binary control"),
    "isto_uptime": ("isto_uptime_trajectory.csv", "Iterative STO, minimum uptime"),
    "isto_free": ("isto_free_trajectory.csv", "Iterative STO, no minimum uptime"),
}


def _stairs(times, values):
    """Step-plot coordinates for interval values on node times."""
    t = np.repeat(times, 2)[1:-1]
    v = np.repeat(values, 2, axis=0)
    return t, v


def plot_trajectory(traj: Trajectory, path, title: str = "") -> None:
    """Render ``traj`` to an image file (format from the suffix)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(7, 7))
    t = traj.times
    for i in range(traj.states.shape[1]):
        axes[0].plot(t, traj.states[:, i], label=f"x{i + 1}")
    axes[0].plot(t, reference(t), "k--", lw=0.8, label="r")
    axes[0].set_ylabel("level")
    axes[0].legend(loc="upper right")
    if len(t) > 1:
        ts, us = _stairs(t, traj.discrete_inputs)
        for i in range(us.shape[1]):
            axes[1].plot(ts, us[:, i], label=f"u{i + 1}")
        _, cs = _stairs(t, traj.continuous_inputs)
        for i in range(cs.shape[1]):
            axes[2].plot(ts, cs[:, i], label=f"c{i + 1}")
    axes[1].set_ylabel("valve")
    axes[1].legend(loc="upper right")
    axes[2].set_ylabel("flow")
    axes[2].set_xlabel("t (s)")
    axes[2].legend(loc="upper right")
    fig.suptitle(f"{title}  (cost {traj.cost:.3f})" if title else f"cost {traj.cost:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_figures(out_dir) -> list:
    """Render every known trajectory CSV in ``out_dir``; returns the images written."""
    out_dir = Path(out_dir)
    written = []
    for name, (csv_name, title) in FIGURES.items():
        src = out_dir / csv_name
        if not src.exists():
            continue
        dst = out_dir / f"{name}.png"
        plot_trajectory(Trajectory.from_csv(src), dst, title)
        written.append(dst)
    return written


PLOT_SCRIPT = '''\
"""Redraw the comparison figures from the CSV files next to this script."""

import csv
import math
import sys
from pathlib import Path

import matplotlib.pyplot as plt

FIGURES = {figures!r}


def load(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], [[float(v) for v in r] for r in rows[1:]]
    return {{h: [r[i] for r in data] for i, h in enumerate(header)}}


def draw(cols, title):
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(7, 7))
    t = cols["t"]
    for key in cols:
        if key.startswith("x"):
            axes[0].plot(t, cols[key], label=key)
    axes[0].plot(t, [2 + 0.5 * math.sin(s) for s in t], "k--", lw=0.8, label="r")
    for ax, prefix in ((axes[1], "u"), (axes[2], "c")):
        for key in cols:
            if key[0] == prefix and key[1:].isdigit():
                ax.step(t[:-1], cols[key][:-1], where="post", label=key)
        ax.legend(loc="upper right")
    axes[0].legend(loc="upper right")
    axes[2].set_xlabel("t (s)")
    fig.suptitle(title)
    fig.tight_layout()
    return fig


def main(directory):
    directory = Path(directory)
    for name, (csv_name, title) in FIGURES.items():
        src = directory / csv_name
        if src.exists():
            draw(load(src), title).savefig(directory / (name + ".png"), dpi=120)
    plt.show()


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent)
'''


def write_plot_script(out_dir) -> Path:
    """Write ``plot_figures.py`` into ``out_dir``; it needs only matplotlib."""
    path = Path(out_dir) / "plot_figures.py"
    path.write_text(PLOT_SCRIPT.format(figures=FIGURES))
    return path
