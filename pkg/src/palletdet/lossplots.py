"""Loss, modulation and certainty curves as CSV rows and SVG figures."""
from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .losses import ErrorStats, Focal, L1, L2, LossParams, Shrinkage, SmoothL1, baseline_losses, \
    certainty, shrinkage_modulation

A_VALUES = (5.0, 10.0, 20.0, 30.0)
C_VALUES = (0.2, 0.5, 0.8)
ERRORS = np.linspace(0.0, 1.0, 201)
RATIOS = np.linspace(0.0, 4.0, 401)

# figure -> (x label, y label)
FIGURES = {
    "modulation_a": ("absolute error", "modulation factor"),
    "modulation_c": ("absolute error", "modulation factor"),
    "loss_a": ("absolute error", "loss"),
    "loss_c": ("absolute error", "loss"),
    "comparison": ("absolute error", "loss"),
    "certainty": ("error / mean error", "certainty"),
}


def _shrinkage_curve(a: float, c: float):
    p = LossParams(a=a, c=c)
    m = shrinkage_modulation(ERRORS, p)
    return m, ERRORS * m


def loss_curves() -> list:
    """Rows ``(figure, curve, x, y)``.

    Loss curves are per element with the error already normalised, i.e. the
    dynamic scaling is taken as ``2 * mean + eps == 1``.
    """
    rows = []

    def emit(fig, name, xs, ys):
        rows.extend((fig, name, float(x), float(y)) for x, y in zip(xs, ys))

    for a in A_VALUES:
        m, l = _shrinkage_curve(a, 0.5)
        emit("modulation_a", f"a={a:g},c=0.5", ERRORS, m)
        emit("loss_a", f"a={a:g},c=0.5", ERRORS, l)
    for c in C_VALUES:
        m, l = _shrinkage_curve(20.0, c)
        emit("modulation_c", f"a=20,c={c:g}", ERRORS, m)
        emit("loss_c", f"a=20,c={c:g}", ERRORS, l)

    zeros = np.zeros((1, 1, len(ERRORS), 1))
    err = ERRORS.reshape(zeros.shape)
    for name, kind in (("L2", L2()), ("L1", L1()), ("SmoothL1", SmoothL1()), ("Shrinkage", Shrinkage())):
        emit("comparison", name, ERRORS, baseline_losses(zeros, err, kind).per_element.ravel())
    ones = np.ones_like(zeros)
    emit("comparison", "Focal", ERRORS, baseline_losses(ones, ones - err, Focal()).per_element.ravel())
    emit("comparison", "DSSL", ERRORS, _shrinkage_curve(20.0, 0.5)[1])

    emit("certainty", "certainty", RATIOS, certainty(RATIOS, ErrorStats(1.0), LossParams(eps=1e-12)))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["figure", "curve", "x", "y"])
    for fig, name, x, y in rows:
        w.writerow([fig, name, repr(x), repr(y)])
    return buf.getvalue()


def read_curves(text: str) -> dict:
    """``{(figure, curve): (xs, ys)}`` from CSV text."""
    out = {}
    for r in csv.DictReader(io.StringIO(text)):
        xs, ys = out.setdefault((r["figure"], r["curve"]), ([], []))
        xs.append(float(r["x"]))
        ys.append(float(r["y"]))
    return {k: (np.array(v[0]), np.array(v[1])) for k, v in out.items()}


def write_figures(rows, out_dir) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "palletdet"
    curves = {}
    for fig, name, x, y in rows:
        xs, ys = curves.setdefault(fig, {}).setdefault(name, ([], []))
        xs.append(x)
        ys.append(y)
    paths = []
    for fig, named in curves.items():
        f, ax = plt.subplots(figsize=(4.5, 3.2))
        for name, (xs, ys) in named.items():
            ax.plot(xs, ys, label=name)
        xl, yl = FIGURES[fig]
        ax.set_xlabel(xl)
        ax.set_ylabel(yl)
        if fig == "comparison":
            ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
        f.tight_layout()
        path = Path(out_dir) / f"{fig}.svg"
        f.savefig(path, format="svg", metadata={"Date": None})
        plt.close(f)
        paths.append(path)
    return paths
