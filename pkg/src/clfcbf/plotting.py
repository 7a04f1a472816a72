"""Region charts: per-cell labels over a 2-D grid, CSV and SVG emission."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .conic import SolverSettings, check_farkas, solve_lp
from .polyalg import PolyEvaluator
from .problem import ChartSpec
from .system import (
    MANIFOLD_TOL,
    REGION_TOL,
    CertificatePair,
    ControlAffineSystem,
    PointwiseChecker,
    UnsafeRegion,
)

LABELS = ("off-manifold", "unsafe", "incompatible-point", "compatible-region-member", "outside")


@dataclass
class RegionChart:
    """Grid of display coordinates ``a`` (columns) by ``b`` (rows)."""

    spec: ChartSpec
    a: np.ndarray          # (na,)
    b: np.ndarray          # (nb,)
    states: np.ndarray     # (nb, na, nx)
    labels: np.ndarray     # (nb, na) strings from LABELS
    unsafe: np.ndarray     # (nb, na) bool
    member: np.ndarray     # (nb, na) bool, h >= 0 and V <= 1
    lp_status: np.ndarray  # (nb, na) feasible | infeasible | unknown | skipped
    V: np.ndarray
    h: np.ndarray
    farkas: dict           # (row, col) -> verified Farkas vector

    @property
    def size(self) -> int:
        return int(self.labels.size)

    def count(self, label: str) -> int:
        return int(np.count_nonzero(self.labels == label))

    def incompatible_cells(self):
        return [tuple(ix) for ix in np.argwhere(self.labels == "incompatible-point")]

    def to_csv(self, state_names) -> str:
        la, lb = self.spec.labels
        cols = [la or "a", lb or "b", *state_names, "V", "h", "unsafe", "member", "lp", "label"]
        lines = [",".join(cols)]
        nb, na = self.labels.shape
        for i in range(nb):
            for j in range(na):
                vals = [repr(float(self.a[j])), repr(float(self.b[i]))]
                vals += [repr(float(v)) for v in self.states[i, j]]
                vals += [repr(float(self.V[i, j])), repr(float(self.h[i, j]))]
                vals += [str(int(self.unsafe[i, j])), str(int(self.member[i, j])),
                         str(self.lp_status[i, j]), str(self.labels[i, j])]
                lines.append(",".join(vals))
        return "\n".join(lines) + "\n"


def _axis(rng, n) -> np.ndarray:
    return np.linspace(float(rng[0]), float(rng[1]), int(n)) if n else np.zeros(0)


def plot_region(sys: ControlAffineSystem, cert: CertificatePair, unsafe: Optional[UnsafeRegion],
                spec: ChartSpec, settings: Optional[SolverSettings] = None,
                manifold_tol: float = MANIFOLD_TOL, lp_everywhere: bool = True) -> RegionChart:
    """Label every grid cell.

    Precedence is off-manifold, unsafe, incompatible-point, member, outside.
    The pointwise LP runs on every on-manifold cell when ``lp_everywhere``
    (needed for the LP-infeasible layer), else only on region members.
    """
    na, nb = spec.resolution
    a = _axis(spec.x_range, na)
    b = _axis(spec.y_range, nb)
    A, B = np.meshgrid(a, b)
    X = spec.to_state(A, B, sys.nx).reshape(nb, na, sys.nx)
    labels = np.full((nb, na), "outside", dtype=object)
    unsafe_m = np.zeros((nb, na), dtype=bool)
    member = np.zeros((nb, na), dtype=bool)
    lp = np.full((nb, na), "skipped", dtype=object)
    Vv = np.zeros((nb, na))
    hv = np.zeros((nb, na))
    farkas = {}
    if X.size == 0:
        return RegionChart(spec, a, b, X, labels, unsafe_m, member, lp, Vv, hv, farkas)

    flat = X.reshape(-1, sys.nx)
    checker = PointwiseChecker(sys, cert, settings)
    vh = checker.V_h(flat).reshape(nb, na, 2)
    Vv, hv = vh[..., 0], vh[..., 1]
    member = (hv >= -REGION_TOL) & (Vv <= 1 + REGION_TOL)
    if unsafe is not None:
        lvals = PolyEvaluator(unsafe.l, sys.variables)(flat).reshape(nb, na, len(unsafe.l))
        unsafe_m = unsafe.contains(lvals)
    on = np.ones((nb, na), dtype=bool)
    if sys.e:
        evals = np.abs(sys.e_values(flat)).reshape(nb, na, -1).max(axis=-1)
        on = evals <= manifold_tol

    for i in range(nb):
        for j in range(na):
            if not on[i, j] or not (lp_everywhere or member[i, j]):
                continue
            Lam, xi = checker.lambda_xi(X[i, j])
            res = solve_lp(Lam, xi, settings)
            lp[i, j] = res.status
            if res.infeasible and check_farkas(Lam, xi, res.z):
                farkas[(i, j)] = res.z

    labels[member] = "compatible-region-member"
    labels[member & (lp == "infeasible")] = "incompatible-point"
    labels[unsafe_m] = "unsafe"
    labels[~on] = "off-manifold"
    return RegionChart(spec, a, b, X, labels, unsafe_m, member, lp, Vv, hv, farkas)


_COLORS = {
    "lp": (0.0, 0.85, 0.9, 0.55),       # cyan: pointwise LP infeasible
    "unsafe": (0.5, 0.5, 0.5, 0.85),    # grey
    "member": (0.1, 0.7, 0.2, 0.45),    # green
    "witness": (0.9, 0.1, 0.1, 1.0),    # red: member and LP infeasible
}


def render_svg(chart: RegionChart, path, title: str = "") -> None:
    """Write the chart layers as an SVG (deterministic output)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Patch

    matplotlib.rcParams["svg.hashsalt"] = "clfcbf"
    fig, ax = plt.subplots(figsize=(6, 4.5))
    if chart.size:
        extent = (chart.a[0], chart.a[-1], chart.b[0], chart.b[-1])
        layers = [
            ("lp", chart.lp_status == "infeasible"),
            ("unsafe", chart.unsafe),
            ("member", chart.member & ~chart.unsafe),
            ("witness", chart.labels == "incompatible-point"),
        ]
        for key, mask in layers:
            img = np.zeros(mask.shape + (4,))
            img[mask.astype(bool)] = _COLORS[key]
            ax.imshow(img, origin="lower", extent=extent, aspect="auto", interpolation="nearest")
    ax.set_xlabel(chart.spec.labels[0])
    ax.set_ylabel(chart.spec.labels[1])
    if title:
        ax.set_title(title)
    handles = [
        Patch(color=_COLORS["unsafe"], label="unsafe"),
        Patch(color=_COLORS["lp"], label="pointwise LP infeasible"),
        Patch(color=_COLORS["member"], label="h >= 0, V <= 1"),
        Patch(color=_COLORS["witness"], label="incompatible in region"),
    ]
    ax.legend(handles=handles, loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
