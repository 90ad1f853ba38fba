"""isoFLOP sweep planning, parabola fits of loss against log10 size, and power-law fits of optima."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class IsoFlopPoint:
    C: float
    N: float
    D: float
    loss: float


def plan_isoflop_sweep(C: float, candidates: Sequence[float], context_len: int = 1) -> list[tuple[float, int]]:
    """(N, D) pairs at fixed compute with D = round(C / 6N); pairs with D < context_len are dropped."""
    if C <= 0:
        raise ValueError("compute budget must be positive")
    if any(n <= 0 for n in candidates) or len(set(candidates)) != len(candidates):
        raise ValueError("candidate sizes must be positive and distinct")
    pairs = []
    for n in sorted(candidates):
        d = int(round(C / (6.0 * n)))
        if d >= context_len and d > 0:
            pairs.append((n, d))
    if not pairs:
        raise ValueError("compute budget too small")
    return pairs


@dataclass(frozen=True)
class ParabolaFit:
    a: float
    b: float
    c: float
    x_opt: float  # log10 of the optimal size
    min_loss: float
    rms: float
    extrapolated: bool  # vertex outside the swept range

    @property
    def opt(self) -> float:
        return 10.0 ** self.x_opt


def fit_parabola(points: Sequence[tuple[float, float]]) -> ParabolaFit:
    """Least-squares loss = a x^2 + b x + c over (x = log10 size, loss) pairs."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 3 or len(np.unique(pts[:, 0])) < 3:
        raise ValueError("need at least 3 points with distinct sizes")
    x, y = pts[:, 0], pts[:, 1]
    xm = x.mean()
    a, b0, c0 = np.polyfit(x - xm, y, 2)  # centred for conditioning
    curvature_floor = 1e-9 * max(1.0, float(np.abs(y).max())) / max(1e-12, float(np.ptp(x)) ** 2)
    if a <= curvature_floor:
        raise ValueError("no interior minimum")
    # back to uncentred coefficients
    b = b0 - 2 * a * xm
    c = c0 - b0 * xm + a * xm * xm
    x_opt = xm - b0 / (2 * a)
    resid = y - np.polyval([a, b0, c0], x - xm)
    return ParabolaFit(
        a=float(a), b=float(b), c=float(c),
        x_opt=float(x_opt),
        min_loss=float(c0 - b0 * b0 / (4 * a)),
        rms=float(np.sqrt(np.mean(resid ** 2))),
        extrapolated=bool(x_opt < x.min() or x_opt > x.max()),
    )


@dataclass(frozen=True)
class PowerLawFit:
    prefactor: float
    exponent: float
    rms: float  # residual RMS in log10 space

    def __call__(self, C):
        return self.prefactor * np.asarray(C, dtype=np.float64) ** self.exponent


def fit_power_law(points: Sequence[tuple[float, float]]) -> PowerLawFit:
    """OLS of log10(value) on log10(C)."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        raise ValueError("need at least 2 points")
    if np.any(pts <= 0):
        raise ValueError("compute and values must be positive")
    lx, ly = np.log10(pts[:, 0]), np.log10(pts[:, 1])
    if len(np.unique(lx)) < 2:
        raise ValueError("need at least 2 distinct budgets")
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    return PowerLawFit(float(10.0 ** intercept), float(slope), float(np.sqrt(np.mean(resid ** 2))))


# ---------------------------------------------------------------------------
# analytic surface used to validate the fitting pipeline


@dataclass(frozen=True)
class LossSurface:
    """L(N, D) = E + A / N^a + B / D^b."""

    E: float
    A: float
    a: float
    B: float
    b: float

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("a and b must be positive")

    def __call__(self, N, D):
        return self.E + self.A / np.power(N, self.a) + self.B / np.power(D, self.b)

    @property
    def alpha(self) -> float:
        return self.b / (self.a + self.b)

    @property
    def beta(self) -> float:
        return self.a / (self.a + self.b)

    def n_opt(self, C: float) -> float:
        G = (self.a * self.A / (self.b * self.B)) ** (1.0 / (self.a + self.b))
        return G * (C / 6.0) ** self.alpha


def size_grid(center: float, n_sizes: int = 7, decades: float = 1.0) -> list[float]:
    return list(10.0 ** np.linspace(math.log10(center) - decades, math.log10(center) + decades, n_sizes))


def synthetic_surface_sweep(
    surface: LossSurface,
    budgets: Sequence[float],
    n_sizes: int = 7,
    decades: float = 1.0,
    center: Callable[[float], float] | None = None,
) -> list[IsoFlopPoint]:
    """Evaluate the surface on a log-spaced size grid per budget.

    The grid is centred on ``center(C)`` (default: the Chinchilla-style
    20-tokens-per-parameter guess sqrt(C / 120)), not on the analytic optimum.
    """
    center = center or (lambda C: math.sqrt(C / 120.0))
    points = []
    for C in budgets:
        for N, D in plan_isoflop_sweep(C, size_grid(center(C), n_sizes, decades)):
            points.append(IsoFlopPoint(float(C), float(N), float(D), float(surface(N, D))))
    return points


# ---------------------------------------------------------------------------
# sweep analysis


@dataclass(frozen=True)
class BudgetFit:
    C: float
    by_size: ParabolaFit
    by_tokens: ParabolaFit

    @property
    def n_opt(self) -> float:
        return self.by_size.opt

    @property
    def d_opt_parabola(self) -> float:
        return self.by_tokens.opt

    @property
    def d_opt_implied(self) -> float:
        return self.C / (6.0 * self.n_opt)


@dataclass(frozen=True)
class ScalingFit:
    budgets: tuple  # BudgetFit per compute budget, ascending C
    n_law: PowerLawFit
    d_law_parabola: PowerLawFit
    d_law_implied: PowerLawFit


def fit_sweep(points: Iterable[IsoFlopPoint]) -> ScalingFit:
    """Per-budget parabolas in log10 N and log10 D, then power laws of the optima against C."""
    groups: dict[float, list[IsoFlopPoint]] = {}
    for p in points:
        groups.setdefault(p.C, []).append(p)
    fits = []
    for C in sorted(groups):
        g = groups[C]
        fits.append(BudgetFit(
            C,
            fit_parabola([(math.log10(p.N), p.loss) for p in g]),
            fit_parabola([(math.log10(p.D), p.loss) for p in g]),
        ))
    return ScalingFit(
        tuple(fits),
        fit_power_law([(f.C, f.n_opt) for f in fits]),
        fit_power_law([(f.C, f.d_opt_parabola) for f in fits]),
        fit_power_law([(f.C, f.d_opt_implied) for f in fits]),
    )


def recentred_sweep(surface: LossSurface, budgets, n_sizes=7, decades=1.0, rounds=4) -> list[IsoFlopPoint]:
    """Sweep, fit, then re-centre each budget's grid on its fitted optimum (``rounds`` passes)."""
    center = None
    points: list[IsoFlopPoint] = []
    for _ in range(rounds):
        points = synthetic_surface_sweep(surface, budgets, n_sizes, decades, center)
        fit = fit_sweep(points)
        opts = {f.C: f.n_opt for f in fit.budgets}
        center = opts.__getitem__
    return points


# ---------------------------------------------------------------------------
# I/O


def write_points(path, points: Sequence[IsoFlopPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["C", "N", "D", "loss"])
        for p in points:
            w.writerow([repr(p.C), repr(p.N), repr(p.D), repr(p.loss)])


def read_points(path) -> list[IsoFlopPoint]:
    with open(path, newline="") as fh:
        return [IsoFlopPoint(float(r["C"]), float(r["N"]), float(r["D"]), float(r["loss"])) for r in csv.DictReader(fh)]


def write_fit(csv_path, report_path, fit: ScalingFit) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["C", "N_opt", "D_opt_parabola", "D_opt_implied", "min_loss", "rms_N", "rms_D", "extrapolated"])
        for f in fit.budgets:
            w.writerow([repr(f.C), repr(f.n_opt), repr(f.d_opt_parabola), repr(f.d_opt_implied),
                        repr(f.by_size.min_loss), repr(f.by_size.rms), repr(f.by_tokens.rms),
                        int(f.by_size.extrapolated or f.by_tokens.extrapolated)])
    lines = [
        f"N_opt = {fit.n_law.prefactor:.6g} * C^{fit.n_law.exponent:.4f}  (log10 residual rms {fit.n_law.rms:.3g})",
        f"D_opt = {fit.d_law_parabola.prefactor:.6g} * C^{fit.d_law_parabola.exponent:.4f}  from D parabolas (rms {fit.d_law_parabola.rms:.3g})",
        f"D_opt = {fit.d_law_implied.prefactor:.6g} * C^{fit.d_law_implied.exponent:.4f}  from C/(6 N_opt) (rms {fit.d_law_implied.rms:.3g})",
        "reference exponents from the original large-scale study: alpha 0.520, beta 0.512",
        "",
        "per budget:",
    ]
    for f in fit.budgets:
        flag = "  [vertex outside swept range]" if f.by_size.extrapolated or f.by_tokens.extrapolated else ""
        lines.append(f"  C={f.C:.4g}  N_opt={f.n_opt:.4g}  D_opt={f.d_opt_parabola:.4g}/{f.d_opt_implied:.4g}"
                     f"  min_loss={f.by_size.min_loss:.5g}  rms={f.by_size.rms:.3g}{flag}")
    with open(report_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
