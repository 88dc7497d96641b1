"""Energy auditing, a priori bound monitors, CSV emission and the built-in property suites."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CSV_HEADER = (
    "t,E_total,E_elastic,E_barrier,E_defect,E_rotational,E_kinetic,D_rate,CD_residual,"
    "margin_det,margin_cof,margin_tr,envelope_ratio"
)
CSV_VERSION = 1


@dataclass
class EnergyRecord:
    t: float
    E_total: float
    E_elastic: float
    E_barrier: float
    E_defect: float
    E_rotational: float
    E_kinetic: float
    D_rate: float
    CD_residual: float
    margin_det: float
    margin_cof: float
    margin_tr: float
    envelope_ratio: float

    def row(self):
        return ",".join(repr(float(v)) for v in self.__dict__.values())


def clausius_duhem_residuals(traj, dt):
    """|dE/dt + dissipation - external power| per step, trapezoid in time; 0 for the first record."""
    E = np.asarray(traj.E)
    D = np.asarray(traj.d_actual)
    P = np.asarray(traj.p_ext)
    if len(E) < 2:
        return np.zeros(len(E))
    r = np.abs((E[1:] - E[:-1]) / dt + 0.5 * (D[1:] + D[:-1]) - 0.5 * (P[1:] + P[:-1]))
    return np.concatenate([[0.0], r])


def clausius_duhem_residual(E_prev, E_next, dt, d_prev, d_next, p_prev=0.0, p_next=0.0):
    if dt <= 0:
        raise ValueError("need two consecutive states")
    return abs((E_next - E_prev) / dt + 0.5 * (d_prev + d_next) - 0.5 * (p_prev + p_next))


def energy_records(traj, betas, dt, cadence=1):
    cd = clausius_duhem_residuals(traj, dt)
    out = []
    for i in range(0, len(traj.t), cadence):
        t = traj.t[i]
        terms = traj.terms[i]
        env = traj.dev_inf[i] / math.sqrt(t) if t > 0 else 0.0
        out.append(
            EnergyRecord(
                t, terms["total"], terms["elastic"], terms["barrier"], terms["defect"], terms["rotational"],
                terms["kinetic"], traj.D[i], float(cd[i]),
                *(m * b for m, b in zip(traj.margins[i], betas)), env,
            )
        )
    return out


def emit_energy_csv(records, path):
    if not records:
        raise ValueError("empty trajectory")
    with open(path, "w", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in records:
            fh.write(r.row() + "\n")


def read_energy_csv(path):
    with open(path) as fh:
        head = fh.readline().strip()
        if head != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header")
        return [EnergyRecord(*(float(v) for v in line.split(","))) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# a priori bound monitors


def gronwall_fit(t, E):
    """Constants (c1, c2) with E_n <= (E_0 + c1 t_n) exp(c2 t_n) on the series.

    c2 is the least-squares growth rate of log(1 + E), floored at zero; c1 is
    then the smallest value making the bound hold at every sample.
    """
    t = np.asarray(t, dtype=float)
    E = np.asarray(E, dtype=float)
    if not np.all(np.isfinite(E)):
        return math.inf, math.inf
    pos = t > 0
    if pos.sum() < 2:
        return 0.0, 0.0
    slope = np.polyfit(t[pos], np.log1p(np.maximum(E[pos], 0.0)), 1)[0]
    c2 = max(0.0, float(slope))
    c1 = max(0.0, float(np.max((E[pos] * np.exp(-c2 * t[pos]) - E[0]) / t[pos])))
    return c1, c2


def gronwall_holds(t, E, c1, c2, rtol=1e-12):
    t = np.asarray(t)
    bound = (E[0] + c1 * t) * np.exp(c2 * t)
    return bool(np.all(np.asarray(E) <= bound * (1 + rtol) + rtol))


def envelope_constant(t, dev, frac=0.1):
    """max |W - I|_inf / sqrt(t) over the first ``frac`` of the run (t > 0)."""
    t = np.asarray(t, dtype=float)
    dev = np.asarray(dev, dtype=float)
    if len(t) < 2:
        return 0.0
    cut = t[0] + frac * (t[-1] - t[0])
    sel = (t > 0) & (t <= cut + 1e-15)
    if not sel.any():
        sel = t > 0
        sel[np.argmax(sel) + 1 :] = False
    return float(np.max(dev[sel] / np.sqrt(t[sel])))


# ---------------------------------------------------------------------------
# property suites for the command line


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    tol: float

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} measured={self.measured:.3e} tol={self.tol:.1e}"


def _suite_core(rng):
    from .field import Grid, curl_tensor, exp_skew, grad_vec, invariants, skew_from_axis, skew_part, sym_part

    out = []
    A = rng.standard_normal((50, 3, 3))
    e = float(np.abs(sym_part(A) + skew_part(A) - A).max())
    out.append(Check("sym+skew reconstructs", e <= 1e-15, e, 1e-15))
    ax = rng.standard_normal((100, 3))
    ax *= (np.pi * rng.random(100) / np.linalg.norm(ax, axis=1))[:, None]
    R = exp_skew(skew_from_axis(ax))
    e = float(np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max())
    out.append(Check("exp_skew orthogonal", e <= 1e-12, e, 1e-12))
    Q = np.linalg.qr(rng.standard_normal((3, 3)))[0]
    S = A + np.swapaxes(A, -1, -2)
    e = max(float(np.abs(a - b).max() / (1 + np.abs(b).max())) for a, b in zip(invariants(Q @ S @ Q.T), invariants(S)))
    out.append(Check("invariants rotation invariant", e <= 1e-12, e, 1e-12))
    g = Grid((8, 8, 8))
    c = g.coords
    lin = np.stack([c[..., 0] + 2 * c[..., 1], -c[..., 2], 3 * c[..., 0]], axis=-1)
    e = float(np.abs(grad_vec(g, lin) - np.array([[1, 2, 0], [0, 0, -1], [3, 0, 0.0]])).max())
    out.append(Check("grad exact on linear fields", e <= 1e-12, e, 1e-12))
    u = np.stack([np.sin(c[..., 0]) * c[..., 1], np.cos(c[..., 2]), c[..., 0] * c[..., 2]], axis=-1)
    e = float(np.abs(curl_tensor(g, grad_vec(g, u))).max())
    out.append(Check("curl grad vanishes", e <= 1e-12, e, 1e-12))
    return out


def _suite_convex(rng):
    from .convex import BarrierParams, barrier_gradient, barrier_value, prox_psi_D, prox_radial_bisection, yosida_dpsi_D
    from .field import frob

    out = []
    worst = 0.0
    for k in (0.5, 1.0, 2.0):
        for lam in np.linspace(0.05, 1.0, 10):
            for r in np.linspace(0.0, 5.0, 30):
                A = r * np.eye(3) / np.sqrt(3)
                worst = max(worst, abs(float(frob(prox_psi_D(A, k, lam))) - prox_radial_bisection(r, k, lam)))
    out.append(Check("prox matches bisection", worst <= 1e-10, worst, 1e-10))
    A = rng.standard_normal((1000, 3, 3))
    B = rng.standard_normal((1000, 3, 3))
    lam, k = 0.1, 1.0
    dY = yosida_dpsi_D(A, k, lam) - yosida_dpsi_D(B, k, lam)
    mono = float(np.min(np.sum(dY * (A - B), axis=(1, 2))))
    out.append(Check("yosida monotone", mono >= 0, mono, 0.0))
    lip = float(np.max(frob(dY) / frob(A - B) * lam))
    out.append(Check("yosida 1/lambda Lipschitz", lip <= 1 + 1e-12, lip, 1.0))
    p = BarrierParams()
    v = barrier_value(np.eye(3), p)
    out.append(Check("barrier zero at identity", v == 0.0, v, 0.0))
    worst = 0.0
    for _ in range(20):
        Q = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        W = Q @ np.diag(rng.uniform(0.2, 1.5, 3)) @ Q.T
        G = barrier_gradient(W, p)
        F = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                E = np.zeros((3, 3))
                E[i, j] = 1e-6
                F[i, j] = (barrier_value(W + E, p) - barrier_value(W - E, p)) / 2e-6
        worst = max(worst, float(np.abs(G - F).max() / (1 + np.abs(G).max())))
    out.append(Check("barrier gradient vs central differences", worst <= 1e-6, worst, 1e-6))
    return out


def _suite_elliptic(rng):
    from .elliptic import MixedPoissonProblem, ClampedFourthOrder
    from .field import BoundaryPartition, Grid
    from .helmholtz import HodgeDecomposer

    out = []
    g = Grid((10, 10, 10))
    bc = BoundaryPartition(g)
    hd = HodgeDecomposer(g, bc)
    T = np.eye(3) + 0.1 * rng.standard_normal(g.shape + (3, 3))
    sp_ = hd.decompose_tensor(T)
    out.append(Check("hodge orthogonality", sp_.orthogonality_residual <= 1e-8, sp_.orthogonality_residual, 1e-8))
    out.append(Check("hodge reconstruction", sp_.reconstruction_residual <= 1e-8, sp_.reconstruction_residual, 1e-8))
    cx = hd.cx
    lap = hd.laplace
    f1, f2 = rng.standard_normal((2, cx.n_cells))
    u1 = lap.solve(MixedPoissonProblem(volume=f1)).values
    u2 = lap.solve(MixedPoissonProblem(volume=f2)).values
    u12 = lap.solve(MixedPoissonProblem(volume=2 * f1 - 3 * f2)).values
    e = float(np.abs(u12 - 2 * u1 + 3 * u2).max() / np.abs(u12).max())
    out.append(Check("mixed Laplace linear", e <= 1e-10, e, 1e-10))
    ups = ClampedFourthOrder(g, bc)
    f, h = rng.standard_normal((2,) + g.shape + (3,))
    a = g.inner(ups.solve(f), h)
    b = g.inner(f, ups.solve(h))
    e = abs(a - b) / max(abs(a), 1e-300)
    out.append(Check("upsilon inverse self-adjoint", e <= 1e-10, e, 1e-10))
    return out


SUITES = {"core": _suite_core, "convex": _suite_convex, "elliptic": _suite_elliptic}


def run_suites(which="all", seed=0):
    names = list(SUITES) if which == "all" else [which]
    rng = np.random.default_rng(seed)
    out = []
    for n in names:
        out += SUITES[n](rng)
    return out
