"""Galerkin bases, the coupled modal ODE system and its time integration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .convex import (
    BarrierDomainError,
    BarrierParams,
    DefectPotentialParams,
    barrier_gradient,
    barrier_integral,
    dissipation_rate,
    moreau_envelope,
    yosida_dpsi_D,
)
from .elliptic import (
    LerayProjector,
    MixedLaplace,
    MixedPoissonProblem,
    ClampedFourthOrder,
    eigenpairs_laplace_mixed,
    eigenpairs_upsilon,
)
from .field import (
    BoundaryPartition,
    EnergyForms,
    Grid,
    axis_of_skew,
    exp_skew,
    invariants,
    log_rotation,
    skew_from_axis,
)
from .mimetic import MimeticComplex


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration and forcing templates

PROFILES = ("uniform", "ramp_x", "bump")
ENVELOPES = ("constant", "ramp", "sine")
INTEGRATORS = ("semi_implicit", "rk4")


@dataclass
class ForcingSpec:
    amplitude: float = 0.0
    profile: str = "uniform"
    direction: str = "compress"
    envelope: str = "constant"
    period: float = 1.0
    growth: float = 10.0  # linear-growth constant of the clamp

    def envelope_at(self, t):
        if self.envelope == "constant":
            return 1.0
        if self.envelope == "ramp":
            return min(1.0, t / self.period)
        return math.sin(2.0 * math.pi * t / self.period)

    def profile_on(self, grid: Grid):
        x = grid.coords
        L = grid.lengths
        if self.profile == "uniform":
            return np.ones(grid.shape)
        if self.profile == "ramp_x":
            return x[..., 0] / L[0]
        s = np.ones(grid.shape)
        for a in range(3):
            s = s * np.sin(np.pi * x[..., a] / L[a]) ** 2
        return s


W_DIRECTIONS = {
    "compress": -np.eye(3),
    "stretch": np.eye(3),
    "shear": np.array([[0.0, 1, 0], [1, 0, 0], [0, 0, 0]]),
}
AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class RunConfig:
    n: tuple = (12, 12, 12)
    lengths: tuple = (1.0, 1.0, 1.0)
    dirichlet: str = "x0"
    m: int = 1
    alpha: float = 0.1
    k: float = 1.0
    lam: float = 0.1
    eps_smooth: float = 0.05
    dt: float | None = None  # None picks the stability bound
    t_end: float = 1.0
    exit_margin: float = 1e-6  # relative to each invariant's beta
    integrator: str = "semi_implicit"
    rotation_derivative: str = "exact"
    cadence: int = 1
    seed: int = 0
    init_xdot: float = 0.0
    init_ydot: float = 0.0
    w_ext: ForcingSpec = field(default_factory=ForcingSpec)
    omega_ext: ForcingSpec = field(default_factory=lambda: ForcingSpec(direction="z"))
    f_ext: ForcingSpec = field(default_factory=lambda: ForcingSpec(direction="x"))

    def validate(self):
        if len(self.n) != 3 or min(self.n) < 3:
            raise ConfigError("grid.n needs three counts >= 3")
        if min(self.lengths) <= 0:
            raise ConfigError("grid.lengths must be positive")
        if self.m < 1:
            raise ConfigError("model.m must be >= 1")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError("time.dt must be positive")
        if not self.t_end > 0:
            raise ConfigError("time.t_end must be positive")
        if not self.exit_margin > 0:
            raise ConfigError("exit.margin must be positive")
        if self.cadence < 1:
            raise ConfigError("output.cadence must be >= 1")
        if self.integrator not in INTEGRATORS:
            raise ConfigError(f"time.integrator must be one of {INTEGRATORS}")
        if self.rotation_derivative not in ("exact", "commuting"):
            raise ConfigError("model.rotation_derivative must be exact or commuting")
        for name, f, dirs in (
            ("w_ext", self.w_ext, W_DIRECTIONS),
            ("omega_ext", self.omega_ext, AXES),
            ("f_ext", self.f_ext, AXES),
        ):
            if f.profile not in PROFILES or f.envelope not in ENVELOPES or f.direction not in dirs:
                raise ConfigError(f"bad forcing.{name} template")
            if not f.period > 0 or not f.growth > 0 or not math.isfinite(f.amplitude):
                raise ConfigError(f"bad forcing.{name} parameters")
        try:
            DefectPotentialParams(self.k, self.lam)
            BarrierParams(self.alpha, self.eps_smooth)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    @property
    def forced(self):
        return any(f.amplitude != 0 for f in (self.w_ext, self.omega_ext, self.f_ext))


# ---------------------------------------------------------------------------
# bases


def _gram_schmidt(fields, w):
    """Orthonormalize tensor fields in the weighted pairing sum_n w_n A_n : B_n (two passes)."""
    out = []
    for f in fields:
        v = f.copy()
        for _ in range(2):
            for q in out:
                v -= np.sum(w[..., None, None] * v * q) * q
        nv = math.sqrt(np.sum(w[..., None, None] * v * v))
        if nv < 1e-12:
            continue
        out.append(v / nv)
    return np.array(out)


class GalerkinBasis:
    """Symmetric and skew tensor bases from clamped eigenfunctions, vector basis from mixed Laplacian modes.

    For each scalar clamped eigenfunction phi_k the symmetric family holds
    phi_k^2 (e_a x e_b + e_b x e_a) for a <= b and the skew family
    phi_k^2 (e_a x e_b - e_b x e_a) for a < b, orthonormalized together.
    The vector family is theta_k e_c with theta_k the mixed Laplacian modes.
    """

    def __init__(self, grid: Grid, bc: BoundaryPartition, m: int, forms: EnergyForms | None = None,
                 cx: MimeticComplex | None = None, laplace: MixedLaplace | None = None):
        self.grid, self.bc, self.m = grid, bc, m
        self.forms = forms or EnergyForms(grid)
        self.cx = cx or MimeticComplex(grid, bc)
        self.laplace = laplace or MixedLaplace(self.cx)
        self.upsilon = ClampedFourthOrder(grid, bc, self.forms)
        ev = eigenpairs_upsilon(self.upsilon, m)
        self.gamma = ev.values
        self.phi = ev.functions
        self.upsilon_residuals = ev.residuals
        lv = eigenpairs_laplace_mixed(self.laplace, m)
        self.rho_scalar = lv.values
        self.theta = lv.functions  # extended cell potentials
        self.laplace_residuals = lv.residuals

        w = grid.weights
        sym, skew = [], []
        for phi in self.phi:
            q = phi**2
            for a in range(3):
                for b in range(a, 3):
                    E = np.zeros((3, 3))
                    E[a, b] += 1.0
                    E[b, a] += 1.0
                    sym.append(q[..., None, None] * E)
            for a, b in ((0, 1), (0, 2), (1, 2)):
                E = np.zeros((3, 3))
                E[a, b], E[b, a] = 1.0, -1.0
                skew.append(q[..., None, None] * E)
        self.S = _gram_schmidt(sym, w)
        self.A = _gram_schmidt(skew, w)
        self.S = 0.5 * (self.S + np.swapaxes(self.S, -1, -2))
        self.A = 0.5 * (self.A - np.swapaxes(self.A, -1, -2))
        self.MS0, self.MS1, self.MS2 = self._grams(self.S)
        self.MA0, self.MA1, self.MA2 = self._grams(self.A)
        # vector family: index l = 3 k + c
        self.rho = np.repeat(self.rho_scalar, 3)
        self.grad_theta = np.stack([self.cx.grad_dual @ th for th in self.theta])  # (m, F)

    def _grams(self, B):
        N = self.grid.n_nodes
        n = len(B)
        flat = B.reshape(n, N, 9)
        cols = np.transpose(flat, (1, 0, 2)).reshape(N, n * 9)
        out = []
        for K in (self.forms.mass, self.forms.stiff1, self.forms.stiff2):
            KB = (K @ cols).reshape(N, n, 9)
            G = np.einsum("nic,jnc->ij", KB, flat)
            out.append(0.5 * (G + G.T))
        return out

    @property
    def n_sym(self):
        return len(self.S)

    @property
    def n_skew(self):
        return len(self.A)

    @property
    def n_vec(self):
        return 3 * len(self.theta)

    def xi(self, i):
        """Vector eigenfunction phi_k e_c for i = 3 k + c."""
        k, c = divmod(i, 3)
        v = np.zeros(self.grid.shape + (3,))
        v[..., c] = self.phi[k]
        return v

    def W_of(self, x):
        return np.eye(3) + np.tensordot(x, self.S, axes=1)

    def Theta_of(self, y):
        return np.tensordot(y, self.A, axes=1)

    def u_of(self, z):
        """Displacement as extended cell potentials per component, shape (3, C + B)."""
        cx = self.cx
        out = np.zeros((3, cx.n_cells + cx.n_bfaces))
        for l, zl in enumerate(z):
            k, c = divmod(l, 3)
            out[c] += zl * self.theta[k]
        return out

    def _pair(self, B, F):
        w = self.grid.weights
        return np.einsum("inab,nab->i", B.reshape(len(B), -1, 3, 3), (w[..., None, None] * F).reshape(-1, 3, 3))

    def project_PS(self, F):
        return np.linalg.solve(self.MS0, self._pair(self.S, np.asarray(F, dtype=float)))

    def project_PA(self, F):
        return np.linalg.solve(self.MA0, self._pair(self.A, np.asarray(F, dtype=float)))

    def project_PV(self, u):
        """Coefficients of a displacement given on nodes (nx, ny, nz, 3) or as cell values (C, 3)."""
        cx = self.cx
        u = np.asarray(u, dtype=float)
        if u.shape[:3] == self.grid.shape:
            cells = np.stack([(cx.node_to_potential @ u[..., c].ravel())[: cx.n_cells] for c in range(3)], axis=-1)
        else:
            cells = u[: cx.n_cells]
        out = np.zeros(self.n_vec)
        for l in range(self.n_vec):
            k, c = divmod(l, 3)
            out[l] = np.sum(cx.m3 * self.theta[k][: cx.n_cells] * cells[:, c])
        return out


def build_basis(grid, bc, m, **kw) -> GalerkinBasis:
    return GalerkinBasis(grid, bc, m, **kw)


# ---------------------------------------------------------------------------
# rotation kinematics


def left_jacobian(theta):
    """J with d/dt exp([theta]) = [J theta_dot] exp([theta]) for axis vectors theta (..., 3)."""
    t2 = np.sum(theta * theta, axis=-1)
    t = np.sqrt(t2)
    small = t < 1e-4
    safe = np.where(small, 1.0, t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - np.sin(safe)) / safe**3)
    K = skew_from_axis(theta)
    I = np.broadcast_to(np.eye(3), K.shape)
    return I + b[..., None, None] * K + c[..., None, None] * (K @ K)


# ---------------------------------------------------------------------------
# state


@dataclass
class SimState:
    t: float
    x: np.ndarray
    xdot: np.ndarray
    y: np.ndarray
    ydot: np.ndarray
    z: np.ndarray
    zdot: np.ndarray
    step: int = 0
    cache: dict = field(default_factory=dict, repr=False)

    def vector(self):
        return np.concatenate([self.x, self.xdot, self.y, self.ydot, self.z, self.zdot])

    @classmethod
    def from_vector(cls, q, sizes, t, step=0):
        nS, nA, nV = sizes
        o = np.cumsum([0, nS, nS, nA, nA, nV, nV])
        p = [q[o[i] : o[i + 1]].copy() for i in range(6)]
        return cls(t, *p, step=step)


@dataclass
class Evaluation:
    accel: np.ndarray  # nonlinear part of dq/dt
    energy: dict
    d_actual: float
    p_ext: float
    d_rate: float
    margins: tuple  # per invariant: (min margin, argmin node)
    zddot: np.ndarray
    W: np.ndarray
    Theta: np.ndarray
    curlZ: np.ndarray  # (3, F) face values


@dataclass
class ExitReport:
    exited: bool
    t_hat: float | None = None
    invariant: str | None = None
    location: tuple | None = None
    margin: float | None = None


INVARIANT_NAMES = ("det", "trcof", "tr")


class GalerkinModel:
    def __init__(self, cfg: RunConfig, basis: GalerkinBasis | None = None):
        cfg.validate()
        self.cfg = cfg
        self.grid = Grid(cfg.n, cfg.lengths)
        try:
            self.bc = BoundaryPartition.from_spec(self.grid, cfg.dirichlet)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if basis is None:
            forms = EnergyForms(self.grid)
            cx = MimeticComplex(self.grid, self.bc)
            basis = GalerkinBasis(self.grid, self.bc, cfg.m, forms=forms, cx=cx)
        self.basis = b = basis
        self.forms = b.forms
        self.cx = b.cx
        self.leray = LerayProjector(self.cx, b.laplace)
        self.dp = DefectPotentialParams(cfg.k, cfg.lam)
        self.bp = BarrierParams(cfg.alpha, cfg.eps_smooth)
        self.sizes = (b.n_sym, b.n_skew, b.n_vec)
        self.MS = b.MS0 + b.MS1 + b.MS2
        self.MA = b.MA0 + b.MA1 + b.MA2
        self.KA = b.MA1 + b.MA2
        self._cMS = sla.cho_factor(self.MS)
        self._cMA = sla.cho_factor(self.MA)
        self.w = self.grid.weights
        self.A_axes = axis_of_skew(b.A)  # (nA, nx, ny, nz, 3)
        self.grad_theta_w = b.grad_theta * self.cx.m2  # weighted face gradients of theta_k

        rho_max = float(np.max(b.rho))
        self.dt_bound = cfg.lam / (2.0 * rho_max)
        if cfg.dt is None:
            steps = math.ceil(cfg.t_end / self.dt_bound)
            self.dt = cfg.t_end / steps
        else:
            if cfg.dt > self.dt_bound * (1 + 1e-12):
                raise ConfigError(f"time.dt={cfg.dt} exceeds the stability bound {self.dt_bound:.6g}")
            self.dt = cfg.dt
        self._build_linear()
        self._build_forcing()

    # -- linear part ------------------------------------------------------

    def _build_linear(self):
        nS, nA, nV = self.sizes
        n = 2 * (nS + nA + nV)
        L = np.zeros((n, n))
        o = np.cumsum([0, nS, nS, nA, nA, nV, nV])
        IS = np.eye(nS)
        L[o[0] : o[1], o[1] : o[2]] = IS
        L[o[1] : o[2], o[0] : o[1]] = -IS
        L[o[1] : o[2], o[1] : o[2]] = -IS
        MKA = sla.cho_solve(self._cMA, 0.5 * self.KA)
        L[o[2] : o[3], o[3] : o[4]] = np.eye(nA)
        L[o[3] : o[4], o[2] : o[3]] = -MKA
        L[o[3] : o[4], o[3] : o[4]] = -MKA
        L[o[4] : o[5], o[5] : o[6]] = np.eye(nV)
        L[o[5] : o[6], o[5] : o[6]] = -np.diag(self.basis.rho / self.cfg.lam)
        self.L = L
        self.offsets = o
        self._expo = {}

    def _phi(self, h):
        if h not in self._expo:
            n = self.L.shape[0]
            aug = np.zeros((2 * n, 2 * n))
            aug[:n, :n] = h * self.L
            aug[:n, n:] = h * np.eye(n)
            E = sla.expm(aug)
            self._expo[h] = (E[:n, :n], E[:n, n:])
        return self._expo[h]

    # -- forcing ----------------------------------------------------------

    def _build_forcing(self):
        cfg, g = self.cfg, self.grid
        self.w_profile = cfg.w_ext.profile_on(g)[..., None, None] * W_DIRECTIONS[cfg.w_ext.direction]
        ax = np.zeros(3)
        ax[AXES[cfg.omega_ext.direction]] = 1.0
        self.o_profile = cfg.omega_ext.profile_on(g)[..., None, None] * skew_from_axis(ax)
        # grad G_L of the unit body-force template, per row, as face values
        self.gF = np.zeros((3, self.cx.n_faces))
        if cfg.f_ext.amplitude != 0:
            prof = cfg.f_ext.profile_on(g)
            cells = (self.cx.node_to_potential @ prof.ravel())[: self.cx.n_cells]
            sol = self.basis.laplace.solve(MixedPoissonProblem(volume=cells))
            self.gF[AXES[cfg.f_ext.direction]] = self.cx.grad_dual @ sol.values

    def _h2_norm(self, F):
        return math.sqrt(self.forms.l2(F) + self.forms.h1(F) + self.forms.h2(F))

    def _clamped(self, spec: ForcingSpec, profile, state_field, t):
        if spec.amplitude == 0:
            return None
        F = spec.amplitude * spec.envelope_at(t) * profile
        nF = math.sqrt(self.forms.l2(F))
        if nF == 0:
            return None
        cap = spec.growth * (self._h2_norm(state_field) + 1.0)
        return F * min(1.0, cap / nF)

    # -- evaluation -------------------------------------------------------

    def margins(self, W):
        tr, tc, det = invariants(W)
        out = []
        for x, fl, beta in zip((det, tc, tr), self.bp.floors, self.bp.betas):
            rel = (x - fl) / beta
            i = int(np.argmin(rel))
            out.append((float(rel.ravel()[i]), i))
        return tuple(out)

    def _defect(self, X):
        """curl Z faces, cell values, Yosida stress, energy and the node adjoint field."""
        cx = self.cx
        nC = cx.n_cells
        if not np.any(X):
            z = np.zeros((3, cx.n_faces))
            return z, 0.0, np.zeros_like(X)
        r = cx.flux_rows(X)
        curl = self.leray.project_faces(r)
        cells = np.stack([(cx.face_to_cell @ curl[i]).reshape(3, nC).T for i in range(3)], axis=1)  # (C, 3, 3)
        E = cx.cell_volume * float(np.sum(moreau_envelope(cells, self.dp.k, self.dp.lam)))
        Sig = yosida_dpsi_D(cells, self.dp.k, self.dp.lam)
        s = np.stack([(cx.face_to_cell.T @ (cx.cell_volume * Sig[:, i, :].T.ravel())) / cx.m2 for i in range(3)])
        Ps = self.leray.project_faces(s)
        B = np.stack([cx.face_adjoint_to_nodes(Ps[i]) for i in range(3)], axis=-2)
        return curl, E, B

    def defect_coupling(self, R, W):
        """Modal defect forces (sym, skew) for node fields R, W, plus curl Z faces and the defect energy."""
        b = self.basis
        RW = R @ W
        curl, E, B = self._defect(RW - np.eye(3))
        w = self.w[..., None, None]
        fx = np.einsum("inab,nab->i", b.S.reshape(b.n_sym, -1, 3, 3), (w * (np.swapaxes(R, -1, -2) @ B)).reshape(-1, 3, 3))
        C = B @ np.swapaxes(RW, -1, -2)
        th = axis_of_skew(log_rotation(R))
        J = left_jacobian(th) if self.cfg.rotation_derivative == "exact" else np.broadcast_to(np.eye(3), th.shape + (3,))
        Jg = np.einsum("...ba,...b->...a", J, axis_of_skew(C - np.swapaxes(C, -1, -2)))
        fy = np.einsum("inc,nc->i", self.A_axes.reshape(b.n_skew, -1, 3), (self.w[..., None] * Jg).reshape(-1, 3))
        return fx, fy, curl, E

    def evaluate(self, q, t, need_energy=True) -> Evaluation:
        b, cx, cfg = self.basis, self.cx, self.cfg
        st = SimState.from_vector(q, self.sizes, t)
        W = b.W_of(st.x)
        Th = b.Theta_of(st.y)
        R = exp_skew(Th)
        Wd = np.tensordot(st.xdot, b.S, axes=1)
        Thd = np.tensordot(st.ydot, b.A, axes=1)
        th = axis_of_skew(Th)
        J = left_jacobian(th) if cfg.rotation_derivative == "exact" else np.broadcast_to(np.eye(3), th.shape + (3,))
        spin = skew_from_axis(np.einsum("...ab,...b->...a", J, axis_of_skew(Thd)))  # dR/dt R^T
        RW = R @ W
        V = spin @ RW + R @ Wd

        margins = self.margins(W)
        bar_grad = barrier_gradient(W, self.bp)  # raises outside the domain

        curl, E_def, B = self._defect(RW - np.eye(3))

        # displacement modes: z'' = -(rho / lam) z' + p / lam
        fluxV = cx.flux_rows(V)
        p = (self.grad_theta_w @ fluxV.T).ravel()  # index 3 k + c
        zdd = (-b.rho * st.zdot + p) / cfg.lam
        fe = cfg.f_ext.amplitude * cfg.f_ext.envelope_at(t) if cfg.f_ext.amplitude else 0.0
        Af = -fe * self.gF
        for l in range(b.n_vec):
            k, c = divmod(l, 3)
            Af[c] = Af[c] + (zdd[l] / b.rho[l]) * b.grad_theta[k]
        if np.any(Af):
            B = B + np.stack([cx.face_adjoint_to_nodes(Af[c]) for c in range(3)], axis=-2)

        wdims = self.w[..., None, None]
        RtB = np.swapaxes(R, -1, -2) @ B
        f_x = -np.einsum("inab,nab->i", b.S.reshape(b.n_sym, -1, 3, 3), (wdims * (RtB + bar_grad)).reshape(-1, 3, 3))
        C = B @ np.swapaxes(RW, -1, -2)
        g = axis_of_skew(C - np.swapaxes(C, -1, -2))
        Jg = np.einsum("...ba,...b->...a", J, g)
        f_y = -np.einsum("inc,nc->i", self.A_axes.reshape(b.n_skew, -1, 3), (self.w[..., None] * Jg).reshape(-1, 3))

        p_ext = 0.0
        Wext = self._clamped(cfg.w_ext, self.w_profile, W, t)
        if Wext is not None:
            fw = b._pair(b.S, Wext)
            f_x += fw
            p_ext += float(st.xdot @ fw)
        Oext = self._clamped(cfg.omega_ext, self.o_profile, Th, t)
        if Oext is not None:
            fo = b._pair(b.A, Oext)
            f_y += fo
            p_ext += float(st.ydot @ fo)
        if fe:
            p_ext += fe * sum(cx.face_inner(self.gF[c], fluxV[c]) for c in range(3))

        o = self.offsets
        acc = np.zeros_like(q)
        acc[o[1] : o[2]] = sla.cho_solve(self._cMS, f_x)
        acc[o[3] : o[4]] = sla.cho_solve(self._cMA, f_y)
        acc[o[5] : o[6]] = p / cfg.lam

        d_act = float(st.xdot @ self.MS @ st.xdot + 0.5 * st.ydot @ self.KA @ st.ydot + cfg.lam * np.sum(zdd**2 / b.rho))
        energy = {}
        d_rate = 0.0
        if need_energy:
            bar, _ = barrier_integral(W, self.w, self.bp)
            energy = {
                "elastic": 0.5 * float(st.x @ self.MS @ st.x),
                "barrier": bar,
                "defect": E_def,
                "rotational": 0.25 * float(st.y @ self.KA @ st.y),
                "kinetic": 0.5 * float(st.xdot @ self.MS @ st.xdot + st.ydot @ self.MA @ st.ydot + st.zdot @ st.zdot),
            }
            energy["total"] = sum(energy.values())
            d_rate = dissipation_rate(self.forms, Wd, spin)
        return Evaluation(acc, energy, d_act, p_ext, d_rate, margins, zdd, W, Th, curl)

    # -- stepping ---------------------------------------------------------

    def initial_state(self) -> SimState:
        nS, nA, nV = self.sizes
        z = lambda n: np.zeros(n)
        st = SimState(0.0, z(nS), z(nS), z(nA), z(nA), z(nV), z(nV))
        rng = np.random.default_rng(self.cfg.seed)
        if self.cfg.init_xdot:
            st.xdot = self.cfg.init_xdot * rng.standard_normal(nS)
        if self.cfg.init_ydot:
            st.ydot = self.cfg.init_ydot * rng.standard_normal(nA)
        return st

    def advance(self, q, t, ev0: Evaluation | None = None):
        """One step from (q, t); returns the new vector and the evaluation used at the start."""
        h = self.dt
        ev0 = ev0 or self.evaluate(q, t, need_energy=False)
        if self.cfg.integrator == "semi_implicit":
            Eh, Ph = self._phi(h / 2)
            E1, P1 = self._phi(h)
            qm = Eh @ q + Ph @ ev0.accel
            evm = self.evaluate(qm, t + h / 2, need_energy=False)
            return E1 @ q + P1 @ evm.accel
        f = lambda qq, tt, ev=None: self.L @ qq + (ev or self.evaluate(qq, tt, need_energy=False)).accel
        k1 = f(q, t, ev0)
        k2 = f(q + 0.5 * h * k1, t + 0.5 * h)
        k3 = f(q + 0.5 * h * k2, t + 0.5 * h)
        k4 = f(q + h * k3, t + h)
        return q + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    def step(self, state: SimState) -> SimState:
        q = self.advance(state.vector(), state.t)
        return SimState.from_vector(q, self.sizes, state.t + self.dt, state.step + 1)

    def fields(self, state: SimState):
        """Node fields W, Theta, R and the displacement at nodes."""
        b = self.basis
        W = b.W_of(state.x)
        Th = b.Theta_of(state.y)
        U = b.u_of(state.z)
        u = np.stack([self.cx.potential_to_node(U[c]) for c in range(3)], axis=-1)
        return W, Th, exp_skew(Th), u


# ---------------------------------------------------------------------------
# run driver


@dataclass
class Trajectory:
    t: list = field(default_factory=list)
    E: list = field(default_factory=list)
    D: list = field(default_factory=list)  # dissipation rate in the form of the free-energy audit
    d_actual: list = field(default_factory=list)
    p_ext: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    margins: list = field(default_factory=list)
    dev_inf: list = field(default_factory=list)  # max |W - I|
    zddot: list = field(default_factory=list)
    z: list = field(default_factory=list)
    exit: ExitReport = field(default_factory=lambda: ExitReport(False))
    final: SimState | None = None


def _record(traj: Trajectory, ev: Evaluation, t, st: SimState):
    traj.t.append(t)
    traj.E.append(ev.energy["total"])
    traj.D.append(ev.d_rate)
    traj.d_actual.append(ev.d_actual)
    traj.p_ext.append(ev.p_ext)
    traj.terms.append(dict(ev.energy))
    traj.margins.append(tuple(m for m, _ in ev.margins))
    traj.dev_inf.append(float(np.max(np.abs(ev.W - np.eye(3)))))
    traj.zddot.append(ev.zddot.copy())
    traj.z.append(st.z.copy())


def _crossing(model: GalerkinModel, prev, new, t0, dt):
    """Interpolated exit time and invariant from relative margins before and after a step."""
    thr = model.cfg.exit_margin
    best = None
    for i, ((m0, _), (m1, idx)) in enumerate(zip(prev, new)):
        if m1 <= thr:
            frac = 1.0 if m0 == m1 else min(max((m0 - thr) / (m0 - m1), 0.0), 1.0)
            tc = t0 + frac * dt
            if best is None or tc < best[0]:
                best = (tc, i, idx, m1)
    return best


def run(cfg: RunConfig, model: GalerkinModel | None = None, start: SimState | None = None,
        history: Trajectory | None = None, on_step=None) -> Trajectory:
    """Integrate from rest (or from ``start``) until t_end or the first margin breach."""
    model = model or GalerkinModel(cfg)
    traj = history or Trajectory()
    st = start or model.initial_state()
    q = st.vector()
    t = st.t
    n_steps = int(round(cfg.t_end / model.dt))
    step = st.step
    ev = model.evaluate(q, t)
    if not traj.t:
        _record(traj, ev, t, st)
    while step < n_steps:
        try:
            qn = model.advance(q, t, ev)
            tn = (step + 1) * model.dt
            stn = SimState.from_vector(qn, model.sizes, tn, step + 1)
            W = model.basis.W_of(stn.x)
            mg = model.margins(W)
            hit = _crossing(model, ev.margins, mg, t, model.dt)
            if hit is None:
                evn = model.evaluate(qn, tn)
        except BarrierDomainError:
            # the half-step predictor left the domain; bracket the breach inside this step
            W = model.basis.W_of(SimState.from_vector(q, model.sizes, t).x)
            mg = tuple((-1.0, i) for _, i in model.margins(W))
            hit = _crossing(model, ev.margins, mg, t, model.dt)
            stn = None
        if hit is not None:
            tc, inv, idx, mval = hit
            loc = tuple(float(v) for v in model.grid.coords.reshape(-1, 3)[idx])
            traj.exit = ExitReport(True, tc, INVARIANT_NAMES[inv], loc, mval)
            traj.final = SimState.from_vector(q, model.sizes, t, step)
            return traj
        q, t, step, ev = qn, tn, step + 1, evn
        _record(traj, ev, t, stn)
        if on_step is not None:
            on_step(stn, traj)
    traj.final = SimState.from_vector(q, model.sizes, t, step)
    return traj
