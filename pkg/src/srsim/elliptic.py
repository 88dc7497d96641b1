"""Elliptic solves on the staggered complex: mixed Poisson, Leray projection,
divergence-free vector potentials, the clamped fourth-order operator and the
eigenpairs that seed the Galerkin bases."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from .field import BoundaryPartition, EnergyForms, Grid
from .mimetic import MimeticComplex

DIRECT_LIMIT = 60000


class SolverError(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = list(history or [])


class SPDSolver:
    """Solve K x = b for a fixed SPD matrix.

    Small systems are factorized once; larger ones use conjugate gradients with
    a Jacobi preconditioner. ``log`` receives ``iteration,residual`` CSV rows.
    """

    def __init__(self, K, tol=1e-12, maxiter=5000, method="auto", log=None):
        self.K = sp.csc_matrix(K)
        self.n = self.K.shape[0]
        self.tol = tol
        self.maxiter = maxiter
        self.log = log
        if method == "auto":
            method = "direct" if self.n <= DIRECT_LIMIT else "cg"
        self.method = method
        self.history: list = []
        if method == "direct":
            self._lu = spl.splu(self.K)
        else:
            d = self.K.diagonal()
            self._prec = spl.LinearOperator(self.K.shape, matvec=lambda r: r / d)

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if b.ndim == 2:
            return np.column_stack([self.solve(b[:, j]) for j in range(b.shape[1])])
        if not np.all(np.isfinite(b)):
            raise SolverError("non-finite right-hand side")
        nb = np.linalg.norm(b)
        if nb == 0.0:
            self.history = [(0, 0.0)]
            return np.zeros(self.n)
        if self.method == "direct":
            x = self._lu.solve(b)
            # one refinement sweep keeps the weak residual near round-off
            x += self._lu.solve(b - self.K @ x)
            res = np.linalg.norm(b - self.K @ x) / nb
            self.history = [(1, res)]
        else:
            hist = []

            def cb(xk):
                hist.append((len(hist) + 1, float(np.linalg.norm(b - self.K @ xk) / nb)))

            x, info = spl.cg(self.K, b, rtol=self.tol, maxiter=self.maxiter, M=self._prec, callback=cb)
            self.history = hist
            res = np.linalg.norm(b - self.K @ x) / nb
            if info != 0 and res > 10 * self.tol:
                raise SolverError(f"CG stalled after {info} iterations, residual {res:.3e}", hist)
        if self.log is not None:
            for it, r in self.history:
                self.log.write(f"{it},{r:.6e}\n")
        return x


def _restrict(K, rows, cols):
    return K[rows][:, cols]


# ---------------------------------------------------------------------------
# mixed Poisson problem


@dataclass
class MixedPoissonProblem:
    """Right-hand side for -div grad u with mixed boundary data.

    Exactly one of ``volume`` (cell values of f), ``div_source`` (face normal
    values of a field A, meaning the source div A) or ``curl_source`` (face
    values of a field Sigma, paired against curls of test fields) is set.
    ``dirichlet`` holds one value per boundary face (used on Dirichlet faces),
    ``neumann`` the outward flux per boundary face (used on Neumann faces).
    """

    volume: np.ndarray | None = None
    div_source: np.ndarray | None = None
    curl_source: np.ndarray | None = None
    dirichlet: np.ndarray | None = None
    neumann: np.ndarray | None = None
    tol: float = 1e-12
    maxiter: int = 5000

    def __post_init__(self):
        given = [v is not None for v in (self.volume, self.div_source, self.curl_source)]
        if sum(given) != 1:
            raise ValueError("select exactly one right-hand side form")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")


@dataclass
class PoissonSolution:
    values: np.ndarray  # cells followed by boundary faces
    residual: float
    bound_ratio: float  # ||grad u|| / ||rhs functional||, the discrete stability constant
    history: list = field(default_factory=list)


class MixedLaplace:
    """Cell-centred Laplacian with Dirichlet data on Gamma_D faces and flux data on Gamma_N faces."""

    def __init__(self, cx: MimeticComplex, tol=1e-12, maxiter=5000, log=None):
        self.cx = cx
        self.free = cx.potential_free
        G = cx.grad_dual
        K = (G.T @ sp.diags(cx.m2) @ G).tocsr()
        self.K = K
        self.Kff = _restrict(K, self.free, self.free)
        self.Kfd = _restrict(K, self.free, ~self.free)
        self.solver = SPDSolver(self.Kff, tol=tol, maxiter=maxiter, log=log)

    @property
    def n_unknowns(self):
        return int(self.free.sum())

    def load(self, p: MixedPoissonProblem) -> np.ndarray:
        """Full load vector over cells and boundary faces."""
        cx = self.cx
        b = np.zeros(cx.n_cells + cx.n_bfaces)
        if p.volume is not None:
            b[: cx.n_cells] = cx.m3 * np.asarray(p.volume, dtype=float).ravel()
        elif p.div_source is not None:
            # weak form of Delta u = div A with (grad u - A).n = 0 on Gamma_N
            b = cx.grad_dual.T @ (cx.m2 * p.div_source)
        if p.neumann is not None:
            b[cx.n_cells :] += np.where(cx.bface_dirichlet, 0.0, cx.bface_area * p.neumann)
        return b

    def solve(self, p: MixedPoissonProblem) -> PoissonSolution:
        if p.curl_source is not None:
            raise ValueError("curl-form sources belong to the divergence-free vector solve")
        cx = self.cx
        b = self.load(p)
        u = np.zeros(cx.n_cells + cx.n_bfaces)
        if p.dirichlet is not None:
            gd = np.asarray(p.dirichlet, dtype=float)[cx.bface_dirichlet]
            u[~self.free] = gd
        rhs = b[self.free] - self.Kfd @ u[~self.free]
        if not np.all(np.isfinite(rhs)):
            raise SolverError("non-finite data")
        u[self.free] = self.solver.solve(rhs)
        nb = np.linalg.norm(rhs)
        res = float(np.linalg.norm(self.Kff @ u[self.free] - rhs) / nb) if nb > 0 else 0.0
        gnorm = cx.face_norm(cx.grad_dual @ u)
        # dual norm of the load through the inverse: sqrt(b^T K^-1 b) equals ||grad u|| for zero Dirichlet data
        dual = np.sqrt(max(float(rhs @ u[self.free]), 0.0)) if p.dirichlet is None else gnorm
        ratio = gnorm / dual if dual > 0 else 0.0
        return PoissonSolution(u, res, ratio, list(self.solver.history))

    def solve_free(self, rhs_free: np.ndarray) -> np.ndarray:
        """Zero-Dirichlet solve from a load restricted to free unknowns; returns the full vector."""
        u = np.zeros(self.cx.n_cells + self.cx.n_bfaces)
        u[self.free] = self.solver.solve(rhs_free)
        return u

    def potential_of_flux(self, r: np.ndarray) -> np.ndarray:
        """Potential q with grad q the M2-projection of face field r onto gradients."""
        b = self.cx.grad_dual.T @ (self.cx.m2 * r)
        return self.solve_free(b[self.free])


def solve_laplace_mixed(cx: MimeticComplex, p: MixedPoissonProblem) -> PoissonSolution:
    return MixedLaplace(cx, tol=p.tol, maxiter=p.maxiter).solve(p)


# ---------------------------------------------------------------------------
# Leray projection and divergence-free vector potentials


class LerayProjector:
    """Row-wise projection of face fields onto the divergence-free subspace.

    The result has zero divergence in every cell and zero normal flux on the
    Neumann faces; it is orthogonal in the face inner product to every
    gradient of a potential vanishing on the Dirichlet faces.
    """

    def __init__(self, cx: MimeticComplex, laplace: MixedLaplace | None = None):
        self.cx = cx
        self.laplace = laplace or MixedLaplace(cx)

    def project_faces(self, r: np.ndarray) -> np.ndarray:
        r = np.atleast_2d(r)
        out = np.empty_like(r)
        for i in range(r.shape[0]):
            q = self.laplace.potential_of_flux(r[i])
            out[i] = r[i] - self.cx.grad_dual @ q
        return out

    def project(self, F: np.ndarray) -> np.ndarray:
        """Project a node tensor field; returns the divergence-free face values per row."""
        return self.project_faces(self.cx.flux_rows(F))


def leray_project(cx: MimeticComplex, F: np.ndarray) -> np.ndarray:
    return LerayProjector(cx).project(F)


class CurlPotentialSolver:
    """Divergence-free edge potential Z (vanishing on Gamma_N) for curl-form sources.

    Solves <curl Z, curl V> + <div Z, div V> = <S, curl V> over edge fields
    vanishing on the closed Neumann boundary, where div acts on the nodes not
    in the closed Neumann boundary. The minimizer is weakly divergence free and
    curl Z is the projection of S onto the range of curl.
    """

    def __init__(self, cx: MimeticComplex, tol=1e-12, maxiter=5000, log=None):
        self.cx = cx
        e = cx.edge_free
        nf = cx.node_free
        d1 = cx.d1[:, e]
        M1d0 = sp.diags(cx.m1[e]) @ cx.d0[e][:, nf]
        self.curlcurl = (d1.T @ sp.diags(cx.m2) @ d1).tocsr()
        self.gauge = (M1d0 @ sp.diags(1.0 / cx.m0[nf]) @ M1d0.T).tocsr()
        self.K = (self.curlcurl + self.gauge).tocsr()
        self._d1 = d1
        self.solver = SPDSolver(self.K, tol=tol, maxiter=maxiter, log=log)

    def solve_faces(self, s: np.ndarray) -> np.ndarray:
        """Edge potential rows (k, E) for face source rows (k, F)."""
        s = np.atleast_2d(s)
        cx = self.cx
        out = np.zeros((s.shape[0], cx.n_edges))
        for i in range(s.shape[0]):
            rhs = self._d1.T @ (cx.m2 * s[i])
            out[i, cx.edge_free] = self.solver.solve(rhs)
        return out

    def solve(self, Sigma: np.ndarray) -> np.ndarray:
        """Edge potential rows for a node tensor source (quadrature of <Sigma, curl V>)."""
        return self.solve_faces(self.cx.flux_rows(Sigma))

    def divergence(self, Z: np.ndarray) -> np.ndarray:
        """Weak divergence of each row on the free nodes (zero for solver output)."""
        cx = self.cx
        return np.stack([cx.d0[:, cx.node_free].T @ (cx.m1 * Z[i]) for i in range(Z.shape[0])])


def solve_projected_laplace(cx: MimeticComplex, Sigma: np.ndarray) -> np.ndarray:
    return CurlPotentialSolver(cx).solve(Sigma)


# ---------------------------------------------------------------------------
# clamped fourth-order operator


def clamped_nodes(bc: BoundaryPartition) -> np.ndarray:
    """Nodes fixed by the clamped condition: each Dirichlet face layer and the layer next to it."""
    n = bc.grid.shape
    m = np.zeros(n, dtype=bool)
    for f in bc.dirichlet_faces:
        a = "xyz".index(f[0])
        sl = [slice(None)] * 3
        sl[a] = slice(0, 2) if f[1] == "0" else slice(n[a] - 2, n[a])
        m[tuple(sl)] = True
    return m


class ClampedFourthOrder:
    """Scalar clamped operator <grad grad v, grad grad w> + <grad v, grad w>, applied per component."""

    def __init__(self, grid: Grid, bc: BoundaryPartition, forms: EnergyForms | None = None, tol=1e-12):
        self.grid = grid
        self.bc = bc
        self.forms = forms or EnergyForms(grid)
        self.free = ~clamped_nodes(bc).ravel()
        K = self.forms.stiff2 + self.forms.stiff1
        self.K = _restrict(K.tocsr(), self.free, self.free)
        self.M = grid.weights.ravel()[self.free]
        self.solver = SPDSolver(self.K, tol=tol)

    @property
    def dim(self):
        return int(self.free.sum())

    def solve(self, f: np.ndarray) -> np.ndarray:
        """v with a(v, w) = <f, w> for all clamped test fields w; f and v are node vector fields."""
        self.grid.check(f)
        F = f.reshape(self.grid.n_nodes, -1)
        V = np.zeros_like(F)
        rhs = self.M[:, None] * F[self.free]
        V[self.free] = self.solver.solve(rhs)
        return V.reshape(f.shape)

    def form(self, v, w) -> float:
        return self.forms.h2(v, w) + self.forms.h1(v, w)

    def lax_milgram_ratio(self, f, v) -> float:
        """||v||_{H2} / ||f||_{L2}."""
        nv = np.sqrt(self.forms.l2(v) + self.forms.h1(v) + self.forms.h2(v))
        nf = np.sqrt(self.forms.l2(f))
        return nv / nf if nf > 0 else 0.0


def solve_upsilon(grid, bc, f):
    return ClampedFourthOrder(grid, bc).solve(f)


# ---------------------------------------------------------------------------
# eigenpairs


@dataclass
class EigenBasisRaw:
    values: np.ndarray
    functions: list  # scalar eigenfunctions (node arrays or extended cell potentials)
    residuals: np.ndarray


class EigenGuardError(ValueError):
    pass


def _canonical(vecs, M, vals, rel=1e-8):
    """M-orthonormalize inside near-degenerate clusters and fix signs."""
    vecs = vecs.copy()
    k = len(vals)
    i = 0
    while i < k:
        j = i + 1
        while j < k and abs(vals[j] - vals[i]) <= rel * max(abs(vals[i]), 1.0):
            j += 1
        B = vecs[:, i:j]
        G = B.T @ (M[:, None] * B)
        L = np.linalg.cholesky(G)
        vecs[:, i:j] = np.linalg.solve(L, B.T).T
        i = j
    for c in range(k):
        p = np.argmax(np.abs(vecs[:, c]) > 1e-8 * np.max(np.abs(vecs[:, c])))
        if vecs[p, c] < 0:
            vecs[:, c] = -vecs[:, c]
    return vecs


def _smallest(K, M, m):
    n = K.shape[0]
    v0 = np.cos(np.arange(n) * 0.7) + 1.5  # fixed start vector keeps runs reproducible
    k = min(m, n - 2)
    vals, vecs = spl.eigsh(K, k=k, M=sp.diags(M), sigma=0.0, which="LM", v0=v0, tol=0.0)
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    vecs = _canonical(vecs, M, vals)
    res = np.array(
        [np.linalg.norm(K @ vecs[:, c] - vals[c] * M * vecs[:, c]) / max(np.linalg.norm(K @ vecs[:, c]), 1e-300) for c in range(k)]
    )
    return vals, vecs, res


def eigenpairs_upsilon(ups: ClampedFourthOrder, m: int) -> EigenBasisRaw:
    """Smallest m scalar clamped eigenpairs; each is an eigenvalue of multiplicity 3 for vector fields."""
    if m < 1 or m > ups.dim // 10:
        raise EigenGuardError(f"m={m} outside 1..{ups.dim // 10} for this grid")
    vals, vecs, res = _smallest(ups.K, ups.M, m)
    funcs = []
    for c in range(len(vals)):
        phi = np.zeros(ups.grid.n_nodes)
        phi[ups.free] = vecs[:, c]
        funcs.append(phi.reshape(ups.grid.shape))
    return EigenBasisRaw(vals, funcs, res)


class LaplaceEigen:
    """Mixed-boundary Laplacian eigenproblem on cells, with Neumann face values eliminated."""

    def __init__(self, lap: MixedLaplace):
        cx = lap.cx
        self.lap = lap
        nc = cx.n_cells
        K = lap.Kff.tocsr()
        self.nc = nc
        Kcc = K[:nc, :nc]
        Kcb = K[:nc, nc:]
        kbb = K[nc:, nc:].diagonal()
        self.Kcb, self.kbb = Kcb, kbb
        self.S = (Kcc - Kcb @ sp.diags(1.0 / kbb) @ Kcb.T).tocsr()
        self.M = cx.m3

    @property
    def dim(self):
        return self.nc

    def extend(self, theta):
        """Extended potential (cells then all boundary faces) harmonic-free on Neumann faces."""
        cx = self.lap.cx
        u = np.zeros(cx.n_cells + cx.n_bfaces)
        u[: self.nc] = theta
        free = self.lap.free
        u[np.nonzero(free)[0][self.nc :]] = -(self.Kcb.T @ theta) / self.kbb
        return u


def eigenpairs_laplace_mixed(lap: MixedLaplace, m: int) -> EigenBasisRaw:
    le = LaplaceEigen(lap)
    if m < 1 or m > le.dim // 10:
        raise EigenGuardError(f"m={m} outside 1..{le.dim // 10} for this grid")
    vals, vecs, res = _smallest(le.S, le.M, m)
    return EigenBasisRaw(vals, [le.extend(vecs[:, c]) for c in range(len(vals))], res)
