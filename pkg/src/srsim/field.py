"""Box grid, boundary partition, pointwise tensor algebra and node difference operators.

Node fields are plain numpy arrays whose leading three axes index the grid
nodes: scalars ``(nx, ny, nz)``, vectors ``(nx, ny, nz, 3)`` and tensors
``(nx, ny, nz, 3, 3)``. Tensor rows are the first matrix index, so the
row-wise operators act on ``A[..., i, :]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np
import scipy.sparse as sp

FACES = ("x0", "x1", "y0", "y1", "z0", "z1")
TAGS = ("general", "symmetric", "skew", "divergence_free")


class GridMismatch(ValueError):
    pass


class Grid:
    """Uniform tensor-product node grid on the box [0, Lx] x [0, Ly] x [0, Lz]."""

    def __init__(self, shape: Iterable[int] = (12, 12, 12), lengths: Iterable[float] = (1.0, 1.0, 1.0)):
        shape = tuple(int(n) for n in shape)
        lengths = tuple(float(v) for v in lengths)
        if len(shape) != 3 or len(lengths) != 3:
            raise ValueError("grid needs three node counts and three lengths")
        if min(shape) < 3:
            raise ValueError(f"need at least 3 nodes per axis, got {shape}")
        if min(lengths) <= 0:
            raise ValueError(f"box lengths must be positive, got {lengths}")
        self.shape = shape
        self.lengths = lengths
        self.spacing = tuple(L / (n - 1) for n, L in zip(shape, lengths))

    def __repr__(self):
        return f"Grid(shape={self.shape}, lengths={self.lengths})"

    def __eq__(self, other):
        return isinstance(other, Grid) and self.shape == other.shape and self.lengths == other.lengths

    def __hash__(self):
        return hash((self.shape, self.lengths))

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def axis_coords(self, a: int) -> np.ndarray:
        return np.linspace(0.0, self.lengths[a], self.shape[a])

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape (nx, ny, nz, 3)."""
        return np.stack(np.meshgrid(*[self.axis_coords(a) for a in range(3)], indexing="ij"), axis=-1)

    def axis_weights(self, a: int) -> np.ndarray:
        w = np.full(self.shape[a], self.spacing[a])
        w[0] = w[-1] = 0.5 * self.spacing[a]
        return w

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weight per node."""
        wx, wy, wz = (self.axis_weights(a) for a in range(3))
        return wx[:, None, None] * wy[None, :, None] * wz[None, None, :]

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """Discrete L2 pairing of two node fields of the same shape."""
        self.check(a)
        self.check(b)
        prod = (a * b).reshape(self.shape + (-1,)).sum(axis=-1)
        return float(np.sum(self.weights * prod))

    def norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.inner(a, a), 0.0)))

    def check(self, a: np.ndarray):
        if a.shape[:3] != self.shape:
            raise GridMismatch(f"field shape {a.shape} does not live on {self}")

    def sample(self, fn) -> np.ndarray:
        """Evaluate ``fn(x, y, z)`` at the nodes."""
        c = self.coords
        return np.asarray(fn(c[..., 0], c[..., 1], c[..., 2]), dtype=float)


# ---------------------------------------------------------------------------
# boundary partition


def _face_mask(shape, face: str) -> np.ndarray:
    a = "xyz".index(face[0])
    idx = 0 if face[1] == "0" else shape[a] - 1
    m = np.zeros(shape, dtype=bool)
    sl = [slice(None)] * 3
    sl[a] = idx
    m[tuple(sl)] = True
    return m


def _faces_connected(faces: set) -> bool:
    # two box faces share an edge unless they are opposite
    faces = list(faces)
    if not faces:
        return False
    seen = {faces[0]}
    stack = [faces[0]]
    while stack:
        f = stack.pop()
        for g in faces:
            if g not in seen and g[0] != f[0]:
                seen.add(g)
                stack.append(g)
    return len(seen) == len(faces)


@dataclass(frozen=True)
class BoundaryPartition:
    """Split of the six box faces into Dirichlet and Neumann parts.

    Node sets follow the "Dirichlet wins" rule: nodes on an edge shared by a
    Dirichlet face and a Neumann face belong to ``gamma_D``.
    """

    grid: Grid
    dirichlet_faces: frozenset = field(default_factory=lambda: frozenset({"x0"}))

    def __post_init__(self):
        df = frozenset(self.dirichlet_faces)
        object.__setattr__(self, "dirichlet_faces", df)
        bad = df - set(FACES)
        if bad:
            raise ValueError(f"unknown faces {sorted(bad)}")
        if not df:
            raise ValueError("gamma_D is empty: the mixed problem loses its Poincare inequality")
        nf = set(FACES) - df
        if not nf:
            raise ValueError("gamma_N is empty")
        if not _faces_connected(set(df)) or not _faces_connected(nf):
            raise ValueError("gamma_D and gamma_N must each be connected")

    @classmethod
    def from_spec(cls, grid: Grid, spec: str = "x0"):
        """Parse a comma separated Dirichlet face list such as ``"x0"`` or ``"x0,y0"``."""
        faces = frozenset(s.strip() for s in spec.split(",") if s.strip())
        return cls(grid, faces)

    @property
    def neumann_faces(self) -> frozenset:
        return frozenset(FACES) - self.dirichlet_faces

    def face_mask(self, face: str) -> np.ndarray:
        return _face_mask(self.grid.shape, face)

    @cached_property
    def boundary(self) -> np.ndarray:
        m = np.zeros(self.grid.shape, dtype=bool)
        for f in FACES:
            m |= self.face_mask(f)
        return m

    @cached_property
    def gamma_D(self) -> np.ndarray:
        m = np.zeros(self.grid.shape, dtype=bool)
        for f in self.dirichlet_faces:
            m |= self.face_mask(f)
        return m

    @cached_property
    def gamma_N(self) -> np.ndarray:
        return self.boundary & ~self.gamma_D

    @cached_property
    def normals(self) -> np.ndarray:
        """Outward unit normal per node (zero in the interior, averaged on edges and corners)."""
        n = np.zeros(self.grid.shape + (3,))
        for f in FACES:
            a = "xyz".index(f[0])
            n[self.face_mask(f), a] += -1.0 if f[1] == "0" else 1.0
        mag = np.linalg.norm(n, axis=-1)
        nz = mag > 0
        n[nz] /= mag[nz, None]
        return n

    def spec(self) -> str:
        return ",".join(f for f in FACES if f in self.dirichlet_faces)


# ---------------------------------------------------------------------------
# pointwise tensor algebra


def sym_part(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def skew_part(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A - np.swapaxes(A, -1, -2))


def skew_from_axis(w: np.ndarray) -> np.ndarray:
    """Skew matrix K with K v = w x v."""
    w = np.asarray(w, dtype=float)
    K = np.zeros(w.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -w[..., 2], w[..., 1]
    K[..., 1, 0], K[..., 1, 2] = w[..., 2], -w[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -w[..., 1], w[..., 0]
    return K


def axis_of_skew(K: np.ndarray) -> np.ndarray:
    return np.stack([K[..., 2, 1], K[..., 0, 2], K[..., 1, 0]], axis=-1)


def exp_skew(Theta: np.ndarray) -> np.ndarray:
    """Rotation e^Theta of skew matrices by the Rodrigues formula."""
    Theta = np.asarray(Theta, dtype=float)
    th2 = np.sum(axis_of_skew(Theta) ** 2, axis=-1)
    th = np.sqrt(th2)
    small = th < 1e-4
    safe = np.where(small, 1.0, th)
    a = np.where(small, 1.0 - th2 / 6.0 + th2**2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - th2 / 24.0 + th2**2 / 720.0, (1.0 - np.cos(safe)) / safe**2)
    K2 = Theta @ Theta
    I = np.broadcast_to(np.eye(3), Theta.shape)
    return I + a[..., None, None] * Theta + b[..., None, None] * K2


def log_rotation(R: np.ndarray) -> np.ndarray:
    """Skew logarithm of rotations with angle below pi."""
    c = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    th = np.arccos(c)
    small = th < 1e-4
    s = np.sin(np.where(small, 1.0, th))
    f = np.where(small, 0.5 + th**2 / 12.0, th / (2.0 * s))
    return f[..., None, None] * (R - np.swapaxes(R, -1, -2))


def cofactor(W: np.ndarray) -> np.ndarray:
    """Cofactor matrix; rows are cross products of the other two rows."""
    r0, r1, r2 = W[..., 0, :], W[..., 1, :], W[..., 2, :]
    return np.stack([np.cross(r1, r2), np.cross(r2, r0), np.cross(r0, r1)], axis=-2)


def det3(W: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", W[..., 0, :], np.cross(W[..., 1, :], W[..., 2, :]))


def invariants(W: np.ndarray):
    """(tr W, tr cof W, det W) nodewise."""
    tr = np.trace(W, axis1=-2, axis2=-1)
    tr_sq = np.einsum("...ij,...ji->...", W, W)
    return tr, 0.5 * (tr**2 - tr_sq), det3(W)


def spd_margin(W: np.ndarray, alpha: float):
    """Margins (det - a^3, tr cof - 3a^2, tr - 3a); W is in SPD_alpha iff all are >= 0."""
    tr, tc, det = invariants(W)
    return det - alpha**3, tc - 3.0 * alpha**2, tr - 3.0 * alpha


def frob(A: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(A * A, axis=(-2, -1)))


# ---------------------------------------------------------------------------
# node difference operators (summation-by-parts first derivative)


def sbp_matrix(n: int, h: float) -> sp.csr_matrix:
    """Centered interior rows, one-sided closure rows; H-adjoint up to boundary terms."""
    rows = [0, 0, n - 1, n - 1]
    cols = [0, 1, n - 2, n - 1]
    vals = [-1.0 / h, 1.0 / h, -1.0 / h, 1.0 / h]
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5 / h, 0.5 / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def diff(u: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Derivative of a node array along one of its three grid axes."""
    u = np.moveaxis(np.asarray(u, dtype=float), axis, 0)
    d = np.empty_like(u)
    d[1:-1] = (u[2:] - u[:-2]) / (2.0 * h)
    d[0] = (u[1] - u[0]) / h
    d[-1] = (u[-1] - u[-2]) / h
    return np.moveaxis(d, 0, axis)


def grad_scalar(grid: Grid, f: np.ndarray) -> np.ndarray:
    grid.check(f)
    return np.stack([diff(f, a, grid.spacing[a]) for a in range(3)], axis=-1)


def grad_vec(grid: Grid, u: np.ndarray) -> np.ndarray:
    """(grad u)_{ia} = d u_i / d x_a."""
    grid.check(u)
    return np.stack([diff(u, a, grid.spacing[a]) for a in range(3)], axis=-1)


def grad_tensor(grid: Grid, A: np.ndarray) -> np.ndarray:
    """Rank-3 field (grad A)_{ija} = d A_ij / d x_a."""
    grid.check(A)
    return np.stack([diff(A, a, grid.spacing[a]) for a in range(3)], axis=-1)


def div_vec(grid: Grid, u: np.ndarray) -> np.ndarray:
    grid.check(u)
    return sum(diff(u[..., a], a, grid.spacing[a]) for a in range(3))


def div_tensor(grid: Grid, A: np.ndarray) -> np.ndarray:
    """Row-wise divergence: (div A)_i = sum_a d A_ia / d x_a."""
    grid.check(A)
    return sum(diff(A[..., a], a, grid.spacing[a]) for a in range(3))


def curl_vec(grid: Grid, u: np.ndarray) -> np.ndarray:
    grid.check(u)
    hx, hy, hz = grid.spacing
    return np.stack(
        [
            diff(u[..., 2], 1, hy) - diff(u[..., 1], 2, hz),
            diff(u[..., 0], 2, hz) - diff(u[..., 2], 0, hx),
            diff(u[..., 1], 0, hx) - diff(u[..., 0], 1, hy),
        ],
        axis=-1,
    )


def curl_tensor(grid: Grid, A: np.ndarray) -> np.ndarray:
    """Row-wise curl."""
    grid.check(A)
    return np.stack([curl_vec(grid, A[..., i, :]) for i in range(3)], axis=-2)


# ---------------------------------------------------------------------------
# energy forms


class EnergyForms:
    """Sparse Gram matrices of the discrete L2, H1 and H2 seminorm pairings.

    The H1 form uses forward differences on grid edges, the H2 form uses compact
    second differences (pure ones at interior nodes, mixed ones on plaquettes).
    These have no sawtooth kernels, unlike squared collocated derivatives.
    Multi-component fields are paired component by component.
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        n = grid.shape
        h = grid.spacing
        w = [grid.axis_weights(a) for a in range(3)]
        eye = [sp.identity(k, format="csr") for k in n]
        fwd = [sp.diags([-np.ones(k - 1), np.ones(k - 1)], [0, 1], shape=(k - 1, k)) / hh for k, hh in zip(n, h)]
        sec = [
            sp.diags([np.ones(k - 2), -2 * np.ones(k - 2), np.ones(k - 2)], [0, 1, 2], shape=(k - 2, k)) / hh**2
            for k, hh in zip(n, h)
        ]

        def kron3(ops):
            return sp.kron(sp.kron(ops[0], ops[1]), ops[2]).tocsr()

        self.mass = sp.diags(grid.weights.ravel()).tocsr()
        stiff1 = sp.csr_matrix((grid.n_nodes, grid.n_nodes))
        for a in range(3):
            ops = list(eye)
            ops[a] = fwd[a]
            D = kron3(ops)
            wt = [w[b] for b in range(3)]
            wt[a] = np.full(n[a] - 1, h[a])
            W = np.kron(np.kron(wt[0], wt[1]), wt[2])
            stiff1 = stiff1 + D.T @ sp.diags(W) @ D
        stiff2 = sp.csr_matrix((grid.n_nodes, grid.n_nodes))
        for a in range(3):
            for b in range(3):
                ops = list(eye)
                wt = [w[c] for c in range(3)]
                if a == b:
                    ops[a] = sec[a]
                    # end rows also cover the half cells next to the boundary
                    wt[a] = np.full(n[a] - 2, h[a])
                    wt[a][[0, -1]] += 0.5 * h[a]
                    mult = 1.0
                elif a < b:
                    ops[a], ops[b] = fwd[a], fwd[b]
                    wt[a] = np.full(n[a] - 1, h[a])
                    wt[b] = np.full(n[b] - 1, h[b])
                    mult = 2.0  # (a, b) and (b, a)
                else:
                    continue
                D = kron3(ops)
                W = np.kron(np.kron(wt[0], wt[1]), wt[2])
                stiff2 = stiff2 + mult * (D.T @ sp.diags(W) @ D)
        self.stiff1 = stiff1.tocsr()
        self.stiff2 = stiff2.tocsr()

    def _pair(self, K, f, g):
        F = f.reshape(self.grid.n_nodes, -1)
        G = g.reshape(self.grid.n_nodes, -1)
        return float(np.sum(F * (K @ G)))

    def l2(self, f, g=None):
        return self._pair(self.mass, f, f if g is None else g)

    def h1(self, f, g=None):
        """sum over components of <grad f, grad g>."""
        return self._pair(self.stiff1, f, f if g is None else g)

    def h2(self, f, g=None):
        """sum over components of <grad grad f, grad grad g>."""
        return self._pair(self.stiff2, f, f if g is None else g)


# ---------------------------------------------------------------------------
# tagged containers used at API and file boundaries


@dataclass
class TensorField3:
    grid: Grid
    values: np.ndarray
    tag: str = "general"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape + (3, 3):
            raise GridMismatch(f"tensor field shape {self.values.shape} does not match {self.grid}")
        if self.tag not in TAGS:
            raise ValueError(f"unknown tag {self.tag!r}")

    def validate(self, tol: float = 1e-14):
        v = self.values
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite entries")
        if self.tag == "symmetric" and np.max(np.abs(v - np.swapaxes(v, -1, -2)), initial=0.0) > tol:
            raise ValueError("field tagged symmetric is not symmetric")
        if self.tag == "skew" and np.max(np.abs(v + np.swapaxes(v, -1, -2)), initial=0.0) > tol:
            raise ValueError("field tagged skew is not skew")
        return self


@dataclass
class VectorField3:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape + (3,):
            raise GridMismatch(f"vector field shape {self.values.shape} does not match {self.grid}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite entries")
