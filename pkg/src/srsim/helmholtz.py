"""Gradient plus curl splitting of vector and tensor fields under a mixed boundary partition.

Fields are split as face normal values ``r = grad u + curl Z`` where ``u`` is an
extended cell potential vanishing on the Dirichlet faces and ``Z`` an edge
field vanishing on the closed Neumann boundary. The two parts are orthogonal
in the face inner product by summation by parts, and the split is complete on
boxes whose Neumann part is a single connected patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .elliptic import CurlPotentialSolver, MixedLaplace
from .field import BoundaryPartition, Grid
from .mimetic import MimeticComplex


@dataclass
class HodgeSplit:
    potential_part: np.ndarray  # (k, F) gradient part per row
    solenoidal_part: np.ndarray  # (k, F) curl part per row
    u: np.ndarray  # (k, C + B) potentials
    Z: np.ndarray  # (k, E) edge vector potentials
    orthogonality_residual: float
    reconstruction_residual: float

    def u_nodes(self, cx: MimeticComplex):
        out = np.stack([cx.potential_to_node(p) for p in self.u], axis=-1)
        return out[..., 0] if out.shape[-1] == 1 else out

    def Z_nodes(self, cx: MimeticComplex):
        out = np.stack([cx.edges_to_node_vec(z) for z in self.Z], axis=-2)
        return out[..., 0, :] if out.shape[-2] == 1 else out


class HodgeDecomposer:
    """Caches the two factorized solves used by every decomposition on one grid."""

    def __init__(self, grid: Grid, bc: BoundaryPartition, cx: MimeticComplex | None = None, log=None):
        self.grid = grid
        self.bc = bc
        self.cx = cx or MimeticComplex(grid, bc)
        self.laplace = MixedLaplace(self.cx, log=log)
        self.curl_solver = CurlPotentialSolver(self.cx, log=log)

    def split_faces(self, r: np.ndarray) -> HodgeSplit:
        cx = self.cx
        r = np.atleast_2d(r)
        U = np.stack([self.laplace.potential_of_flux(ri) for ri in r])
        Z = self.curl_solver.solve_faces(r)
        gp = np.stack([cx.grad_dual @ ui for ui in U])
        cp = np.stack([cx.d1 @ zi for zi in Z])
        dot = sum(cx.face_inner(a, b) for a, b in zip(gp, cp))
        na = np.sqrt(sum(cx.face_inner(a, a) for a in gp))
        nb = np.sqrt(sum(cx.face_inner(b, b) for b in cp))
        orth = float(abs(dot) / (na * nb + 1e-30))
        rec = _rows_residual(cx, gp + cp, r)
        return HodgeSplit(gp, cp, U, Z, orth, rec)

    def decompose_vector(self, xi: np.ndarray) -> HodgeSplit:
        """Split a node vector field (nx, ny, nz, 3)."""
        self.grid.check(xi)
        if not np.all(np.isfinite(xi)):
            raise ValueError("non-finite input")
        return self.split_faces(self.cx.flux(xi))

    def decompose_tensor(self, T: np.ndarray) -> HodgeSplit:
        """Split T - I row by row; u and Z come out with one row per tensor row."""
        self.grid.check(T)
        if not np.all(np.isfinite(T)):
            raise ValueError("non-finite input")
        return self.split_faces(self.cx.flux_rows(T - np.eye(3)))

    def reconstruction_residual(self, u: np.ndarray, Z: np.ndarray, T: np.ndarray) -> float:
        """||grad u + curl Z - (T - I)|| / max(1, ||T - I||) in the face norm."""
        cx = self.cx
        u, Z = np.atleast_2d(u), np.atleast_2d(Z)
        rec = np.stack([cx.grad_dual @ ui + cx.d1 @ zi for ui, zi in zip(u, Z)])
        return _rows_residual(cx, rec, cx.flux_rows(T - np.eye(3)))


def _rows_residual(cx, approx, target):
    num = np.sqrt(sum(cx.face_inner(d, d) for d in approx - target))
    den = np.sqrt(sum(cx.face_inner(t, t) for t in target))
    return float(num / max(1.0, den))


def decompose_vector(xi, bc: BoundaryPartition) -> HodgeSplit:
    return HodgeDecomposer(bc.grid, bc).decompose_vector(xi)


def decompose_tensor(T, bc: BoundaryPartition) -> HodgeSplit:
    return HodgeDecomposer(bc.grid, bc).decompose_tensor(T)


def reconstruction_residual(u, Z, T, bc: BoundaryPartition) -> float:
    return HodgeDecomposer(bc.grid, bc).reconstruction_residual(u, Z, T)
