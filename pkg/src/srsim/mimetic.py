"""Staggered discrete complex on the box grid.

Locations, all flattened in C order:

- nodes ``(nx, ny, nz)``
- edges of direction a: one fewer point along a
- faces of normal a: one fewer point along the two other axes
- cells ``(nx-1, ny-1, nz-1)``

``d0`` (gradient), ``d1`` (curl) and ``d2`` (divergence) are the incidence
operators scaled by the spacings, so ``d1 @ d0 == 0`` and ``d2 @ d1 == 0``
hold exactly. Cell potentials are extended by one value per boundary face;
``grad_dual`` maps this extended vector to face normal derivatives.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .field import FACES, BoundaryPartition, Grid


def _fwd(n, h):
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) / h


def _mid(n):
    return sp.diags([0.5 * np.ones(n - 1), 0.5 * np.ones(n - 1)], [0, 1], shape=(n - 1, n))


def _spread(n):
    """(n, n-1): staggered values back to nodes; ends copy the nearest value."""
    m = sp.lil_matrix((n, n - 1))
    m[0, 0] = 1.0
    m[n - 1, n - 2] = 1.0
    for i in range(1, n - 1):
        m[i, i - 1] = m[i, i] = 0.5
    return m.tocsr()


def _kron3(a, b, c):
    return sp.kron(sp.kron(a, b), c, format="csr")


class MimeticComplex:
    def __init__(self, grid: Grid, bc: BoundaryPartition):
        if bc.grid != grid:
            raise ValueError("boundary partition lives on another grid")
        self.grid = grid
        self.bc = bc
        n = grid.shape
        h = grid.spacing
        self.node_shape = n
        self.cell_shape = tuple(k - 1 for k in n)
        self.edge_shapes = [tuple(n[b] - 1 if b == a else n[b] for b in range(3)) for a in range(3)]
        self.face_shapes = [tuple(n[b] if b == a else n[b] - 1 for b in range(3)) for a in range(3)]
        self.edge_sizes = [int(np.prod(s)) for s in self.edge_shapes]
        self.face_sizes = [int(np.prod(s)) for s in self.face_shapes]
        self.edge_offsets = np.concatenate([[0], np.cumsum(self.edge_sizes)])
        self.face_offsets = np.concatenate([[0], np.cumsum(self.face_sizes)])
        self.n_nodes = grid.n_nodes
        self.n_edges = int(self.edge_offsets[-1])
        self.n_faces = int(self.face_offsets[-1])
        self.n_cells = int(np.prod(self.cell_shape))

        I = [sp.identity(k, format="csr") for k in n]
        Ic = [sp.identity(k - 1, format="csr") for k in n]
        D = [_fwd(n[a], h[a]) for a in range(3)]

        def on_edge(a, b):
            # forward difference along b for an array staggered like edges of direction a
            ops = [Ic[c] if c == a else I[c] for c in range(3)]
            ops[b] = D[b] if b != a else None
            return _kron3(*ops)

        self.d0 = sp.vstack([_kron3(*[D[c] if c == a else I[c] for c in range(3)]) for a in range(3)], format="csr")

        # curl: face normal a = d_b E_c - d_c E_b with (a, b, c) cyclic
        blocks = [[None] * 3 for _ in range(3)]
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            blocks[a][c] = on_edge(c, b)
            blocks[a][b] = -on_edge(b, c)
        self.d1 = sp.bmat(blocks, format="csr")

        div_blocks = []
        for a in range(3):
            ops = [D[c] if c == a else Ic[c] for c in range(3)]
            div_blocks.append(_kron3(*ops))
        self.d2 = sp.hstack(div_blocks, format="csr")

        # weights
        w = [grid.axis_weights(a) for a in range(3)]
        self.m0 = grid.weights.ravel()
        m1 = []
        for a in range(3):
            parts = [np.full(n[c] - 1, h[c]) if c == a else w[c] for c in range(3)]
            m1.append(np.kron(np.kron(parts[0], parts[1]), parts[2]))
        self.m1 = np.concatenate(m1)
        m2 = []
        for a in range(3):
            delta = np.full(n[a], h[a])
            delta[0] = delta[-1] = 0.5 * h[a]
            parts = [delta if c == a else np.full(n[c] - 1, h[c]) for c in range(3)]
            m2.append(np.kron(np.kron(parts[0], parts[1]), parts[2]))
        self.m2 = np.concatenate(m2)
        self.cell_volume = float(np.prod(h))
        self.m3 = np.full(self.n_cells, self.cell_volume)

        self._build_boundary_faces()
        self._build_dual_gradient()

    # -- boundary faces -------------------------------------------------

    def _build_boundary_faces(self):
        n = self.grid.shape
        h = self.grid.spacing
        faces, sides, area = [], [], []
        for s, name in enumerate(FACES):
            a = "xyz".index(name[0])
            idx = np.arange(self.face_sizes[a]).reshape(self.face_shapes[a])
            sl = [slice(None)] * 3
            sl[a] = 0 if name[1] == "0" else n[a] - 1
            ids = idx[tuple(sl)].ravel() + self.face_offsets[a]
            faces.append(ids)
            sides.append(np.full(ids.size, s))
            area.append(np.full(ids.size, np.prod([h[c] for c in range(3) if c != a])))
        self.bface = np.concatenate(faces)
        self.bface_side = np.concatenate(sides)
        self.bface_area = np.concatenate(area)
        self.n_bfaces = self.bface.size
        dset = {FACES.index(f) for f in self.bc.dirichlet_faces}
        self.bface_dirichlet = np.isin(self.bface_side, list(dset))
        # outward sign of each boundary face
        self.bface_sign = np.array([-1.0 if FACES[s][1] == "0" else 1.0 for s in self.bface_side])

    def _build_dual_gradient(self):
        n = self.grid.shape
        h = self.grid.spacing
        rows, cols, vals = [], [], []
        for a in range(3):
            shape = self.face_shapes[a]
            idx = np.arange(self.face_sizes[a]).reshape(shape) + self.face_offsets[a]
            cell_idx = np.arange(self.n_cells).reshape(self.cell_shape)
            # interior faces along a
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[a] = slice(0, n[a] - 2)
            hi[a] = slice(1, n[a] - 1)
            f_int = [slice(None)] * 3
            f_int[a] = slice(1, n[a] - 1)
            fi = idx[tuple(f_int)].ravel()
            rows += [fi, fi]
            cols += [cell_idx[tuple(hi)].ravel(), cell_idx[tuple(lo)].ravel()]
            vals += [np.full(fi.size, 1.0 / h[a]), np.full(fi.size, -1.0 / h[a])]
        # boundary faces: cell next to the face and the face value itself
        pos = {int(f): k for k, f in enumerate(self.bface)}
        cell_idx = np.arange(self.n_cells).reshape(self.cell_shape)
        for s, name in enumerate(FACES):
            a = "xyz".index(name[0])
            sel = np.nonzero(self.bface_side == s)[0]
            sl = [slice(None)] * 3
            sl[a] = 0 if name[1] == "0" else n[a] - 2
            cells = cell_idx[tuple(sl)].ravel()
            f = self.bface[sel]
            sgn = 1.0 if name[1] == "0" else -1.0
            g = 2.0 / h[a]
            rows += [f, f]
            cols += [cells, self.n_cells + sel]
            vals += [np.full(f.size, sgn * g), np.full(f.size, -sgn * g)]
        del pos
        self.grad_dual = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_faces, self.n_cells + self.n_bfaces),
        )

    # -- locations --------------------------------------------------------

    @cached_property
    def potential_points(self) -> np.ndarray:
        """Coordinates of the extended potential unknowns: cell centres, then boundary-face centres."""
        g = self.grid
        mids = [(np.arange(n - 1) + 0.5) * h for n, h in zip(g.shape, g.spacing)]
        pts = [np.stack(np.meshgrid(*mids, indexing="ij"), -1).reshape(-1, 3)]
        for name in FACES:
            a = "xyz".index(name[0])
            ax = [mids[b] if b != a else np.array([0.0 if name[1] == "0" else g.lengths[a]]) for b in range(3)]
            pts.append(np.stack(np.meshgrid(*ax, indexing="ij"), -1).reshape(-1, 3))
        return np.concatenate(pts)

    @cached_property
    def bface_normal(self) -> np.ndarray:
        """Outward unit normal of each boundary face, shape (B, 3)."""
        n = np.zeros((self.n_bfaces, 3))
        axes = np.array(["xyz".index(FACES[s][0]) for s in self.bface_side])
        n[np.arange(self.n_bfaces), axes] = self.bface_sign
        return n

    # -- free sets --------------------------------------------------------

    @cached_property
    def potential_free(self) -> np.ndarray:
        """Unknowns of the extended cell potential: all cells and the Neumann boundary faces."""
        return np.concatenate([np.ones(self.n_cells, bool), ~self.bface_dirichlet])

    def _in_neumann(self, shape, staggered_axes):
        n = self.grid.shape
        m = np.zeros(shape, dtype=bool)
        for name in self.bc.neumann_faces:
            b = "xyz".index(name[0])
            if b in staggered_axes:
                continue
            sl = [slice(None)] * 3
            sl[b] = 0 if name[1] == "0" else n[b] - 1
            m[tuple(sl)] = True
        return m.ravel()

    @cached_property
    def edge_free(self) -> np.ndarray:
        """Edges that do not lie in the closed Neumann part of the boundary."""
        return ~np.concatenate([self._in_neumann(self.edge_shapes[a], (a,)) for a in range(3)])

    @cached_property
    def node_free(self) -> np.ndarray:
        return ~self._in_neumann(self.node_shape, ())

    # -- transfers --------------------------------------------------------

    @cached_property
    def node_to_face(self) -> sp.csr_matrix:
        """Normal flux per face from a node vector field stacked by component, shape (F, 3N)."""
        n = self.grid.shape
        I = [sp.identity(k, format="csr") for k in n]
        blocks = []
        for a in range(3):
            ops = [I[c] if c == a else _mid(n[c]) for c in range(3)]
            blocks.append(_kron3(*ops))
        return sp.block_diag(blocks, format="csr")

    @cached_property
    def face_to_cell(self) -> sp.csr_matrix:
        """Cell vector (stacked by component) from face normal values, shape (3C, F)."""
        n = self.grid.shape
        Ic = [sp.identity(k - 1, format="csr") for k in n]
        blocks = []
        for a in range(3):
            ops = [_mid(n[c]) if c == a else Ic[c] for c in range(3)]
            blocks.append(_kron3(*ops))
        return sp.block_diag(blocks, format="csr")

    @cached_property
    def node_to_potential(self) -> sp.csr_matrix:
        """Cell averages of a node scalar plus boundary-face averages, shape (C + B, N)."""
        n = self.grid.shape
        cells = _kron3(_mid(n[0]), _mid(n[1]), _mid(n[2]))
        blocks = []
        for s, name in enumerate(FACES):
            a = "xyz".index(name[0])
            pick = sp.csr_matrix(([1.0], ([0], [0 if name[1] == "0" else n[a] - 1])), shape=(1, n[a]))
            ops = [pick if c == a else _mid(n[c]) for c in range(3)]
            blocks.append(_kron3(*ops))
        return sp.vstack([cells] + blocks, format="csr")

    @cached_property
    def edge_to_node(self) -> sp.csr_matrix:
        """Node vector (stacked by component) from edge tangential values."""
        n = self.grid.shape
        I = [sp.identity(k, format="csr") for k in n]
        blocks = []
        for a in range(3):
            ops = [_spread(n[c]) if c == a else I[c] for c in range(3)]
            blocks.append(_kron3(*ops))
        return sp.block_diag(blocks, format="csr")

    @cached_property
    def face_to_node(self) -> sp.csr_matrix:
        """Node vector (stacked by component) from face normal values."""
        n = self.grid.shape
        I = [sp.identity(k, format="csr") for k in n]
        blocks = []
        for a in range(3):
            ops = [I[c] if c == a else _spread(n[c]) for c in range(3)]
            blocks.append(_kron3(*ops))
        return sp.block_diag(blocks, format="csr")

    def potential_to_node(self, p: np.ndarray) -> np.ndarray:
        """Interpolate extended cell potentials (cells then boundary faces) to nodes."""
        n = self.grid.shape
        pad = np.full(tuple(k + 1 for k in n), np.nan)
        pad[1:-1, 1:-1, 1:-1] = p[: self.n_cells].reshape(self.cell_shape)
        off = self.n_cells
        for s, name in enumerate(FACES):
            a = "xyz".index(name[0])
            cnt = int(np.sum(self.bface_side == s))
            vals = p[off : off + cnt].reshape([n[c] - 1 for c in range(3) if c != a])
            off += cnt
            sl = [slice(1, -1)] * 3
            sl[a] = 0 if name[1] == "0" else n[a]
            pad[tuple(sl)] = vals
        # box edges and corners of the padded array: mean of the known axis neighbours
        for _ in range(2):
            miss = np.isnan(pad)
            if not miss.any():
                break
            acc = np.zeros_like(pad)
            cnt = np.zeros_like(pad)
            for a in range(3):
                for sft in (1, -1):
                    nb = np.roll(pad, sft, axis=a)
                    edge = [slice(None)] * 3
                    edge[a] = 0 if sft == 1 else -1
                    nb[tuple(edge)] = np.nan
                    ok = ~np.isnan(nb)
                    acc[ok] += nb[ok]
                    cnt[ok] += 1
            fill = miss & (cnt > 0)
            pad[fill] = acc[fill] / cnt[fill]
        out = pad
        for a in range(3):
            m = n[a]
            idx_lo = np.arange(m)
            idx_hi = np.arange(1, m + 1)
            lo = np.take(out, idx_lo, axis=a)
            hi = np.take(out, idx_hi, axis=a)
            mid = 0.5 * (lo + hi)
            first = [slice(None)] * 3
            last = [slice(None)] * 3
            first[a] = 0
            last[a] = m - 1
            mid[tuple(first)] = np.take(out, 0, axis=a)
            mid[tuple(last)] = np.take(out, m, axis=a)
            out = mid
        return out

    # -- helpers ----------------------------------------------------------

    def flux(self, vec_nodes: np.ndarray) -> np.ndarray:
        """Face normal values of a node vector field (nx, ny, nz, 3)."""
        return self.node_to_face @ vec_nodes.reshape(-1, 3).T.ravel()

    def flux_rows(self, tensor_nodes: np.ndarray) -> np.ndarray:
        """Face values of each row of a node tensor field, shape (3, F)."""
        return np.stack([self.flux(tensor_nodes[..., i, :]) for i in range(3)])

    def faces_to_node_vec(self, f: np.ndarray) -> np.ndarray:
        return (self.face_to_node @ f).reshape(3, -1).T.reshape(self.grid.shape + (3,))

    def edges_to_node_vec(self, e: np.ndarray) -> np.ndarray:
        return (self.edge_to_node @ e).reshape(3, -1).T.reshape(self.grid.shape + (3,))

    def face_adjoint_to_nodes(self, f: np.ndarray) -> np.ndarray:
        """Node field B with <B, V>_nodes = <f, flux(V)>_faces for every node vector V."""
        g = self.node_to_face.T @ (self.m2 * f)
        return (g.reshape(3, -1) / self.m0).T.reshape(self.grid.shape + (3,))

    def face_inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.sum(self.m2 * a * b))

    def face_norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(np.sum(self.m2 * a * a)))
