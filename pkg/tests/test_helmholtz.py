import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srsim.field import BoundaryPartition, Grid, grad_scalar, grad_vec
from srsim.helmholtz import HodgeDecomposer, decompose_tensor, reconstruction_residual


@pytest.fixture(scope="module")
def hd():
    g = Grid((9, 8, 10), (1.0, 0.9, 1.1))
    return HodgeDecomposer(g, BoundaryPartition(g))


def manufactured(g, scale=0.3):
    x, y, z = np.moveaxis(g.coords, -1, 0)
    return scale * np.stack([x * np.sin(np.pi * y), x * x * np.cos(np.pi * z), x * y * z], -1)


def test_zero_and_identity(hd):
    g = hd.grid
    s = hd.decompose_vector(np.zeros(g.shape + (3,)))
    assert not s.potential_part.any() and not s.solenoidal_part.any()
    s = hd.decompose_tensor(np.broadcast_to(np.eye(3), g.shape + (3, 3)).copy())
    assert not s.u.any() and not s.Z.any() and s.reconstruction_residual == 0.0


def test_pure_gradient(hd):
    g = hd.grid
    x, y, z = np.moveaxis(g.coords, -1, 0)
    p = x * np.exp(y) + np.sin(x * z)  # vanishes on x = 0
    s = hd.decompose_vector(grad_scalar(g, p))
    assert hd.cx.face_norm(s.solenoidal_part[0]) <= 1e-10 * hd.cx.face_norm(s.potential_part[0])
    assert np.allclose(s.u[0], hd.cx.node_to_potential @ p.ravel(), atol=1e-10)


def test_pure_curl(hd, rng):
    cx = hd.cx
    z = np.zeros(cx.n_edges)
    z[cx.edge_free] = rng.standard_normal(int(cx.edge_free.sum()))
    s = hd.split_faces(cx.d1 @ z)
    assert cx.face_norm(s.potential_part[0]) <= 1e-10 * cx.face_norm(s.solenoidal_part[0])
    assert np.allclose(s.solenoidal_part[0], cx.d1 @ z, atol=1e-10)


def test_compatible_deformation(hd):
    g = hd.grid
    v = manufactured(g)
    T = np.eye(3) + grad_vec(g, v)
    s = hd.decompose_tensor(T)
    assert np.abs(s.Z).max() <= 1e-10
    for c in range(3):
        assert np.allclose(s.u[c], hd.cx.node_to_potential @ v[..., c].ravel(), atol=1e-10)
    assert hd.reconstruction_residual(s.u, s.Z, T) <= 1e-6


def test_residual_sensitivity(hd, rng):
    g, cx = hd.grid, hd.cx
    T = np.eye(3) + 0.2 * rng.standard_normal(g.shape + (3, 3))
    s = hd.decompose_tensor(T)
    d = np.zeros_like(s.Z)
    d[1, cx.edge_free] = 1e-3 * rng.standard_normal(int(cx.edge_free.sum()))
    den = max(1.0, np.sqrt(sum(cx.face_inner(r, r) for r in cx.flux_rows(T - np.eye(3)))))
    grown = hd.reconstruction_residual(s.u, s.Z + d, T) - s.reconstruction_residual
    assert np.isclose(grown, cx.face_norm(cx.d1 @ d[1]) / den, rtol=1e-6)


def test_split_is_unique(hd, rng):
    cx = hd.cx
    r = rng.standard_normal(cx.n_faces)
    s1 = hd.split_faces(r)
    s2 = hd.split_faces(s1.potential_part[0] + s1.solenoidal_part[0])
    assert np.allclose(s1.potential_part, s2.potential_part, atol=1e-10)
    assert np.allclose(s1.solenoidal_part, s2.solenoidal_part, atol=1e-10)
    s3 = hd.split_faces(s1.potential_part[0])
    assert cx.face_norm(s3.solenoidal_part[0]) <= 1e-10 * cx.face_norm(r)


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 2.0))
def test_orthogonal_and_complete(hd, seed, scale):
    g = hd.grid
    T = np.eye(3) + scale * np.random.default_rng(seed).standard_normal(g.shape + (3, 3))
    s = hd.decompose_tensor(T)
    assert s.orthogonality_residual <= 1e-8
    assert s.reconstruction_residual <= 1e-8
    assert np.abs(hd.curl_solver.divergence(s.Z)).max() <= 1e-8 * max(1.0, np.abs(s.Z).max())


def test_module_wrappers():
    g = Grid((5, 5, 5))
    bc = BoundaryPartition(g)
    T = np.eye(3) + 0.1 * np.random.default_rng(3).standard_normal(g.shape + (3, 3))
    s = decompose_tensor(T, bc)
    assert reconstruction_residual(s.u, s.Z, T, bc) <= 1e-8
    with pytest.raises(ValueError):
        decompose_tensor(np.full(g.shape + (3, 3), np.nan), bc)


def test_run_snapshot_closes(model12):
    from srsim.galerkin import ForcingSpec, RunConfig, run

    cfg = RunConfig(t_end=0.2, w_ext=ForcingSpec(amplitude=30.0), omega_ext=ForcingSpec(amplitude=10.0, direction="z"))
    traj = run(cfg, model12.__class__(cfg, basis=model12.basis))
    W, Th, R, u = model12.fields(traj.final)
    s = HodgeDecomposer(model12.grid, model12.bc, cx=model12.cx).decompose_tensor(R @ W)
    assert s.reconstruction_residual <= 1e-5
