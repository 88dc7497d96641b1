import numpy as np
import pytest

from srsim.elliptic import clamped_nodes
from srsim.field import exp_skew, skew_from_axis
from srsim.galerkin import (
    ConfigError,
    ForcingSpec,
    GalerkinModel,
    RunConfig,
    SimState,
    build_basis,
    left_jacobian,
    run,
)


def test_basis_counts_and_grams(model12):
    b = model12.basis
    assert (b.n_sym, b.n_skew, b.n_vec) == (6, 3, 3)
    assert np.allclose(b.MS0, np.eye(6), atol=1e-10) and np.allclose(b.MA0, np.eye(3), atol=1e-10)
    for M in (b.MS1, b.MS2, b.MA1, b.MA2):
        assert np.allclose(M, M.T) and np.linalg.eigvalsh(M).min() >= -1e-10
    assert np.array_equal(b.S, np.swapaxes(b.S, -1, -2))
    assert np.array_equal(b.A, -np.swapaxes(b.A, -1, -2))


def test_basis_m2_counts(grid12, bc12):
    b = build_basis(grid12, bc12, 2)
    assert (b.n_sym, b.n_skew, b.n_vec) == (12, 6, 6)
    assert np.allclose(b.MS0, np.eye(12), atol=1e-10)


def test_basis_is_clamped(model12):
    b = model12.basis
    layer = clamped_nodes(model12.bc)
    assert not b.S[:, layer].any() and not b.A[:, layer].any()


def test_eigen_relation(model12):
    b = model12.basis
    xi = b.xi(0)
    assert np.isclose(b.forms.h2(xi[..., 0]) + b.forms.h1(xi[..., 0]), b.gamma[0], rtol=1e-8)


def test_projections(model12, rng):
    b = model12.basis
    assert np.allclose(b.project_PS(b.S[3]), np.eye(6)[3], atol=1e-12)
    assert not b.project_PS(np.zeros_like(b.S[0])).any()
    noise = rng.standard_normal(b.S[0].shape)
    noise = noise + np.swapaxes(noise, -1, -2)
    noise -= np.tensordot(b.project_PS(noise), b.S, axes=1)  # orthogonal remainder
    c = b.project_PS(b.S[0] + 2 * b.S[1] + 1e-3 * noise)
    assert np.allclose(c, [1, 2, 0, 0, 0, 0], atol=1e-10)
    assert np.allclose(b.project_PA(b.A[2]), [0, 0, 1], atol=1e-12)
    z = np.array([0.5, -1.0, 2.0])
    assert np.allclose(b.project_PV(b.u_of(z).T), z, atol=1e-12)


def test_left_jacobian_matches_finite_difference(rng):
    th, w = rng.standard_normal((2, 3))
    h = 1e-6
    dR = (exp_skew(skew_from_axis(th + h * w)) - exp_skew(skew_from_axis(th - h * w))) / (2 * h)
    spin = dR @ exp_skew(skew_from_axis(th)).T
    assert np.allclose(spin, skew_from_axis(left_jacobian(th) @ w), atol=1e-8)
    tiny = 1e-6 * th
    assert np.allclose(left_jacobian(tiny), np.eye(3) + 0.5 * skew_from_axis(tiny), atol=1e-12)


def test_equilibrium_accelerations_vanish(model12):
    st = model12.initial_state()
    ev = model12.evaluate(st.vector(), 0.0)
    assert not ev.accel.any()
    assert ev.energy["total"] == 0.0
    assert np.array_equal(model12.step(st).vector(), st.vector())


def test_state_vector_round_trip(model12, rng):
    q = rng.standard_normal(2 * sum(model12.sizes))
    assert np.array_equal(SimState.from_vector(q, model12.sizes, 0.0).vector(), q)


def test_config_validation():
    with pytest.raises(ConfigError):
        GalerkinModel(RunConfig(dt=-1.0))
    with pytest.raises(ConfigError):
        GalerkinModel(RunConfig(dt=1.0))  # above the stability bound
    with pytest.raises(ConfigError):
        RunConfig(m=0).validate()
    with pytest.raises(ConfigError):
        RunConfig(exit_margin=0).validate()
    with pytest.raises(ConfigError):
        RunConfig(integrator="euler").validate()
    with pytest.raises(ConfigError):
        GalerkinModel(RunConfig(n=(6, 6, 6), dirichlet=""))


def test_auto_dt_respects_bound(model12):
    assert model12.dt <= model12.dt_bound
    assert np.isclose(round(model12.cfg.t_end / model12.dt) * model12.dt, model12.cfg.t_end)


def _terminal(cfg, basis):
    return run(cfg, GalerkinModel(cfg, basis=basis)).final.vector()


def test_self_convergence_order(model12):
    # smooth forcing only: a clamp that engages mid-run puts a kink in time and caps the order
    kw = dict(t_end=0.08, init_xdot=0.3, init_ydot=0.3, w_ext=ForcingSpec(amplitude=20.0),
              omega_ext=ForcingSpec(amplitude=5.0, direction="z", growth=1e9))
    ref = _terminal(RunConfig(dt=0.00125, **kw), model12.basis)
    e = [np.abs(_terminal(RunConfig(dt=dt, **kw), model12.basis) - ref).max() for dt in (0.01, 0.005)]
    assert np.log2(e[0] / e[1]) >= 1.8


def test_rk4_agrees(model12):
    kw = dict(t_end=0.04, dt=0.005, init_xdot=0.3)
    a = _terminal(RunConfig(**kw), model12.basis)
    b = _terminal(RunConfig(integrator="rk4", **kw), model12.basis)
    assert np.abs(a - b).max() <= 1e-3 * np.abs(a).max()


def test_structure_and_displacement_elimination(model12):
    cfg = RunConfig(t_end=0.1, dt=0.002, init_xdot=0.3, init_ydot=0.2,
                    f_ext=ForcingSpec(amplitude=2.0, direction="x"))
    m = GalerkinModel(cfg, basis=model12.basis)
    seen = []
    run(cfg, m, on_step=lambda st, tr: seen.append(m.fields(st)))
    for W, Th, R, u in seen:
        assert np.array_equal(W, np.swapaxes(W, -1, -2)) and np.array_equal(Th, -np.swapaxes(Th, -1, -2))
    tr = run(cfg, m)
    z = np.array(tr.z)
    fd = (z[2:] - 2 * z[1:-1] + z[:-2]) / cfg.dt**2
    zdd = np.array(tr.zddot)[1:-1]
    assert np.abs(fd - zdd).max() <= 0.05 * np.abs(zdd).max()


def test_forcing_clamp_linear_growth(model12):
    cfg = RunConfig(w_ext=ForcingSpec(amplitude=1e6, growth=5.0))
    m = GalerkinModel(cfg, basis=model12.basis)
    W = m.basis.W_of(np.zeros(6))
    F = m._clamped(cfg.w_ext, m.w_profile, W, 0.0)
    assert np.sqrt(m.forms.l2(F)) <= 5.0 * (m._h2_norm(W) + 1.0) * (1 + 1e-12)


def test_exit_is_reported(model12):
    cfg = RunConfig(t_end=1.0, exit_margin=0.02, w_ext=ForcingSpec(amplitude=1600.0, growth=1000.0))
    tr = run(cfg, GalerkinModel(cfg, basis=model12.basis))
    assert tr.exit.exited and tr.exit.invariant == "det"
    assert 0 < tr.exit.t_hat < 1.0 and len(tr.exit.location) == 3
