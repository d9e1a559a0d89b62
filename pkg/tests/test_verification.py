import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dged.dynamics import ModelParams, State, quadratic_well, zero_potential
from dged.mesh_basis import BoundaryMode, DgFunction, build_mesh
from dged.operators import OpKind, operators_for
from dged.verification import (
    COLUMNS,
    ORACLE_MAX_DOFS,
    ConvergenceReport,
    ConvergenceRow,
    ExactSolution,
    dense_oracle,
    eoc,
    error_norms,
    initial_error_energy,
    manufactured_periodic,
    production_matrix,
    projection_residual_audit,
    run_convergence_study,
    run_level,
    tanh_steady_state,
)

# u-L2 column of the first benchmark table, N = 16 ... 1024
TABLE1_U_L2 = [3.033825e-01, 2.024675e-01, 9.293951e-03, 3.226365e-03, 1.022094e-03, 2.124393e-04, 5.332873e-05]
TABLE1_EOC = [0.000, 0.583, 4.445, 1.526, 1.658, 2.266, 1.994]


# --- exact solutions ------------------------------------------------------------------------------


def test_tanh_profile_examples():
    ex = tanh_steady_state(ModelParams(gamma=1e-3))
    assert ex.u(0.0, 0.0) == 0.0
    assert ex.u(0.0, 0.5) == pytest.approx(1.0, abs=1e-9)
    assert ex.boundary_mode is BoundaryMode.NATURAL and (ex.left, ex.right) == (-1.0, 1.0)
    ex2 = tanh_steady_state(ModelParams(gamma=2.0))
    xs = np.linspace(-1, 1, 9)
    assert np.allclose(ex2.u(0.3, xs), np.tanh(xs))
    assert ex2.du(0.0, 0.0) == pytest.approx(1.0)
    assert np.all(ex2.v(0.0, xs) == 0)


def test_tanh_rejects_other_potentials():
    with pytest.raises(ValueError):
        tanh_steady_state(ModelParams(potential=quadratic_well()))


def test_exact_derivatives_consistent():
    for ex in (tanh_steady_state(ModelParams(gamma=0.1)), manufactured_periodic()):
        f = ex.at(0.0)
        x = np.linspace(ex.left + 0.05, ex.right - 0.05, 13)
        e = 1e-6
        for g, dg in ((f.u, f.du), (f.du, f.d2u), (f.d2u, f.d3u), (f.v, f.dv), (f.dv, f.d2v), (f.d2v, f.d3v)):
            fd = (g(x + e) - g(x - e)) / (2 * e)
            assert np.allclose(fd, dg(x), rtol=1e-5, atol=1e-5 * (1 + np.abs(dg(x)).max()))


# --- EOC ---------------------------------------------------------------------------------------------


def test_eoc_examples():
    h = np.array([0.1, 0.05, 0.025, 0.0125])
    assert np.allclose(eoc(h**2, h), [0, 2, 2, 2])
    assert np.allclose(eoc([3.0] * 4, h), 0)


def test_eoc_reproduces_table_column():
    h = [2.0 / N for N in (16, 32, 64, 128, 256, 512, 1024)]
    assert np.round(eoc(TABLE1_U_L2, h), 3).tolist() == TABLE1_EOC


@pytest.mark.parametrize("errs,hs", [([1.0], [1.0]), ([1.0, 0.0], [1.0, 0.5]), ([1.0, 2.0], [1.0, -0.5]), ([1, 2, 3], [1, 2])])
def test_eoc_rejects(errs, hs):
    with pytest.raises(ValueError):
        eoc(errs, hs)


@given(st.floats(0.5, 6.0), st.floats(1e-3, 1e3))
def test_eoc_power_law_property(order, c):
    h = 2.0 ** -np.arange(1, 6)
    assert np.allclose(eoc(c * h**order, h)[1:], order, atol=1e-9)


# --- error norms ----------------------------------------------------------------------------------


def _as_exact(u: DgFunction, v: DgFunction, mode):
    mesh = u.mesh

    def du(t, x):
        idx, xi = mesh.locate(np.ravel(x))
        vals = u.derivative_at_reference(xi)[idx, np.arange(xi.size)]
        return vals.reshape(np.shape(x))

    return ExactSolution(
        "self", lambda t, x: u(x), lambda t, x: v(x), du, None, None, lambda t, x: 0 * x, None, None,
        mesh.left, mesh.right, mode,
    )


def test_error_norms_zero_cases():
    m = build_mesh(0, 1, 8)
    # a continuous piecewise-linear u avoids trace ambiguity at the nodes; v = 0
    u = DgFunction(m, 1, np.column_stack([np.full(8, 0.5), np.zeros(8)]))
    ex = _as_exact(u, DgFunction(m, 1), BoundaryMode.PERIODIC)
    z = State(0.0, u, DgFunction(m, 1))
    assert error_norms([z, State(0.1, u, DgFunction(m, 1))], ex) == pytest.approx((0, 0, 0, 0), abs=1e-14)


def test_error_norms_projection_level():
    p = ModelParams(gamma=0.1)
    ex = tanh_steady_state(p)
    m = build_mesh(-1, 1, 32, 0.0, BoundaryMode.NATURAL)
    f = ex.at(0.0)
    z = State.project(f.u, f.v, m, 1)
    uL2, udG, vL2, vdG = error_norms([z], ex)
    assert 0 < uL2 < udG and vL2 == 0 and vdG == 0
    with pytest.raises(ValueError):
        error_norms([], ex)


def test_error_norms_time_integration():
    m = build_mesh(0, 1, 4)
    zero = ExactSolution("zero", *(lambda t, x: 0 * x,) * 8, 0.0, 1.0, BoundaryMode.PERIODIC)
    v = DgFunction(m, 1)
    v.coeffs[:, 1] = 1.0  # slope 2/h on every cell, seminorm^2 = sum 4/h + jumps
    traj = [State(t, DgFunction(m, 1), v) for t in (0.0, 0.5, 1.0)]
    _, _, vL2, vdG = error_norms(traj, zero)
    semi_sq = 4 * 4 / 0.25 + 4 * 2**2 / 0.25
    assert vdG == pytest.approx(math.sqrt(semi_sq), rel=1e-12)
    assert vL2 == pytest.approx(math.sqrt(4 * 0.25 / 3))


def test_initial_error_energy_definition():
    p = ModelParams(gamma=0.1, degree=1)
    ex = tanh_steady_state(p)
    m = build_mesh(-1, 1, 16, 0.0, BoundaryMode.NATURAL)
    f = ex.at(0.0)
    e0 = initial_error_energy(ex, State.project(f.u, f.v, m, 1), p)
    assert e0 > 0
    e1 = initial_error_energy(ex, State.project(f.u, f.v, build_mesh(-1, 1, 64, 0.0, BoundaryMode.NATURAL), 1), p)
    assert e1 < e0 / 4


# --- residual audit -----------------------------------------------------------------------------


def test_residual_audit_orders_q2():
    p = ModelParams(gamma=0.1, mu=0.1, degree=2)
    levels = projection_residual_audit(manufactured_periodic(), [16, 32, 64, 128], p)
    hs = [lv.h for lv in levels]
    assert max(lv.R_u for lv in levels) <= 1e-11
    assert eoc([lv.R_tau for lv in levels], hs)[-1] == pytest.approx(3.0, abs=0.3)
    assert eoc([lv.R_v for lv in levels], hs)[-1] == pytest.approx(2.0, abs=0.3)


def test_residual_audit_zero_potential():
    p = ModelParams(gamma=1.0, mu=0.0, degree=2, potential=zero_potential())
    for lv in projection_residual_audit(manufactured_periodic(), [8, 16], p):
        assert lv.R_tau == 0.0


def test_residual_audit_perturbed_mesh():
    p = ModelParams(gamma=0.1, mu=0.1, degree=1)
    levels = projection_residual_audit(manufactured_periodic(), [16, 32, 64], p, perturbation=0.2)
    assert max(lv.R_u for lv in levels) <= 1e-11


def test_residual_audit_rejects_natural():
    with pytest.raises(ValueError):
        projection_residual_audit(tanh_steady_state(ModelParams()), [8, 16], ModelParams())


# --- dense oracle ----------------------------------------------------------------------------------


def test_oracle_grad_minus_small():
    m = build_mesh(0, 1, 4)
    assert np.abs(dense_oracle(OpKind.GRAD_MINUS, m, 1) - production_matrix(OpKind.GRAD_MINUS, m, 1)).max() < 1e-12


@pytest.mark.parametrize("mode", list(BoundaryMode))
@pytest.mark.parametrize("pert", [0.0, 0.3])
def test_oracle_matches_perturbed_and_natural(mode, pert):
    m = build_mesh(0, 1, 6, pert, mode, seed=11)
    for kind in (OpKind.GRAD_MINUS, OpKind.GRAD_PLUS, OpKind.IP_FORM):
        for q in (1, 3):
            dev = np.abs(dense_oracle(kind, m, q) - production_matrix(kind, m, q)).max()
            assert dev < 1e-11, (kind, q, dev)


def test_oracle_laplacian_relative():
    # entries of -M^{-1} A grow like sigma (2k+1) / h^2, compare relative to their size
    for N in (4, 8, 16):
        for q in (1, 2, 3):
            m = build_mesh(0, 1, N)
            O = dense_oracle(OpKind.LAPLACIAN, m, q)
            P = production_matrix(OpKind.LAPLACIAN, m, q)
            assert np.abs(O - P).max() <= 1e-13 * np.abs(O).max()


def test_oracle_ip_symmetric_and_duality():
    m = build_mesh(0, 1, 6, 0.2)
    A = dense_oracle(OpKind.IP_FORM, m, 2)
    assert np.abs(A - A.T).max() < 1e-13
    Gm = dense_oracle(OpKind.GRAD_MINUS, m, 2)
    Gp = dense_oracle(OpKind.GRAD_PLUS, m, 2)
    M = operators_for(m, 2).mass
    assert np.allclose(Gp, -(Gm.T * M[None, :]) / M[:, None], atol=1e-11)


def test_oracle_size_cap():
    m = build_mesh(0, 1, ORACLE_MAX_DOFS // 2 + 1)
    with pytest.raises(ValueError):
        dense_oracle(OpKind.GRAD_MINUS, m, 1)


# --- convergence harness ---------------------------------------------------------------------------


def test_convergence_study_small():
    p = ModelParams(gamma=0.05, mu=0.05, degree=1)
    rep = run_convergence_study(p, [8, 16], T=0.1)
    assert isinstance(rep, ConvergenceReport) and not rep.failed
    assert [r.N for r in rep.rows] == [8, 16]
    first = rep.rows[0]
    assert (first.eoc_u_L2, first.eoc_u_dG, first.eoc_v_L2, first.eoc_v_dG) == (0, 0, 0, 0)
    assert rep.rows[1].err_u_LinfL2 < first.err_u_LinfL2
    assert rep.metadata["degree"] == 1 and rep.metadata["dt_rule"] == "h^2"
    assert len(rep.rows[0].table_values()) == len(COLUMNS)
    assert rep.rows[1].steps == math.ceil(0.1 / (2 / 16) ** 2)


def test_run_level_marks_failure(monkeypatch):
    from dged import dynamics

    monkeypatch.setattr(dynamics, "NEWTON_MAXITER", 0)
    row = run_level(ModelParams(gamma=0.05, degree=1), 8, 0.1)
    assert row.failed and "Newton" in row.message


def test_report_trailing_eoc():
    rows = [ConvergenceRow(N=n, h=1 / n, eoc_u_L2=e) for n, e in ((8, 0.0), (16, 1.0), (32, 3.0))]
    assert ConvergenceReport(rows).trailing_eoc("eoc_u_L2") == 2.0
