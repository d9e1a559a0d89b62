"""Numerical checks of the operator and projection properties the error
analysis relies on. Each check returns a :class:`PropertyResult`; the
``props`` command prints them one per line."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import scipy.linalg as sla

from .dynamics import ModelParams, double_well
from .mesh_basis import (
    BoundaryMode,
    DgFunction,
    Ghost,
    Mesh1D,
    build_mesh,
    dg_norms,
    face_sizes,
    jumps,
    l2_norm,
    l2_project,
    reference_stiffness,
)
from .operators import (
    OpKind,
    PenaltyConfig,
    duality_defect,
    kernel_rank,
    null_space,
    operators_for,
    q_projection,
    r_projection,
    riesz_projection,
    s_projection,
)
from .verification import (
    dense_oracle,
    eoc,
    field_errors,
    manufactured_periodic,
    production_matrix,
    projection_residual_audit,
)

TWO_PI = 2.0 * math.pi


@dataclass
class PropertyResult:
    name: str
    passed: bool
    measured: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28s} {self.measured}"


def _timed(fn: Callable[..., PropertyResult]) -> Callable[..., PropertyResult]:
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _random_field(mesh: Mesh1D, q: int, rng: np.random.Generator) -> DgFunction:
    return DgFunction(mesh, q, rng.standard_normal((mesh.n_cells, q + 1)))


def _meshes(N: int, seed: int, mode=BoundaryMode.PERIODIC):
    return [build_mesh(0.0, 1.0, N, 0.0, mode), build_mesh(0.0, 1.0, N, 0.3, mode, seed=seed)]


# ---------------------------------------------------------------------------
# Discrete gradients and the penalty form


@_timed
def check_duality(seed: int = 0, pairs: int = 100, degrees=(1, 2, 3, 4), N: int = 16) -> PropertyResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for mode in BoundaryMode:
        for q in degrees:
            for mesh in _meshes(N, seed, mode):
                for _ in range(pairs):
                    phi, psi = _random_field(mesh, q, rng), _random_field(mesh, q, rng)
                    d = abs(duality_defect(phi, psi)) / (l2_norm(phi) * l2_norm(psi))
                    worst = max(worst, d)
    return PropertyResult("duality", worst < 1e-12, f"max relative defect {worst:.2e} (< 1e-12)")


@_timed
def check_kernel(seed: int = 0, degrees=(1, 2, 3, 4), N: int = 8) -> PropertyResult:
    ok = True
    worst_var = 0.0
    nullities = set()
    for q in degrees:
        for mesh in _meshes(N, seed):
            ops = operators_for(mesh, q)
            for op in (ops.grad_minus, ops.grad_plus):
                k = kernel_rank(op)
                nullities.add(k)
                if k != 1:
                    ok = False
                    continue
                # constant field: only the k=0 coefficients are nonzero and all equal
                v = null_space(op)[:, 0].reshape(mesh.n_cells, q + 1)
                v = v / v[0, 0]
                var = max(float(np.var(v[:, 0])), float(np.abs(v[:, 1:]).max()))
                worst_var = max(worst_var, var)
    ok = ok and worst_var < 1e-10
    return PropertyResult(
        "kernel_rank", ok, f"G+- nullity {sorted(nullities)}, null-vector deviation from constant {worst_var:.1e}"
    )


@_timed
def check_range_mean_zero(seed: int = 0, degrees=(1, 2, 3, 4), samples: int = 25) -> PropertyResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for q in degrees:
        for mesh in _meshes(16, seed):
            ops = operators_for(mesh, q)
            for _ in range(samples):
                f = _random_field(mesh, q, rng)
                for op in (ops.grad_minus, ops.grad_plus):
                    worst = max(worst, abs(op.apply(f).mean()))
    return PropertyResult("range_mean_zero", worst < 1e-13, f"max |mean G+-[f]| {worst:.1e} (< 1e-13)")


def _mean_zero_basis(mesh: Mesh1D, q: int) -> np.ndarray:
    """Columns spanning the fields with zero integral."""
    r = operators_for(mesh, q).mean_row()
    return sla.null_space(r[None, :])


@_timed
def check_ip_form(cfg_sigma: float | None = None, seed: int = 0, degrees=(1, 2, 3, 4), N: int = 16) -> PropertyResult:
    worst_sym = 0.0
    min_eig = math.inf
    floor_ok = True
    for q in degrees:
        cfg = PenaltyConfig(cfg_sigma) if cfg_sigma is not None else PenaltyConfig.default(q)
        floor_ok = floor_ok and not cfg.below_floor(q)
        for mesh in _meshes(N, seed):
            A = operators_for(mesh, q, cfg).A.toarray()
            worst_sym = max(worst_sym, float(np.abs(A - A.T).max()))
            Z = _mean_zero_basis(mesh, q)
            ev = np.linalg.eigvalsh(Z.T @ A @ Z)
            min_eig = min(min_eig, float(ev[0]))
    ok = worst_sym < 1e-13 and min_eig > 0 and floor_ok
    msg = f"asymmetry {worst_sym:.1e}, min eigenvalue on mean-zero fields {min_eig:.3e}"
    if not floor_ok:
        msg += f", sigma below coercivity floor"
    return PropertyResult("ip_symmetric_coercive", ok, msg)


def _weighted(ops, G: np.ndarray) -> np.ndarray:
    s = np.sqrt(ops.mass)
    return s[:, None] * G / s[None, :]


def dg_seminorm_matrix(mesh: Mesh1D, q: int) -> np.ndarray:
    """S with c^T S c = |f|_dG^2 (mirror ghosts in natural mode)."""
    nb = q + 1
    n = mesh.n_cells * nb
    S = np.zeros((n, n))
    K = reference_stiffness(q)
    for c, h in enumerate(mesh.cell_sizes):
        S[c * nb : (c + 1) * nb, c * nb : (c + 1) * nb] = 2.0 / h * K
    hf = face_sizes(mesh)
    for i in range(mesh.n_faces):
        L, R = mesh.face_cells(i)
        if L is None or R is None:
            continue
        J = np.zeros(n)
        J[L * nb : (L + 1) * nb] = 1.0
        J[R * nb : (R + 1) * nb] -= (-1.0) ** np.arange(nb)
        S += np.outer(J, J) / hf[i]
    return S


def gradient_ratios(mesh: Mesh1D, q: int) -> dict:
    """Exact suprema behind the inverse, Poincare and coercivity bounds for G-.

    inverse:    max ||G- f|| / ||f / h||
    poincare:   max ||f|| / ||G- f||       over mean-zero f
    coercivity: max |f|_dG / ||G- f||      over mean-zero f
    """
    ops = operators_for(mesh, q)
    G = ops.grad_minus.dense()
    Gw = _weighted(ops, G)
    hvec = np.repeat(mesh.cell_sizes, q + 1)
    inverse = float(np.linalg.norm(Gw * hvec[None, :], 2))
    s = np.linalg.svd(Gw, compute_uv=False)
    poincare = float(1.0 / s[-2])  # smallest nonzero singular value; kernel is 1-D
    Z = _mean_zero_basis(mesh, q)
    GtMG = G.T @ (ops.mass[:, None] * G)
    S = dg_seminorm_matrix(mesh, q)
    ev = sla.eigh(Z.T @ S @ Z, Z.T @ GtMG @ Z, eigvals_only=True)
    coercivity = float(math.sqrt(ev[-1]))
    return {"inverse": inverse, "poincare": poincare, "coercivity": coercivity}


@_timed
def check_gradient_bounds(q: int = 2, N_list=(16, 32, 64, 128, 256), seed: int = 0) -> PropertyResult:
    """Ratios at the finest mesh may exceed the coarsest by at most 10%."""
    rows = []
    for N in N_list:
        rows.append(gradient_ratios(build_mesh(0.0, 1.0, N), q))
    msg = []
    ok = True
    for key in ("inverse", "poincare", "coercivity"):
        first, last = rows[0][key], rows[-1][key]
        grow = last / first
        ok = ok and grow <= 1.1
        msg.append(f"{key} {first:.3g}->{last:.3g}")
    return PropertyResult("gradient_bounds", ok, ", ".join(msg) + f" (N {N_list[0]}..{N_list[-1]}, growth <= 1.1)")


@_timed
def check_oracle(Ns=(4, 8, 16), degrees=(1, 2, 3), kinds: Iterable[OpKind] = tuple(OpKind), tol: float = 1e-12) -> PropertyResult:
    worst = {}
    for kind in kinds:
        w = 0.0
        for N in Ns:
            for q in degrees:
                mesh = build_mesh(0.0, 1.0, N)
                w = max(w, float(np.abs(dense_oracle(kind, mesh, q) - production_matrix(kind, mesh, q)).max()))
        worst[kind.value] = w
    ok = all(v <= tol for v in worst.values())
    msg = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return PropertyResult("oracle_match", ok, f"max abs deviation {msg} (<= {tol:g})")


# ---------------------------------------------------------------------------
# Projection orders


def _sin():
    return (
        lambda x: np.sin(TWO_PI * x),
        lambda x: TWO_PI * np.cos(TWO_PI * x),
        lambda x: -(TWO_PI**2) * np.sin(TWO_PI * x),
        lambda x: -(TWO_PI**3) * np.cos(TWO_PI * x),
    )


def projection_errors(q: int, N_list=(16, 32, 64, 128)) -> dict:
    """Per-level errors of the Riesz, S+-, and Q projections of sin(2 pi x)."""
    w, dw, d2w, d3w = _sin()
    out = {k: [] for k in ("h", "riesz_l2", "riesz_dg", "s_plus", "s_minus", "q_minus_s")}
    for N in N_list:
        mesh = build_mesh(0.0, 1.0, N)
        P = riesz_projection(w, d2w, mesh, q)
        l2sq, semi = field_errors(P, w, dw, Ghost.MIRROR)
        sp_ = s_projection(w, mesh, q, "+")
        sm_ = s_projection(w, mesh, q, "-")
        Q = q_projection(w, dw, d3w, mesh, q)
        out["h"].append(mesh.h)
        out["riesz_l2"].append(math.sqrt(l2sq))
        out["riesz_dg"].append(math.sqrt(semi))
        out["s_plus"].append(math.sqrt(field_errors(sp_, w, dw, Ghost.MIRROR)[0]))
        out["s_minus"].append(math.sqrt(field_errors(sm_, w, dw, Ghost.MIRROR)[0]))
        out["q_minus_s"].append(l2_norm(Q - sp_))
    return out


PROJECTION_TARGETS = {
    # name: (order offset from q, tolerance)
    "riesz_l2": (1, 0.3),
    "riesz_dg": (0, 0.3),
    "s_plus": (1, 0.3),
    "s_minus": (1, 0.3),
    "q_minus_s": (1, 0.4),
}


@_timed
def check_projection_orders(degrees=(1, 2, 3), N_list=(16, 32, 64, 128)) -> PropertyResult:
    ok = True
    parts = []
    for q in degrees:
        errs = projection_errors(q, N_list)
        for name, (off, tol) in PROJECTION_TARGETS.items():
            rate = eoc(errs[name], errs["h"])[-1]
            good = abs(rate - (q + off)) <= tol
            ok = ok and good
            parts.append(f"q{q}:{name}={rate:.2f}")
    return PropertyResult("projection_orders", ok, " ".join(parts))


@_timed
def check_r_projection(degrees=(1, 2, 3), N_list=(16, 64, 256)) -> PropertyResult:
    """R[tau] must coincide with P_q[tau], tau = W'(u) - gamma u''.

    Checked on smooth periodic data, and on the stationary tanh profile where
    tau vanishes and R[tau] must be zero up to rounding.
    """
    W = double_well()
    worst_id = 0.0
    for q in degrees:
        for N in N_list:
            mesh = build_mesh(0.0, 1.0, N)
            gamma = 0.1
            u = lambda x: 0.3 * np.sin(TWO_PI * x)  # noqa: E731
            d2u = lambda x: -0.3 * TWO_PI**2 * np.sin(TWO_PI * x)  # noqa: E731
            R = r_projection(u, d2u, W.dW, gamma, mesh, q)
            Pt = l2_project(lambda x: W.dW(u(x)) - gamma * d2u(x), mesh, q)
            worst_id = max(worst_id, l2_norm(R - Pt) / l2_norm(Pt))
    gamma = 1e-3
    a = math.sqrt(2.0 / gamma)
    u = lambda x: np.tanh(a * x)  # noqa: E731
    du = lambda x: a / np.cosh(a * x) ** 2  # noqa: E731
    d2u = lambda x: -2 * a * a * np.tanh(a * x) / np.cosh(a * x) ** 2  # noqa: E731
    worst_ss = 0.0
    for q in degrees:
        for N in N_list:
            mesh = build_mesh(-1.0, 1.0, N, 0.0, BoundaryMode.NATURAL)
            R = r_projection(u, d2u, W.dW, gamma, mesh, q, du=du)
            scale = l2_norm(l2_project(lambda x: W.dW(u(x)), mesh, q))
            worst_ss = max(worst_ss, l2_norm(R) / scale)
    # the Riesz solve loses about cond(A) ~ sigma N^2 digits of rounding
    ok = worst_id < 1e-8 and worst_ss < 1e-8
    return PropertyResult(
        "r_projection_identity", ok,
        f"||R - P_q tau||/||P_q tau|| {worst_id:.1e}, steady-state ||R||/||P_q W'(u)|| {worst_ss:.1e} (< 1e-8)",
    )


@_timed
def check_riesz_stability(q: int = 2, N_list=(16, 32, 64, 128, 256), gamma: float = 0.1) -> PropertyResult:
    """max-norm of the Riesz projection of a tanh profile and of its derivative."""
    a = math.sqrt(2.0 / gamma)
    u = lambda x: np.tanh(a * x)  # noqa: E731
    du = lambda x: a * (1 - np.tanh(a * x) ** 2)  # noqa: E731
    d2u = lambda x: -2 * a * a * np.tanh(a * x) * (1 - np.tanh(a * x) ** 2)  # noqa: E731
    exact = 1.0 + a  # ||u||_inf + ||u'||_inf
    ratios = []
    xi = np.linspace(-1, 1, 21)
    for N in N_list:
        mesh = build_mesh(-1.0, 1.0, N, 0.0, BoundaryMode.NATURAL)
        P = riesz_projection(u, d2u, mesh, q, dw=du)
        norm = float(np.abs(P.at_reference(xi)).max() + np.abs(P.derivative_at_reference(xi)).max())
        ratios.append(norm / exact)
    ok = max(ratios) <= 2.0
    return PropertyResult(
        "riesz_w1inf_stability", ok, "ratio " + ", ".join(f"{r:.3f}" for r in ratios) + " (<= 2)"
    )


@_timed
def check_residual_audit(degrees=(1, 2), N_list=(16, 32, 64, 128)) -> PropertyResult:
    ex = manufactured_periodic()
    ok = True
    parts = []
    for q in degrees:
        p = ModelParams(gamma=0.1, mu=0.1, degree=q)
        levels = projection_residual_audit(ex, N_list, p)
        hs = [lv.h for lv in levels]
        ru = max(lv.R_u for lv in levels)
        rt = eoc([lv.R_tau for lv in levels], hs)[-1]
        rv = eoc([lv.R_v for lv in levels], hs)[-1]
        ok = ok and ru <= 1e-11 and abs(rt - (q + 1)) <= 0.3 and abs(rv - q) <= 0.3
        parts.append(f"q{q}: R_u<={ru:.1e} R_tau={rt:.2f} R_v={rv:.2f}")
    return PropertyResult("residual_audit", ok, "; ".join(parts))


def run_all(sigma: float | None = None, seed: int = 0) -> list[PropertyResult]:
    return [
        check_duality(seed=seed),
        check_kernel(seed=seed),
        check_range_mean_zero(seed=seed),
        check_ip_form(cfg_sigma=sigma, seed=seed),
        check_gradient_bounds(),
        check_oracle(),
        check_projection_orders(),
        check_r_projection(),
        check_riesz_stability(),
        check_residual_audit(),
    ]
