"""Discrete gradients, interior-penalty form and the projections built on them.

All operators are assembled from closed-form Legendre identities
(endpoint values ``(+-1)^k``, derivative and stiffness tables) into
``scipy.sparse`` matrices acting on coefficient vectors ordered
``n*(q+1) + k``.

Natural-mode boundary treatment: the strain sees mirror ghosts, so boundary
faces drop out of the interior-penalty form (weak ``du/dx = 0``). The
velocity boundary value is the average of its odd ghost pair, i.e. zero:
``G-`` carries the boundary jump against zero and ``G+`` is its exact
negative adjoint, which keeps the duality identity (and thus the discrete
energy balance) intact on bounded intervals.
"""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh_basis import (
    DgFunction,
    Mesh1D,
    assembly_rule,
    face_sizes,
    integrate,
    l2_project,
    legendre_table,
    mass_diagonal,
    reference_derivative,
    reference_stiffness,
)


class LinearSolveError(RuntimeError):
    pass


def default_sigma(q: int) -> float:
    return 4.0 * (q + 1) ** 2


def sigma_floor(q: int) -> float:
    """Smallest penalty we accept as coercive for degree ``q``.

    On uniform meshes the form loses definiteness at sigma = q(q+1)/2, on
    meshes jittered by 0.35 h at about 1.3 times that; the floor doubles the
    uniform threshold.
    """
    return float(q * (q + 1))


@dataclass(frozen=True)
class PenaltyConfig:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def default(cls, q: int) -> "PenaltyConfig":
        return cls(default_sigma(q))

    def below_floor(self, q: int) -> bool:
        return self.sigma < sigma_floor(q)


class OpKind(enum.Enum):
    GRAD_MINUS = "grad_minus"
    GRAD_PLUS = "grad_plus"
    IP_FORM = "ip_form"
    LAPLACIAN = "laplacian"


@dataclass(frozen=True)
class DgOperator:
    """Sparse coefficient-space operator.

    ``matrix`` maps coefficient vectors to coefficient vectors (the strong
    form, mass matrix already inverted) except for ``IP_FORM`` where it is the
    bilinear-form matrix ``A[i, j] = a(phi_j, phi_i)``.
    """

    mesh: Mesh1D
    degree: int
    kind: OpKind
    matrix: sp.csr_matrix

    def apply(self, f: DgFunction) -> DgFunction:
        return DgFunction.from_vector(self.mesh, self.degree, self.matrix @ f.vector)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    @property
    def shape(self):
        return self.matrix.shape


# ---------------------------------------------------------------------------
# Assembly


def _endpoint_rows(q: int, h: float):
    """Values and physical derivatives of l_0..l_q at x_n^+ and x_{n+1}^-."""
    k = np.arange(q + 1)
    left = (-1.0) ** k
    right = np.ones(q + 1)
    dright = k * (k + 1) / h
    dleft = (-1.0) ** (k + 1) * k * (k + 1) / h
    return left, right, dleft, dright


class _Coo:
    def __init__(self, n):
        self.n = n
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows, cols, block):
        r, c = np.meshgrid(rows, cols, indexing="ij")
        self.rows.append(r.ravel())
        self.cols.append(c.ravel())
        self.vals.append(np.asarray(block, dtype=float).ravel())

    def csr(self) -> sp.csr_matrix:
        if not self.rows:
            return sp.csr_matrix((self.n, self.n))
        m = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.n, self.n),
        ).tocsr()
        m.sum_duplicates()
        m.eliminate_zeros()
        return m


def assemble_gradient_weak(mesh: Mesh1D, q: int, side: str) -> sp.csr_matrix:
    """B[i, j] = int G^{side}[phi_j] phi_i (weak form of the one-sided gradient)."""
    if side not in ("-", "+"):
        raise ValueError("side must be '-' or '+'")
    nb = q + 1
    N = mesh.n_cells
    hs = mesh.cell_sizes
    coo = _Coo(N * nb)
    D = reference_derivative(q)
    dofs = lambda n: np.arange(n * nb, (n + 1) * nb)  # noqa: E731
    for n in range(N):
        coo.add(dofs(n), dofs(n), D)
    for i in range(mesh.n_faces):
        L, R = mesh.face_cells(i)
        if L is not None and R is not None:
            wl, _, _, _ = _endpoint_rows(q, hs[R])
            _, wr_left, _, _ = _endpoint_rows(q, hs[L])
            # jump functional: w(x_i^-) - w(x_i^+) = sum c^L_j - sum (-1)^j c^R_j
            jl, jr = wr_left, -wl
            if side == "-":
                test, tcell = wr_left, L  # Psi(x_i^-) from the left cell
            else:
                test, tcell = wl, R  # Psi(x_i^+) from the right cell
            coo.add(dofs(tcell), dofs(L), -np.outer(test, jl))
            coo.add(dofs(tcell), dofs(R), -np.outer(test, jr))
        elif side == "-":
            # velocity boundary value zero; G+ gets no boundary terms
            if L is None:
                left, _, _, _ = _endpoint_rows(q, hs[R])
                coo.add(dofs(R), dofs(R), np.outer(left, left))
            else:
                right = np.ones(nb)
                coo.add(dofs(L), dofs(L), -np.outer(right, right))
    return coo.csr()


def assemble_ip_matrix(mesh: Mesh1D, q: int, sigma: float) -> sp.csr_matrix:
    """A[i, j] = a_h^d(phi_j, phi_i) for the symmetric interior-penalty form."""
    nb = q + 1
    N = mesh.n_cells
    hs = mesh.cell_sizes
    coo = _Coo(N * nb)
    K = reference_stiffness(q)
    for n in range(N):
        d = np.arange(n * nb, (n + 1) * nb)
        coo.add(d, d, 2.0 / hs[n] * K)
    hf = face_sizes(mesh)
    for i in range(mesh.n_faces):
        L, R = mesh.face_cells(i)
        if L is None or R is None:
            continue  # mirror ghost: zero jump, face drops out
        _, right_L, _, dright_L = _endpoint_rows(q, hs[L])
        left_R, _, dleft_R, _ = _endpoint_rows(q, hs[R])
        J = np.concatenate([right_L, -left_R])
        Dv = 0.5 * np.concatenate([dright_L, dleft_R])
        block = -np.outer(Dv, J) - np.outer(J, Dv) + sigma / hf[i] * np.outer(J, J)
        d = np.concatenate([np.arange(L * nb, (L + 1) * nb), np.arange(R * nb, (R + 1) * nb)])
        coo.add(d, d, block)
    A = coo.csr()
    # duplicate summation order differs between (i, j) and (j, i)
    return ((A + A.T) * 0.5).tocsr()


class OperatorSet:
    """All assembled operators for one (mesh, degree, sigma) triple."""

    def __init__(self, mesh: Mesh1D, q: int, penalty: PenaltyConfig):
        self.mesh = mesh
        self.q = q
        self.penalty = penalty
        self.mass = mass_diagonal(mesh, q)
        minv = sp.diags(1.0 / self.mass)
        self.Bm = assemble_gradient_weak(mesh, q, "-")
        self.Bp = assemble_gradient_weak(mesh, q, "+")
        self.A = assemble_ip_matrix(mesh, q, penalty.sigma)
        self.grad_minus = DgOperator(mesh, q, OpKind.GRAD_MINUS, (minv @ self.Bm).tocsr())
        self.grad_plus = DgOperator(mesh, q, OpKind.GRAD_PLUS, (minv @ self.Bp).tocsr())
        self.ip = DgOperator(mesh, q, OpKind.IP_FORM, self.A)
        self.laplacian = DgOperator(mesh, q, OpKind.LAPLACIAN, (-(minv @ self.A)).tocsr())
        self._lock = threading.Lock()
        self._riesz_lu = None
        self._q_lu = None

    @property
    def ndofs(self) -> int:
        return self.mass.size

    def mean_row(self) -> np.ndarray:
        """Row vector r with r @ c = integral of the field with coefficients c."""
        r = np.zeros(self.ndofs)
        r[:: self.q + 1] = self.mesh.cell_sizes
        return r

    def _bordered(self, M: sp.spmatrix, col: np.ndarray):
        n = self.ndofs
        row = sp.csr_matrix(self.mean_row()[None, :])
        K = sp.bmat([[M, sp.csr_matrix(col[:, None])], [row, None]], format="csc")
        try:
            return spla.splu(K)
        except RuntimeError as exc:  # singular beyond the constant kernel
            raise LinearSolveError(f"bordered system of size {n + 1} is singular: {exc}") from exc

    def riesz_lu(self):
        with self._lock:
            if self._riesz_lu is None:
                self._riesz_lu = self._bordered(self.A, self.mean_row())
            return self._riesz_lu

    def q_lu(self):
        with self._lock:
            if self._q_lu is None:
                ones0 = np.zeros(self.ndofs)
                ones0[:: self.q + 1] = 1.0
                self._q_lu = self._bordered(self.Bm, ones0)
            return self._q_lu


_CACHE: dict = {}
_CACHE_LOCK = threading.Lock()


def operators_for(mesh: Mesh1D, q: int, penalty: PenaltyConfig | None = None) -> OperatorSet:
    penalty = penalty or PenaltyConfig.default(q)
    key = (mesh.nodes.tobytes(), mesh.boundary_mode, q, penalty.sigma)
    with _CACHE_LOCK:
        ops = _CACHE.get(key)
        if ops is None:
            if len(_CACHE) > 64:
                _CACHE.clear()
            ops = OperatorSet(mesh, q, penalty)
            _CACHE[key] = ops
        return ops


# ---------------------------------------------------------------------------
# Operator actions


def _ops(f: DgFunction, cfg: PenaltyConfig | None = None) -> OperatorSet:
    return operators_for(f.mesh, f.degree, cfg)


def grad_minus(f: DgFunction) -> DgFunction:
    return _ops(f).grad_minus.apply(f)


def grad_plus(f: DgFunction) -> DgFunction:
    return _ops(f).grad_plus.apply(f)


def duality_defect(phi: DgFunction, psi: DgFunction) -> float:
    """int G+[phi] psi + int phi G-[psi]; zero up to round-off."""
    phi._check(psi)
    ops = _ops(phi)
    return float(psi.vector @ (ops.Bp @ phi.vector) + phi.vector @ (ops.Bm @ psi.vector))


def ip_form(w: DgFunction, v: DgFunction, cfg: PenaltyConfig | None = None) -> float:
    w._check(v)
    return float(v.vector @ (_ops(w, cfg).A @ w.vector))


def discrete_laplacian(w: DgFunction, cfg: PenaltyConfig | None = None) -> DgFunction:
    return _ops(w, cfg).laplacian.apply(w)


def _load(mesh: Mesh1D, q: int, g: Callable) -> np.ndarray:
    """Vector b_i = int g phi_i with the assembly rule."""
    rule = assembly_rule(q)
    x = mesh.physical_points(rule.points)
    vals, _ = legendre_table(q, rule.points)
    gx = np.asarray(g(x), dtype=float) * np.ones_like(x)
    return (0.5 * mesh.cell_sizes[:, None] * ((gx * rule.weights) @ vals)).reshape(-1)


def riesz_projection(
    w: Callable,
    d2w: Callable,
    mesh: Mesh1D,
    q: int,
    cfg: PenaltyConfig | None = None,
    dw: Callable | None = None,
) -> DgFunction:
    """Elliptic projection of ``w`` with respect to the interior-penalty form.

    Solves ``a(P[w], Psi) = -int w'' Psi`` for all ``Psi`` together with
    ``int P[w] = int w``. On natural-mode meshes the Neumann boundary flux
    ``[w' Psi]`` is added, which needs ``dw``.
    """
    ops = operators_for(mesh, q, cfg)
    b = -_load(mesh, q, d2w)
    if not mesh.periodic:
        if dw is None:
            raise ValueError("natural-mode Riesz projection needs the first derivative")
        nb = q + 1
        b[(mesh.n_cells - 1) * nb : mesh.n_cells * nb] += float(dw(mesh.right))
        b[:nb] -= float(dw(mesh.left)) * (-1.0) ** np.arange(nb)
    rhs = np.concatenate([b, [integrate(w, mesh, 2 * (q + 1))]])
    sol = ops.riesz_lu().solve(rhs)
    if not np.all(np.isfinite(sol)):
        raise LinearSolveError("Riesz projection produced non-finite coefficients")
    return DgFunction.from_vector(mesh, q, sol[:-1])


def s_projection(w: Callable, mesh: Mesh1D, q: int, side: str) -> DgFunction:
    """Endpoint-interpolating projection onto degree-``q`` fields.

    ``side='+'`` matches ``w`` at the left end of every cell, ``'-'`` at the
    right end; lower modes are the L2 projection coefficients.
    """
    if side not in ("+", "-"):
        raise ValueError("side must be '+' or '-'")
    f = l2_project(w, mesh, q)
    c = f.coeffs
    k = np.arange(q)
    if side == "+":
        target = np.asarray(w(mesh.nodes[:-1]), dtype=float)
        signs = (-1.0) ** k
        # l_q(-1) = (-1)^q is never zero, so the cell system is always solvable
        c[:, q] = (-1.0) ** q * (target - c[:, :q] @ signs)
    else:
        target = np.asarray(w(mesh.nodes[1:]), dtype=float)
        c[:, q] = target - c[:, :q].sum(axis=1)
    return f


def q_projection(
    w: Callable,
    dw: Callable,
    d3w: Callable,
    mesh: Mesh1D,
    q: int,
    cfg: PenaltyConfig | None = None,
) -> DgFunction:
    """Field whose ``G-`` equals the Riesz projection of ``w'``, mean-matched to ``w``."""
    if not mesh.periodic:
        raise ValueError("the gradient-matching projection is defined on periodic meshes")
    ops = operators_for(mesh, q, cfg)
    target = riesz_projection(dw, d3w, mesh, q, cfg)
    if abs(target.mean()) > 1e-10 * max(1.0, np.abs(target.coeffs).max()):
        raise LinearSolveError(f"Riesz projection of w' has nonzero mean {target.mean():.3e}")
    rhs = np.concatenate([ops.mass * target.vector, [integrate(w, mesh, 2 * (q + 1))]])
    sol = ops.q_lu().solve(rhs)
    return DgFunction.from_vector(mesh, q, sol[:-1])


def r_projection(
    u: Callable,
    d2u: Callable,
    W_prime: Callable,
    gamma: float,
    mesh: Mesh1D,
    q: int,
    cfg: PenaltyConfig | None = None,
    du: Callable | None = None,
) -> DgFunction:
    """Projection of ``tau = W'(u) - gamma u''``: ``P[W'(u)] - gamma Lap_h(Riesz[u])``."""
    riesz_u = riesz_projection(u, d2u, mesh, q, cfg, dw=du)
    wp = l2_project(lambda x: W_prime(u(x)), mesh, q)
    return wp - gamma * discrete_laplacian(riesz_u, cfg)


def kernel_rank(op: DgOperator, rtol: float = 1e-10) -> int:
    """Dimension of the numerical null space (singular values below rtol * max)."""
    s = np.linalg.svd(op.dense(), compute_uv=False)
    return int(np.sum(s <= rtol * s[0]))


def null_space(op: DgOperator, rtol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the numerical null space, one column per vector."""
    _, s, vt = np.linalg.svd(op.dense())
    return vt[s <= rtol * s[0]].T
