"""Semi-discrete viscosity-capillarity elastodynamics and its time stepping.

The scheme is integrated in the reduced two-field form

    u' = G-[v]
    v' = G+[P(W'(u)) - gamma Lap_h u] + mu G+[G-[v]]

with the Crank-Nicolson rule and a full Newton solve per step; the
auxiliary field ``tau`` is recovered on demand.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh_basis import DgFunction, Mesh1D, assembly_rule, l2_project, legendre_table
from .operators import LinearSolveError, OperatorSet, PenaltyConfig, operators_for

log = logging.getLogger(__name__)

NEWTON_RTOL = 1e-11
NEWTON_MAXITER = 25


class NewtonDivergence(RuntimeError):
    def __init__(self, msg: str, time: float, residuals: list[float]):
        super().__init__(msg)
        self.time = time
        self.residuals = residuals


@dataclass(frozen=True)
class Potential:
    """Stored energy density with its first two derivatives."""

    name: str
    W: Callable
    dW: Callable
    d2W: Callable

    def check_consistency(self, samples=None, rtol: float = 1e-6) -> None:
        xs = np.linspace(-2.0, 2.0, 17) if samples is None else np.asarray(samples)
        eps = 1e-5
        fd = (self.dW(xs + eps) - self.dW(xs - eps)) / (2 * eps)
        scale = np.maximum(1.0, np.abs(self.d2W(xs)))
        if np.any(np.abs(fd - self.d2W(xs)) > rtol * scale):
            raise ValueError(f"W'' of potential {self.name!r} does not match W'")


def double_well() -> Potential:
    return Potential(
        "double_well",
        lambda u: (u**2 - 1.0) ** 2,
        lambda u: 4.0 * u * (u**2 - 1.0),
        lambda u: 12.0 * u**2 - 4.0,
    )


def quadratic_well(c: float = 1.0) -> Potential:
    return Potential("quadratic", lambda u: 0.5 * c * u**2, lambda u: c * u, lambda u: c + 0.0 * u)


def zero_potential() -> Potential:
    return Potential("zero", lambda u: 0.0 * u, lambda u: 0.0 * u, lambda u: 0.0 * u)


@dataclass(frozen=True)
class ModelParams:
    gamma: float = 1e-3
    mu: float = 1e-3
    degree: int = 1
    penalty: PenaltyConfig | None = None
    potential: Potential = field(default_factory=double_well)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.mu >= 0:
            raise ValueError(f"mu must be non-negative, got {self.mu}")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.penalty is None:
            object.__setattr__(self, "penalty", PenaltyConfig.default(self.degree))
        self.potential.check_consistency()


@dataclass
class State:
    time: float
    u: DgFunction
    v: DgFunction

    def __post_init__(self):
        self.u._check(self.v)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.u.vector, self.v.vector])

    @classmethod
    def from_vector(cls, time: float, mesh: Mesh1D, q: int, z: np.ndarray) -> "State":
        n = z.size // 2
        return cls(time, DgFunction.from_vector(mesh, q, z[:n]), DgFunction.from_vector(mesh, q, z[n:]))

    @classmethod
    def project(cls, u0: Callable, v0: Callable, mesh: Mesh1D, q: int, time: float = 0.0) -> "State":
        return cls(time, l2_project(u0, mesh, q), l2_project(v0, mesh, q))


@dataclass
class EnergyLog:
    times: list[float] = field(default_factory=list)
    energy: list[float] = field(default_factory=list)
    dissipation_integral: list[float] = field(default_factory=list)

    def defect(self) -> np.ndarray:
        """E(t) + int_0^t mu ||G- v||^2 - E(0) at every recorded time."""
        e = np.asarray(self.energy)
        return e + np.asarray(self.dissipation_integral) - e[0]


class Discretisation:
    """Vectorised rhs, Jacobian and energy for one mesh and parameter set."""

    def __init__(self, mesh: Mesh1D, p: ModelParams):
        self.mesh = mesh
        self.p = p
        self.q = p.degree
        self.ops: OperatorSet = operators_for(mesh, p.degree, p.penalty)
        rule = assembly_rule(p.degree)
        self.rule = rule
        self.basis, _ = legendre_table(p.degree, rule.points)  # (nq, q+1)
        self.n = self.ops.ndofs
        self.mass = self.ops.mass
        self.scale = 2 * np.arange(self.q + 1) + 1

    @cached_property
    def Gm(self) -> sp.csr_matrix:
        return self.ops.grad_minus.matrix

    @cached_property
    def Gp(self) -> sp.csr_matrix:
        return self.ops.grad_plus.matrix

    @cached_property
    def GpGm(self) -> sp.csr_matrix:
        return (self.Gp @ self.Gm).tocsr()

    @cached_property
    def GpLap(self) -> sp.csr_matrix:
        return (self.Gp @ self.ops.laplacian.matrix).tocsr()

    @cached_property
    def GpMinv(self) -> sp.csr_matrix:
        return (self.Gp @ sp.diags(1.0 / self.mass)).tocsr()

    def _at_quad(self, c: np.ndarray) -> np.ndarray:
        return c.reshape(self.mesh.n_cells, self.q + 1) @ self.basis.T

    def project_nonlinear(self, fn: Callable, u: np.ndarray) -> np.ndarray:
        """Coefficients of P_q[fn(u_h)] with the 2(q+1)-point rule."""
        F = fn(self._at_quad(u))
        return (0.5 * (F * self.rule.weights) @ self.basis * self.scale).reshape(-1)

    def tau(self, u: np.ndarray) -> np.ndarray:
        lap = self.ops.laplacian.matrix @ u
        return self.project_nonlinear(self.p.potential.dW, u) - self.p.gamma * lap

    def rhs(self, z: np.ndarray) -> np.ndarray:
        u, v = z[: self.n], z[self.n :]
        du = self.Gm @ v
        dv = self.Gp @ self.tau(u) + self.p.mu * (self.GpGm @ v)
        return np.concatenate([du, dv])

    def nonlinear_mass(self, u: np.ndarray) -> sp.bsr_matrix:
        """Block-diagonal matrix of int W''(u_h) phi_i phi_j."""
        N, nb = self.mesh.n_cells, self.q + 1
        w2 = self.p.potential.d2W(self._at_quad(u)) * self.rule.weights  # (N, nq)
        blocks = 0.5 * self.mesh.cell_sizes[:, None, None] * np.einsum(
            "nj,jk,jl->nkl", w2, self.basis, self.basis
        )
        return sp.bsr_matrix((blocks, np.arange(N), np.arange(N + 1)), shape=(N * nb, N * nb))

    def jacobian(self, z: np.ndarray) -> sp.csr_matrix:
        u = z[: self.n]
        J21 = self.GpMinv @ self.nonlinear_mass(u) - self.p.gamma * self.GpLap
        return sp.bmat([[None, self.Gm], [J21, self.p.mu * self.GpGm]], format="csr")

    def l2_norm(self, z: np.ndarray) -> float:
        """L2 norm over both fields of a stacked coefficient vector."""
        m = np.concatenate([self.mass, self.mass])
        return float(np.sqrt(np.sum(m * z * z)))

    def energy(self, z: np.ndarray) -> float:
        u, v = z[: self.n], z[self.n :]
        Wq = self.p.potential.W(self._at_quad(u))
        pot = float(0.5 * self.mesh.cell_sizes @ (Wq @ self.rule.weights))
        kin = 0.5 * float(np.sum(self.mass * v * v))
        cap = 0.5 * self.p.gamma * float(u @ (self.ops.A @ u))
        return pot + kin + cap

    def dissipation_rate(self, z: np.ndarray) -> float:
        g = self.Gm @ z[self.n :]
        return self.p.mu * float(np.sum(self.mass * g * g))


_DISC: dict = {}


def discretisation(mesh: Mesh1D, p: ModelParams) -> Discretisation:
    key = (mesh.nodes.tobytes(), mesh.boundary_mode, p)
    d = _DISC.get(key)
    if d is None:
        if len(_DISC) > 32:
            _DISC.clear()
        d = _DISC[key] = Discretisation(mesh, p)
    return d


# ---------------------------------------------------------------------------
# Public operations on States


def rhs(z: State, p: ModelParams) -> tuple[DgFunction, DgFunction]:
    d = discretisation(z.u.mesh, p)
    f = d.rhs(z.vector)
    return (
        DgFunction.from_vector(z.u.mesh, p.degree, f[: d.n]),
        DgFunction.from_vector(z.u.mesh, p.degree, f[d.n :]),
    )


def jacobian(z: State, p: ModelParams) -> sp.csr_matrix:
    """Linearisation of ``rhs`` as a 2x2 block matrix over (u, v) coefficients."""
    return discretisation(z.u.mesh, p).jacobian(z.vector)


def recover_tau(z: State, p: ModelParams) -> DgFunction:
    d = discretisation(z.u.mesh, p)
    return DgFunction.from_vector(z.u.mesh, p.degree, d.tau(z.u.vector))


def discrete_energy(z: State, p: ModelParams) -> float:
    return discretisation(z.u.mesh, p).energy(z.vector)


def reduced_relative_entropy(z: State, z_tilde: State, diss_history: float, p: ModelParams) -> float:
    """Velocity L2 distance, gamma-weighted IP distance of strains, plus history.

    ``diss_history`` is the already accumulated ``mu/4 int_0^t ||G-[v - v~]||^2``.
    """
    z.u._check(z_tilde.u)
    ops = operators_for(z.u.mesh, p.degree, p.penalty)
    du = z.u.vector - z_tilde.u.vector
    dv = z.v.vector - z_tilde.v.vector
    return 0.5 * float(np.sum(ops.mass * dv * dv)) + 0.5 * p.gamma * float(du @ (ops.A @ du)) + diss_history


def modified_entropy(z: State, z_tilde: State, diss_history: float, p: ModelParams) -> float:
    ops = operators_for(z.u.mesh, p.degree, p.penalty)
    du = z.u.vector - z_tilde.u.vector
    return 0.5 * float(np.sum(ops.mass * du * du)) + reduced_relative_entropy(z, z_tilde, diss_history, p)


# ---------------------------------------------------------------------------
# Time stepping


@dataclass
class StepStats:
    iterations: list[int] = field(default_factory=list)

    @property
    def max_iterations(self) -> int:
        return max(self.iterations, default=0)


def _cn_solve(d: Discretisation, z0: np.ndarray, f0: np.ndarray, dt: float, t: float, stats: StepStats | None):
    n2 = z0.size
    ident = sp.identity(n2, format="csr")
    tol = NEWTON_RTOL * (1.0 + d.l2_norm(z0))
    z = z0.copy()
    history = []
    for it in range(NEWTON_MAXITER + 1):
        F = z - z0 - 0.5 * dt * (f0 + d.rhs(z))
        res = d.l2_norm(F)
        history.append(res)
        if res <= tol:
            if stats is not None:
                stats.iterations.append(it)
            return z
        if it == NEWTON_MAXITER:
            break
        K = (ident - 0.5 * dt * d.jacobian(z)).tocsc()
        try:
            delta = spla.splu(K).solve(-F)
        except RuntimeError as exc:
            raise LinearSolveError(f"Newton matrix singular at t={t:.6g}: {exc}") from exc
        if not np.all(np.isfinite(delta)):
            raise LinearSolveError(f"non-finite Newton update at t={t:.6g}")
        z = z + delta
    raise NewtonDivergence(
        f"Newton failed to reach {tol:.3e} in {NEWTON_MAXITER} iterations at t={t:.6g}; "
        f"residuals {', '.join(f'{r:.2e}' for r in history[-5:])}",
        t,
        history,
    )


def step_crank_nicolson(z: State, dt: float, p: ModelParams, stats: StepStats | None = None) -> State:
    if not dt > 0:
        raise ValueError("dt must be positive")
    mesh = z.u.mesh
    d = discretisation(mesh, p)
    z0 = z.vector
    z1 = _cn_solve(d, z0, d.rhs(z0), dt, z.time, stats)
    return State.from_vector(z.time + dt, mesh, p.degree, z1)


def evolve(
    z0: State,
    T: float,
    dt: float,
    p: ModelParams,
    record_every: int | None = 1,
    observer: Callable[[State], None] | None = None,
    stats: StepStats | None = None,
) -> tuple[list[State], EnergyLog]:
    """March from ``z0.time`` to ``T`` with Crank-Nicolson steps.

    The last step is shortened to land on ``T``. ``record_every=None`` keeps
    only the first and last states; ``observer`` sees every state including
    the initial one. The energy log is updated every step.
    """
    if not T > z0.time:
        raise ValueError("final time must exceed the initial time")
    if not 0 < dt <= T - z0.time + 1e-14:
        raise ValueError("need 0 < dt <= T")
    mesh = z0.u.mesh
    d = discretisation(mesh, p)
    nsteps = max(1, math.ceil((T - z0.time) / dt - 1e-9))
    z = z0.vector
    t = z0.time
    f = d.rhs(z)
    elog = EnergyLog([t], [d.energy(z)], [0.0])
    rate = d.dissipation_rate(z)
    traj = [z0]
    if observer is not None:
        observer(z0)
    for step in range(1, nsteps + 1):
        k = min(dt, T - t) if step == nsteps else dt
        z = _cn_solve(d, z, f, k, t, stats)
        t = T if step == nsteps else t + k
        f = d.rhs(z)
        new_rate = d.dissipation_rate(z)
        elog.times.append(t)
        elog.energy.append(d.energy(z))
        elog.dissipation_integral.append(elog.dissipation_integral[-1] + 0.5 * k * (rate + new_rate))
        rate = new_rate
        state = None
        if observer is not None or (record_every and step % record_every == 0) or step == nsteps:
            state = State.from_vector(t, mesh, p.degree, z)
        if observer is not None:
            observer(state)
        if step == nsteps or (record_every and step % record_every == 0):
            traj.append(state)
    return traj, elog
