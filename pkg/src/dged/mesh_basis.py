"""Meshes, Legendre bases, quadrature and broken-polynomial fields in 1D.

A field of degree ``q`` on a mesh with ``N`` cells is stored as an
``(N, q+1)`` array of Legendre coefficients. On cell ``I_n = [x_n, x_{n+1}]``
the field equals ``sum_k c[n, k] * l_k(2 (x - x_n) / h_n - 1)`` with the raw
(non-normalised) Legendre polynomials ``l_k``, so the local mass matrix is
``diag(h_n / (2k + 1))``.

Face indexing: in periodic mode there are ``N`` faces, face ``i`` sits at
``x_i`` and separates cell ``i-1`` (mod ``N``) from cell ``i``. In natural
mode there are ``N + 1`` faces; faces ``0`` and ``N`` are boundary faces
whose outer trace is a ghost value.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

DEFAULT_SEED = 0x5EED_D6ED
MAX_CELL_RATIO = 4.0


class BoundaryMode(enum.Enum):
    PERIODIC = "periodic"
    NATURAL = "natural"


class Ghost(enum.Enum):
    """Outer trace convention at natural-mode boundary faces.

    ``MIRROR`` copies the interior trace (zero jump, used for the strain),
    ``ODD`` negates it (zero average, used for the velocity).
    """

    MIRROR = "mirror"
    ODD = "odd"


# ---------------------------------------------------------------------------
# Legendre polynomials and quadrature


def legendre_eval(k: int, xi):
    """Evaluate the k-th Legendre polynomial by the three-term recurrence."""
    if k < 0:
        raise ValueError(f"Legendre degree must be non-negative, got {k}")
    xi = np.asarray(xi, dtype=float)
    p_prev = np.ones_like(xi)
    if k == 0:
        return p_prev if p_prev.ndim else float(p_prev)
    p = xi.copy()
    for j in range(1, k):
        p_prev, p = p, ((2 * j + 1) * xi * p - j * p_prev) / (j + 1)
    return p if p.ndim else float(p)


def legendre_table(q: int, xi) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of l_0..l_q at points ``xi``.

    Returns two arrays of shape ``(len(xi), q+1)``.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    vals = np.empty((xi.size, q + 1))
    ders = np.empty((xi.size, q + 1))
    vals[:, 0] = 1.0
    ders[:, 0] = 0.0
    if q >= 1:
        vals[:, 1] = xi
        ders[:, 1] = 1.0
    for j in range(1, q):
        vals[:, j + 1] = ((2 * j + 1) * xi * vals[:, j] - j * vals[:, j - 1]) / (j + 1)
        # l'_{j+1} = l'_{j-1} + (2j+1) l_j
        ders[:, j + 1] = ders[:, j - 1] + (2 * j + 1) * vals[:, j]
    return vals, ders


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    exactness_degree: int

    def __post_init__(self):
        if abs(self.weights.sum() - 2.0) > 1e-13:
            raise ValueError("quadrature weights must sum to 2")


@lru_cache(maxsize=None)
def gauss_legendre(npts: int) -> QuadratureRule:
    """Gauss-Legendre rule on [-1, 1] with ``npts`` points (exact to 2n-1)."""
    if npts < 1:
        raise ValueError("need at least one quadrature point")
    x, w = np.polynomial.legendre.leggauss(npts)
    x.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(x, w, 2 * npts - 1)


def assembly_rule(q: int) -> QuadratureRule:
    """2(q+1) points per cell: integrates the quartic nonlinearity exactly."""
    return gauss_legendre(2 * (q + 1))


def error_rule(q: int) -> QuadratureRule:
    return gauss_legendre(2 * (q + 2))


# ---------------------------------------------------------------------------
# Mesh


@dataclass(frozen=True)
class Mesh1D:
    nodes: np.ndarray
    boundary_mode: BoundaryMode = BoundaryMode.PERIODIC
    seed: int | None = None
    max_ratio: float = MAX_CELL_RATIO

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 3:
            raise ValueError("a mesh needs at least two cells")
        h = np.diff(nodes)
        if np.any(h <= 0):
            raise ValueError("mesh nodes must be strictly increasing")
        if h.max() / h.min() > self.max_ratio:
            raise ValueError(
                f"cell size ratio {h.max() / h.min():.3f} exceeds {self.max_ratio}"
            )
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "boundary_mode", BoundaryMode(self.boundary_mode))

    @property
    def left(self) -> float:
        return float(self.nodes[0])

    @property
    def right(self) -> float:
        return float(self.nodes[-1])

    @property
    def length(self) -> float:
        return self.right - self.left

    @property
    def n_cells(self) -> int:
        return self.nodes.size - 1

    @property
    def cell_sizes(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def h(self) -> float:
        return float(self.cell_sizes.max())

    @property
    def periodic(self) -> bool:
        return self.boundary_mode is BoundaryMode.PERIODIC

    @property
    def n_faces(self) -> int:
        return self.n_cells if self.periodic else self.n_cells + 1

    def face_cells(self, i: int) -> tuple[int | None, int | None]:
        """(left cell, right cell) of face ``i``; ``None`` marks a boundary side."""
        N = self.n_cells
        if not 0 <= i < self.n_faces:
            raise IndexError(f"face index {i} out of range [0, {self.n_faces})")
        if self.periodic:
            return (i - 1) % N, i
        return (i - 1 if i > 0 else None), (i if i < N else None)

    def face_size(self, i: int) -> float:
        """Local length 0.5 (h_{i-1} + h_i); a boundary face uses its one cell."""
        hs = self.cell_sizes
        L, R = self.face_cells(i)
        hl = hs[L] if L is not None else hs[R]
        hr = hs[R] if R is not None else hs[L]
        return 0.5 * (hl + hr)

    def physical_points(self, xi) -> np.ndarray:
        """Map reference points to every cell; shape ``(N, len(xi))``."""
        xi = np.atleast_1d(xi)
        x0 = self.nodes[:-1, None]
        return x0 + 0.5 * (xi[None, :] + 1.0) * self.cell_sizes[:, None]

    def locate(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Cell index and reference coordinate of points ``x`` (right-closed last cell)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        n = np.clip(np.searchsorted(self.nodes, x, side="right") - 1, 0, self.n_cells - 1)
        xi = 2.0 * (x - self.nodes[n]) / self.cell_sizes[n] - 1.0
        return n, xi


def build_mesh(
    left: float,
    right: float,
    N: int,
    perturbation: float = 0.0,
    boundary_mode: BoundaryMode | str = BoundaryMode.PERIODIC,
    seed: int = DEFAULT_SEED,
) -> Mesh1D:
    """Uniform mesh of ``[left, right]`` with optionally jittered interior nodes.

    Each interior node moves by at most ``perturbation * h``; the offsets are
    drawn from a PCG64 stream seeded with ``seed`` so meshes are reproducible.
    """
    if N < 2:
        raise ValueError(f"need N >= 2 cells, got {N}")
    if not 0.0 <= perturbation < 0.4:
        raise ValueError(f"perturbation must lie in [0, 0.4), got {perturbation}")
    if not right > left:
        raise ValueError("right must exceed left")
    nodes = np.linspace(left, right, N + 1)
    if perturbation > 0:
        h = (right - left) / N
        rng = np.random.default_rng(seed)
        nodes[1:-1] += perturbation * h * rng.uniform(-1.0, 1.0, N - 1)
    # worst case (1 + 2p) / (1 - 2p) < 9, so widen the ratio cap for jittered meshes
    ratio = max(MAX_CELL_RATIO, (1 + 2 * perturbation) / (1 - 2 * perturbation) + 1e-9)
    return Mesh1D(nodes, BoundaryMode(boundary_mode), seed if perturbation > 0 else None, ratio)


# ---------------------------------------------------------------------------
# Broken polynomial fields


@dataclass
class DgFunction:
    mesh: Mesh1D
    degree: int
    coeffs: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        shape = (self.mesh.n_cells, self.degree + 1)
        if self.coeffs is None:
            self.coeffs = np.zeros(shape)
        else:
            self.coeffs = np.asarray(self.coeffs, dtype=float).reshape(shape)

    @classmethod
    def from_vector(cls, mesh: Mesh1D, degree: int, vec: np.ndarray) -> "DgFunction":
        return cls(mesh, degree, np.array(vec, dtype=float).reshape(mesh.n_cells, degree + 1))

    @classmethod
    def constant(cls, mesh: Mesh1D, degree: int, c: float) -> "DgFunction":
        f = cls(mesh, degree)
        f.coeffs[:, 0] = c
        return f

    @property
    def vector(self) -> np.ndarray:
        return self.coeffs.reshape(-1)

    @property
    def ndofs(self) -> int:
        return self.coeffs.size

    def copy(self) -> "DgFunction":
        return DgFunction(self.mesh, self.degree, self.coeffs.copy())

    def _check(self, other: "DgFunction"):
        if other.mesh is not self.mesh and not np.array_equal(other.mesh.nodes, self.mesh.nodes):
            raise ValueError("fields live on different meshes")
        if other.degree != self.degree:
            raise ValueError("fields have different degrees")

    def __add__(self, other):
        self._check(other)
        return DgFunction(self.mesh, self.degree, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return DgFunction(self.mesh, self.degree, self.coeffs - other.coeffs)

    def __mul__(self, a: float):
        return DgFunction(self.mesh, self.degree, a * self.coeffs)

    __rmul__ = __mul__

    def __neg__(self):
        return DgFunction(self.mesh, self.degree, -self.coeffs)

    def at_reference(self, xi) -> np.ndarray:
        """Values at reference points in every cell, shape ``(N, len(xi))``."""
        vals, _ = legendre_table(self.degree, xi)
        return self.coeffs @ vals.T

    def derivative_at_reference(self, xi) -> np.ndarray:
        _, ders = legendre_table(self.degree, xi)
        return (self.coeffs @ ders.T) * (2.0 / self.mesh.cell_sizes[:, None])

    def __call__(self, x) -> np.ndarray:
        """Point values at physical ``x`` of any shape."""
        x = np.asarray(x, dtype=float)
        n, xi = self.mesh.locate(x.ravel())
        vals, _ = legendre_table(self.degree, xi)
        return np.einsum("pk,pk->p", self.coeffs[n], vals).reshape(x.shape)

    def left_traces(self) -> np.ndarray:
        """f(x_n^+) for every cell n."""
        signs = (-1.0) ** np.arange(self.degree + 1)
        return self.coeffs @ signs

    def right_traces(self) -> np.ndarray:
        """f(x_{n+1}^-) for every cell n."""
        return self.coeffs.sum(axis=1)

    def mean(self) -> float:
        """Integral over the domain (not divided by its length)."""
        return float(self.mesh.cell_sizes @ self.coeffs[:, 0])

    def mass_diagonal(self) -> np.ndarray:
        return mass_diagonal(self.mesh, self.degree)


def mass_diagonal(mesh: Mesh1D, q: int) -> np.ndarray:
    """Diagonal of the global mass matrix in coefficient ordering n*(q+1)+k."""
    return (mesh.cell_sizes[:, None] / (2 * np.arange(q + 1) + 1)[None, :]).reshape(-1)


def l2_project(g: Callable, mesh: Mesh1D, q: int, rule: QuadratureRule | None = None) -> DgFunction:
    """Cell-wise L2 projection: c[n,k] = (2k+1)/h_n * int_{I_n} g l_k^n."""
    rule = rule or assembly_rule(q)
    x = mesh.physical_points(rule.points)
    vals, _ = legendre_table(q, rule.points)
    gx = np.asarray(g(x), dtype=float) * np.ones_like(x)
    # (2k+1)/h * h/2 * sum_j w_j g(x_j) l_k(xi_j)
    coeffs = 0.5 * (gx * rule.weights[None, :]) @ vals
    coeffs *= (2 * np.arange(q + 1) + 1)[None, :]
    return DgFunction(mesh, q, coeffs)


def integrate(g: Callable, mesh: Mesh1D, npts: int = 8) -> float:
    """Composite Gauss integral of ``g`` over the mesh."""
    rule = gauss_legendre(npts)
    x = mesh.physical_points(rule.points)
    gx = np.asarray(g(x), dtype=float) * np.ones_like(x)
    return float(0.5 * mesh.cell_sizes @ (gx @ rule.weights))


# ---------------------------------------------------------------------------
# Traces, jumps and averages


def face_traces(f: DgFunction, ghost: Ghost = Ghost.MIRROR) -> tuple[np.ndarray, np.ndarray]:
    """Arrays (f(x_i^-), f(x_i^+)) over all faces, ghosts filled in natural mode."""
    ghost = Ghost(ghost)
    right = f.right_traces()
    left = f.left_traces()
    if f.mesh.periodic:
        return np.roll(right, 1), left
    sign = 1.0 if ghost is Ghost.MIRROR else -1.0
    minus = np.concatenate([[sign * left[0]], right])
    plus = np.concatenate([left, [sign * right[-1]]])
    return minus, plus


def jumps(f: DgFunction, ghost: Ghost = Ghost.MIRROR) -> np.ndarray:
    minus, plus = face_traces(f, ghost)
    return minus - plus


def averages(f: DgFunction, ghost: Ghost = Ghost.MIRROR) -> np.ndarray:
    minus, plus = face_traces(f, ghost)
    return 0.5 * (minus + plus)


def jump(f: DgFunction, face_index: int, ghost: Ghost = Ghost.MIRROR) -> float:
    f.mesh.face_cells(face_index)  # range check
    return float(jumps(f, ghost)[face_index])


def average(f: DgFunction, face_index: int, ghost: Ghost = Ghost.MIRROR) -> float:
    f.mesh.face_cells(face_index)
    return float(averages(f, ghost)[face_index])


def face_sizes(mesh: Mesh1D) -> np.ndarray:
    return np.array([mesh.face_size(i) for i in range(mesh.n_faces)])


# ---------------------------------------------------------------------------
# Norms


def inner_product(f: DgFunction, g: DgFunction) -> float:
    f._check(g)
    return float(np.sum(f.vector * g.vector * f.mass_diagonal()))


def l2_norm(f: DgFunction) -> float:
    return float(np.sqrt(inner_product(f, f)))


def broken_h1_seminorm_sq(f: DgFunction) -> float:
    """sum_n ||d/dx f||^2_{L2(I_n)} from the closed-form Legendre stiffness."""
    K = reference_stiffness(f.degree)
    per_cell = np.einsum("nk,kl,nl->n", f.coeffs, K, f.coeffs)
    return float(np.sum(2.0 / f.mesh.cell_sizes * per_cell))


def dg_seminorm_sq(f: DgFunction, ghost: Ghost = Ghost.MIRROR) -> float:
    jmp = jumps(f, ghost)
    return broken_h1_seminorm_sq(f) + float(np.sum(jmp**2 / face_sizes(f.mesh)))


def dg_norms(f: DgFunction, ghost: Ghost = Ghost.MIRROR) -> tuple[float, float, float]:
    """(L2 norm, dG seminorm, full dG norm) of ``f``."""
    l2sq = inner_product(f, f)
    semi = dg_seminorm_sq(f, ghost)
    return float(np.sqrt(l2sq)), float(np.sqrt(semi)), float(np.sqrt(l2sq + semi))


@lru_cache(maxsize=None)
def reference_stiffness(q: int) -> np.ndarray:
    """int_{-1}^{1} l_i' l_j' = min(i,j)(min(i,j)+1) when i+j is even."""
    i, j = np.meshgrid(np.arange(q + 1), np.arange(q + 1), indexing="ij")
    m = np.minimum(i, j)
    K = np.where((i + j) % 2 == 0, m * (m + 1), 0).astype(float)
    K.setflags(write=False)
    return K


@lru_cache(maxsize=None)
def reference_derivative(q: int) -> np.ndarray:
    """D[i, j] = int_{-1}^{1} l_j' l_i = 2 when j > i and i + j is odd."""
    i, j = np.meshgrid(np.arange(q + 1), np.arange(q + 1), indexing="ij")
    D = np.where((j > i) & ((i + j) % 2 == 1), 2.0, 0.0)
    D.setflags(write=False)
    return D
