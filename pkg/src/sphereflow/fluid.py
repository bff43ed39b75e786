"""Inviscid Euler time stepping on the narrow band.

Chorin splitting: semi-Lagrangian advection, localized tangential forcing,
a Neumann pressure Poisson solve (direct factorization for small bands,
conjugate gradients for large ones), gradient correction, and obstacle
boundary conditions. Ambient Cartesian stencils are consistent with the
surface-intrinsic operators because every field is kept constant along
surface normals by closest-point extension.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import cp_extend, cp_extend_vector, interpolation_weights
from .geometry import NarrowBand, Obstacle, tangent_project

log = logging.getLogger(__name__)

_SQRT3 = float(np.sqrt(3.0))


class SolverFailure(RuntimeError):
    """Iterative pressure solve did not converge; carries the final residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class ForcingSpec:
    """Gaussian tangential forcing patch around ``center_direction``."""

    center_direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    angular_width: float = 0.35
    strength: float = 0.0
    direction_mode: str = "swirl"  # "swirl" | "constant"

    def __post_init__(self):
        d = np.asarray(self.center_direction, dtype=float)
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise ValueError("forcing center_direction must be nonzero")
        object.__setattr__(self, "center_direction", d / n)
        if self.strength < 0:
            raise ValueError("forcing strength must be >= 0")
        if not 0.0 < self.angular_width < np.pi:
            raise ValueError("forcing angular_width must lie in (0, pi)")
        if self.direction_mode not in ("swirl", "constant"):
            raise ValueError(f"unknown direction_mode {self.direction_mode!r}")


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-3
    rho0: float = 1.2
    forcing: ForcingSpec = field(default_factory=ForcingSpec)
    direct_solver_threshold: int = 8000
    cg_tolerance: float = 1e-8
    cg_max_iterations: int = 2000

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.rho0 <= 0:
            raise ValueError("rho0 must be positive")
        if not 0.0 < self.cg_tolerance < 1.0:
            raise ValueError("cg_tolerance must lie in (0, 1)")
        if self.direct_solver_threshold < 0:
            raise ValueError("direct_solver_threshold must be >= 0")


@dataclass
class StepDiagnostics:
    div_l2: float = 0.0
    div_max: float = 0.0
    solver_iterations: int = 0
    solver_residual: float = 0.0
    max_backtrack_cells: float = 0.0


@dataclass
class FlowState:
    """Velocity, pressure and passive density on one band, plus the obstacles."""

    u: np.ndarray  # (n, 3)
    p: np.ndarray  # (n,)
    rho: np.ndarray  # (n,)
    obstacles: tuple[Obstacle, ...] = ()
    time: float = 0.0
    step_count: int = 0
    diagnostics: StepDiagnostics = field(default_factory=StepDiagnostics)

    @classmethod
    def zeros(cls, band: NarrowBand, obstacles=()):
        n = band.size
        return cls(u=np.zeros((n, 3)), p=np.zeros(n), rho=np.zeros(n), obstacles=tuple(obstacles))


def band_neighbors(band: NarrowBand):
    """(plus, minus, interior): axis neighbor ordinals and the all-neighbors mask."""
    entry = band._cache.get("neighbors")
    if entry is None:
        plus, minus = band._axis_neighbors()
        interior = ((plus >= 0) & (minus >= 0)).all(axis=1)
        entry = (plus, minus, interior)
        band._cache["neighbors"] = entry
    return entry


def gradient(band: NarrowBand, values):
    """Ambient gradient: central differences, one-sided at band edges."""
    f = np.asarray(values, dtype=float)
    plus, minus, _ = band_neighbors(band)
    h = band.h
    own = np.arange(band.size)
    g = np.zeros((band.size, 3))
    for a in range(3):
        p, m = plus[:, a], minus[:, a]
        both = (p >= 0) & (m >= 0)
        only_p = (p >= 0) & ~both
        only_m = (m >= 0) & ~both
        g[both, a] = (f[p[both]] - f[m[both]]) / (2.0 * h)
        g[only_p, a] = (f[p[only_p]] - f[own[only_p]]) / h
        g[only_m, a] = (f[own[only_m]] - f[m[only_m]]) / h
    return g


def divergence(band: NarrowBand, u):
    """Ambient divergence with the same stencil choices as ``gradient``."""
    u = np.asarray(u, dtype=float)
    return sum(gradient(band, u[:, a])[:, a] for a in range(3))


@dataclass
class PoissonOperator:
    """7-point Neumann Laplacian over band ordinals, with solver caches."""

    matrix: sp.csr_matrix
    h: float
    build_stamp: int
    _factor: object = None  # cached grounded factorization
    _factor_failed: bool = False
    _warm: np.ndarray | None = None
    last_solve_info: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


_BUILD_COUNTER = [0]


def assemble_laplacian(band: NarrowBand) -> PoissonOperator:
    """Standard 7-point Laplacian; missing-neighbor fluxes are dropped so each
    row sums to zero (homogeneous Neumann mirror at band edges)."""
    plus, minus, _ = band_neighbors(band)
    n = band.size
    inv_h2 = 1.0 / band.h**2
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    own = np.arange(n)
    for a in range(3):
        for nb in (plus[:, a], minus[:, a]):
            has = nb >= 0
            rows.append(own[has])
            cols.append(nb[has])
            vals.append(np.full(int(has.sum()), inv_h2))
            diag[has] -= inv_h2
    rows.append(own)
    cols.append(own)
    vals.append(diag)
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    _BUILD_COUNTER[0] += 1
    return PoissonOperator(matrix=mat, h=band.h, build_stamp=_BUILD_COUNTER[0])


def _grounded_factorization(op: PoissonOperator):
    """Factor the negated operator with unknown 0 pinned (grounds the constant
    nullspace; exact for compatible right-hand sides on a connected band)."""
    if op._factor is None and not op._factor_failed:
        m = (-op.matrix).tolil()
        m[0, :] = 0.0
        m[:, 0] = 0.0
        m[0, 0] = 1.0
        op._factor = spla.splu(m.tocsc())
    return op._factor


def solve_pressure(op: PoissonOperator, rhs, config: SolverConfig):
    """Solve A p = rhs - mean(rhs) with the zero-mean gauge.

    Direct (precomputed factorization) when the band is at most
    ``direct_solver_threshold`` points, conjugate gradients above that; a
    failed factorization falls through to the iterative path with a warning.
    """
    rhs = np.asarray(rhs, dtype=float)
    if not np.all(np.isfinite(rhs)):
        raise ValueError("pressure right-hand side contains non-finite values")
    b = rhs - rhs.mean()
    scale = np.max(np.abs(rhs)) if rhs.size else 0.0
    if np.max(np.abs(b), initial=0.0) <= 1e-14 * max(1.0, scale):
        op.last_solve_info = {"method": "trivial", "iterations": 0, "residual": 0.0}
        return np.zeros_like(b)

    if op.size <= config.direct_solver_threshold:
        try:
            factor = _grounded_factorization(op)
        except RuntimeError as exc:
            op._factor_failed = True
            factor = None
            log.warning("pressure factorization failed (%s); using conjugate gradients", exc)
        if factor is not None:
            bg = -b.copy()
            bg[0] = 0.0
            p = factor.solve(bg)
            p -= p.mean()
            resid = float(np.linalg.norm(op.matrix @ p - b) / np.linalg.norm(b))
            op.last_solve_info = {"method": "direct", "iterations": 0, "residual": resid}
            return p

    # CG on the negated (positive semidefinite) operator, deflating the
    # constant nullspace so roundoff cannot drift the iterates along it.
    n = op.size
    neg = -op.matrix

    def matvec(v):
        w = neg @ v
        return w - w.mean()

    lin = spla.LinearOperator((n, n), matvec=matvec, dtype=float)
    x0 = op._warm if op._warm is not None and op._warm.shape == b.shape else None
    iters = [0]

    def count(_):
        iters[0] += 1

    p, info = spla.cg(
        lin, -b, x0=x0, rtol=config.cg_tolerance, atol=0.0,
        maxiter=config.cg_max_iterations, callback=count,
    )
    p = p - p.mean()
    resid = float(np.linalg.norm(op.matrix @ p - b) / np.linalg.norm(b))
    if info != 0 or not np.isfinite(resid):
        raise SolverFailure(
            f"pressure solve did not converge in {config.cg_max_iterations} iterations "
            f"(relative residual {resid:.3e})",
            residual=resid,
        )
    op._warm = p.copy()
    op.last_solve_info = {"method": "cg", "iterations": iters[0], "residual": resid}
    return p


def _departure_points(band: NarrowBand, velocity, dt):
    dep = band.points - dt * np.asarray(velocity, dtype=float)
    if band.surface is None:
        return np.clip(dep, band.grid.domain_min, band.grid.domain_max)
    return dep


def _clamp_into_tube(band: NarrowBand, pts, rows):
    """Re-project stray departure points: toward the surface, inside the tube."""
    surface = band.surface
    rel = pts[rows] - surface.center
    dist = np.linalg.norm(rel, axis=1)
    degenerate = dist < 1e-12 * surface.radius
    dirs = np.where(degenerate[:, None], band.normals[rows], rel / np.maximum(dist, 1e-300)[:, None])
    safe = max(band.half_width - _SQRT3 * band.h, 0.0)
    clamped = np.clip(dist, surface.radius - safe, surface.radius + safe)
    clamped[degenerate] = surface.radius
    pts[rows] = surface.center + dirs * clamped[:, None]
    return pts


def advect(band: NarrowBand, velocity, values, dt):
    """Semi-Lagrangian transport: sample ``values`` at x - dt*velocity(x).

    Backtracked points that leave the band are re-projected toward the sphere
    and clamped into the tube, so the operation is total. The result is
    closest-point extended before return (identity on cube bands).
    """
    if dt <= 0:
        raise ValueError("advect requires dt > 0")
    values = np.asarray(values, dtype=float)
    dep = _departure_points(band, velocity, dt)
    ords, wts, ok = interpolation_weights(band, dep)
    if not ok.all():
        rows = np.flatnonzero(~ok)
        dep = _clamp_into_tube(band, dep, rows)
        o2, w2, ok2 = interpolation_weights(band, dep[rows])
        still = ~ok2
        if still.any():
            # last resort: the surface itself always has full stencils
            dep[rows[still]] = band.closest_points[rows[still]]
            o3, w3, ok3 = interpolation_weights(band, dep[rows[still]])
            if not ok3.all():
                raise RuntimeError("band too thin for semi-Lagrangian clamping")
            o2[still], w2[still] = o3, w3
        ords[rows], wts[rows] = o2, w2

    if values.ndim == 1:
        out = np.sum(values[ords] * wts, axis=1)
        return cp_extend(band, out)
    out = np.column_stack([np.sum(values[:, k][ords] * wts, axis=1) for k in range(values.shape[1])])
    return cp_extend_vector(band, out)


def _constant_mode_reference(center_direction):
    """Deterministic ambient axis orthogonalized against the forcing center."""
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(center_direction)))] = 1.0
    ref = axis - np.dot(axis, center_direction) * center_direction
    return ref / np.linalg.norm(ref)


def apply_forcing(band: NarrowBand, u, forcing: ForcingSpec, dt):
    """Add dt * f where f is a Gaussian-in-angle tangential acceleration patch.

    Swirl mode circulates around the patch center (zero at the removable
    singularity where the normal is parallel to the center direction).
    """
    if forcing.strength == 0.0:
        return np.array(u, dtype=float, copy=True)
    c = forcing.center_direction
    normals = band.normals
    cosang = np.clip(normals @ c, -1.0, 1.0)
    theta = np.arccos(cosang)
    mag = forcing.strength * np.exp(-(theta**2) / (2.0 * forcing.angular_width**2))
    if forcing.direction_mode == "swirl":
        t = np.cross(normals, c)
    else:
        t = tangent_project(np.broadcast_to(_constant_mode_reference(c), normals.shape), normals)
    norms = np.linalg.norm(t, axis=1)
    good = norms > 1e-12
    that = np.zeros_like(t)
    that[good] = t[good] / norms[good, None]
    return np.asarray(u, dtype=float) + dt * mag[:, None] * that


def obstacle_masks(band: NarrowBand, obstacles):
    """(interior, collar_dirs): no-slip mask and per-obstacle rim projections.

    collar_dirs is a list of (mask, m) pairs where m is the geodesic-outward
    unit direction from the obstacle center, tangent to the sphere.
    """
    n = band.size
    interior = np.zeros(n, dtype=bool)
    collars = []
    if band.surface is None or not obstacles:
        return interior, collars
    surface = band.surface
    h = band.h
    normals = band.normals
    for ob in obstacles:
        c = ob.center_direction
        cosang = np.clip(normals @ c, -1.0, 1.0)
        phi = surface.radius * np.arccos(cosang) - ob.geodesic_radius
        interior |= phi < 0.0
        rim = (phi >= 0.0) & (phi < h)
        if rim.any():
            t = c - cosang[:, None] * normals  # tangential direction toward the center
            tn = np.linalg.norm(t, axis=1)
            ok = rim & (tn > 1e-12)
            m = np.zeros_like(t)
            m[ok] = -t[ok] / tn[ok, None]
            collars.append((ok, m))
    return interior, collars


def enforce_obstacle_bc(band: NarrowBand, u, obstacles):
    """No-slip inside obstacles; block geodesic inflow in the one-cell rim collar."""
    u = np.array(u, dtype=float, copy=True)
    interior, collars = obstacle_masks(band, obstacles)
    for mask, m in collars:
        toward = np.minimum(np.sum(u * m, axis=1), 0.0)
        u[mask] -= (toward[:, None] * m)[mask]
    u[interior] = 0.0
    return u


def project(band: NarrowBand, u_star, op: PoissonOperator, config: SolverConfig,
            obstacles=(), timings=None):
    """Pressure projection: returns (u, p) with the band divergence reduced.

    rhs = (rho0/dt) div(u*), p solves the Neumann Poisson system with the
    zero-mean gauge, and u = u* - (dt/rho0) grad(p), re-extended and with
    obstacle conditions re-applied.
    """
    phase = _PhaseTimer(timings)
    u_star = np.asarray(u_star, dtype=float)
    with phase("divergence"):
        rhs = (config.rho0 / config.dt) * divergence(band, u_star)
    with phase("pressure_solve"):
        p = solve_pressure(op, rhs, config)
    with phase("correct"):
        u = u_star - (config.dt / config.rho0) * gradient(band, p)
    with phase("extend"):
        u = cp_extend_vector(band, u)
    u = enforce_obstacle_bc(band, u, obstacles)
    return u, p


def scalar_transport(band: NarrowBand, rho, velocity, source, dt):
    """Advect the passive scalar and integrate the source, then re-extend."""
    out = advect(band, velocity, rho, dt)
    if source is not None:
        out = out + dt * np.asarray(source, dtype=float)
    return cp_extend(band, out)


class _PhaseTimer:
    """Accumulates wall time per named pipeline phase into a shared dict."""

    def __init__(self, buckets):
        self.buckets = buckets
        self._t0 = 0.0
        self._name = None

    def __call__(self, name):
        self._name = name
        return self

    def __enter__(self):
        if self.buckets is not None:
            import time
            self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        if self.buckets is not None:
            import time
            self.buckets[self._name] = self.buckets.get(self._name, 0.0) + (
                time.perf_counter() - self._t0)
        return False


def step(state: FlowState, config: SolverConfig, band: NarrowBand, op: PoissonOperator,
         quadrature=None, force_sink=None, timings=None) -> FlowState:
    """One full solver step; deterministic and total.

    Solver failures propagate without touching ``state``. The final obstacle
    enforcement runs after the last extension so interior velocities are
    exactly zero in the returned state. ``timings`` (optional dict) collects
    per-phase wall time for the bench report.
    """
    dt = config.dt
    phase = _PhaseTimer(timings)
    with phase("extend"):
        u = cp_extend_vector(band, state.u)
    max_backtrack = float(np.max(np.linalg.norm(u, axis=1), initial=0.0)) * dt / band.h
    with phase("advect"):
        u = advect(band, u, u, dt)
    with phase("forcing"):
        u = apply_forcing(band, u, config.forcing, dt)
        u = enforce_obstacle_bc(band, u, state.obstacles)
    u, p = project(band, u, op, config, state.obstacles, timings=timings)
    with phase("extend"):
        u = cp_extend_vector(band, u)
    u = enforce_obstacle_bc(band, u, state.obstacles)
    with phase("transport"):
        rho = scalar_transport(band, state.rho, u, None, dt)

    _, _, interior = band_neighbors(band)
    div = divergence(band, u)[interior]
    diag = StepDiagnostics(
        div_l2=float(np.sqrt(np.mean(div**2))) if div.size else 0.0,
        div_max=float(np.max(np.abs(div), initial=0.0)),
        solver_iterations=int(op.last_solve_info.get("iterations", 0)),
        solver_residual=float(op.last_solve_info.get("residual", 0.0)),
        max_backtrack_cells=max_backtrack,
    )
    new_state = replace(
        state, u=u, p=p, rho=rho, time=state.time + dt,
        step_count=state.step_count + 1, diagnostics=diag,
    )
    if force_sink is not None and quadrature is not None:
        with phase("force_quadrature"):
            force_sink(quadrature.force_sample(band, p, new_state.time))
    return new_state
