"""Grid, sphere, narrow band and obstacle geometry.

Everything here is immutable after construction and safe to share across
the solver, acoustics and snapshot consumers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEGENERATE_TOL = 1e-12


class GeometryError(ValueError):
    """Invalid geometric configuration (degenerate point, empty band, ...)."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform Cartesian grid: ``resolution`` points per axis over a box."""

    resolution: int
    domain_min: np.ndarray = field(default_factory=lambda: np.zeros(3))
    domain_max: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        object.__setattr__(self, "domain_min", np.asarray(self.domain_min, dtype=float))
        object.__setattr__(self, "domain_max", np.asarray(self.domain_max, dtype=float))
        if self.resolution < 3:
            raise GeometryError(f"grid resolution must be >= 3, got {self.resolution}")
        if not np.all(self.domain_max > self.domain_min):
            raise GeometryError("domain_max must exceed domain_min on every axis")
        spacings = (self.domain_max - self.domain_min) / (self.resolution - 1)
        if not np.allclose(spacings, spacings[0], rtol=1e-12, atol=0.0):
            raise GeometryError(f"grid spacing must be uniform across axes, got {spacings}")

    @property
    def h(self) -> float:
        """Grid spacing, identical on all axes."""
        return float((self.domain_max[0] - self.domain_min[0]) / (self.resolution - 1))

    def axis_coords(self) -> np.ndarray:
        return np.linspace(self.domain_min[0], self.domain_max[0], self.resolution)

    def node_positions(self) -> np.ndarray:
        """All grid node positions as an (r**3, 3) array in index order."""
        ax = [np.linspace(self.domain_min[a], self.domain_max[a], self.resolution) for a in range(3)]
        X, Y, Z = np.meshgrid(*ax, indexing="ij")
        return np.stack([X, Y, Z], axis=-1).reshape(-1, 3)


@dataclass(frozen=True)
class SphereSurface:
    radius: float = 0.35
    center: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0:
            raise GeometryError(f"sphere radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class Obstacle:
    """Circular surface obstacle: a geodesic disc with a visualization bump height."""

    center_direction: np.ndarray
    geodesic_radius: float
    height: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.center_direction, dtype=float)
        n = np.linalg.norm(d)
        if n < DEGENERATE_TOL:
            raise GeometryError("obstacle center_direction must be a nonzero vector")
        object.__setattr__(self, "center_direction", d / n)
        if self.height < 0:
            raise GeometryError(f"obstacle height must be >= 0, got {self.height}")

    def validate_radius(self, surface: SphereSurface):
        if not 0.0 < self.geodesic_radius < np.pi * surface.radius:
            raise GeometryError(
                f"obstacle geodesic_radius must lie in (0, pi*R), got {self.geodesic_radius}"
            )


def closest_point(x, surface: SphereSurface):
    """Radial projection of ``x`` (a point or an (n,3) batch) onto the sphere."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x) - surface.center
    dist = np.linalg.norm(pts, axis=1)
    if np.any(dist < DEGENERATE_TOL * surface.radius):
        raise GeometryError("closest_point undefined at the sphere center")
    cp = surface.center + surface.radius * pts / dist[:, None]
    return cp[0] if single else cp


def tangent_project(v, n):
    """Remove the component of ``v`` along the unit normal ``n`` (batched)."""
    v = np.asarray(v, dtype=float)
    n = np.asarray(n, dtype=float)
    if v.ndim == 1:
        return v - np.dot(v, n) * n
    return v - np.sum(v * n, axis=1)[:, None] * n


def geodesic_distance(y, direction, surface: SphereSurface):
    """Great-circle distance from surface point(s) ``y`` to the unit ``direction``."""
    y = np.atleast_2d(np.asarray(y, dtype=float)) - surface.center
    yhat = y / np.linalg.norm(y, axis=1)[:, None]
    cosang = np.clip(yhat @ np.asarray(direction, dtype=float), -1.0, 1.0)
    return surface.radius * np.arccos(cosang)


def obstacle_sdf(obstacle: Obstacle, y, surface: SphereSurface, check_on_surface: bool = True):
    """Signed geodesic distance to the obstacle rim: negative inside, zero on rim.

    ``y`` must lie on the sphere (callers pass closest-point-projected positions).
    """
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    pts = np.atleast_2d(y)
    if check_on_surface:
        off = np.abs(np.linalg.norm(pts - surface.center, axis=1) - surface.radius)
        if np.any(off > 1e-9 * surface.radius):
            raise GeometryError("obstacle_sdf requires on-surface points; project with closest_point first")
    phi = geodesic_distance(pts, obstacle.center_direction, surface) - obstacle.geodesic_radius
    return float(phi[0]) if single else phi


def bump_displacement(vertex, obstacles, surface: SphereSurface):
    """Rendering-only outward displacement from Gaussian obstacle bumps.

    Each obstacle contributes height * exp(-d^2 / (2 sigma^2)) along the outward
    normal, with sigma = geodesic_radius / 2. Never used by the PDE band.
    """
    vertex = np.asarray(vertex, dtype=float)
    single = vertex.ndim == 1
    pts = np.atleast_2d(vertex)
    rel = pts - surface.center
    normals = rel / np.linalg.norm(rel, axis=1)[:, None]
    amount = np.zeros(len(pts))
    for ob in obstacles:
        d = geodesic_distance(pts, ob.center_direction, surface)
        sigma = ob.geodesic_radius / 2.0
        amount += ob.height * np.exp(-(d**2) / (2.0 * sigma**2))
    out = pts + amount[:, None] * normals
    return out[0] if single else out


@dataclass(frozen=True)
class NarrowBand:
    """Grid points within a tube around the sphere, with their closest-point map.

    ``lookup`` maps grid index triples to band ordinals (-1 outside the band);
    it is the linear index map used for sparse operator assembly. ``surface``
    is None for the degenerate full-cube band used by the verification harness,
    in which case the closest-point map is the identity and normals are zero.
    """

    grid: GridSpec
    surface: SphereSurface | None
    half_width: float  # world units
    indices: np.ndarray  # (n, 3) int
    points: np.ndarray  # (n, 3)
    closest_points: np.ndarray  # (n, 3)
    normals: np.ndarray  # (n, 3), unit outward (zero rows for cube bands)
    lookup: np.ndarray  # (r, r, r) int64, band ordinal or -1
    # per-band cache for derived operators (neighbor tables, extension matrix)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def h(self) -> float:
        return self.grid.h

    def _axis_neighbors(self):
        """(plus, minus) ordinal arrays, shape (n, 3), -1 where the neighbor is off-band."""
        r = self.grid.resolution
        n = self.size
        plus = np.full((n, 3), -1, dtype=np.int64)
        minus = np.full((n, 3), -1, dtype=np.int64)
        for a in range(3):
            for sgn, out in ((1, plus), (-1, minus)):
                nb = self.indices.copy()
                nb[:, a] += sgn
                valid = (nb[:, a] >= 0) & (nb[:, a] <= r - 1)
                ords = np.full(n, -1, dtype=np.int64)
                ords[valid] = self.lookup[nb[valid, 0], nb[valid, 1], nb[valid, 2]]
                out[:, a] = ords
        return plus, minus


def _finalize_band(grid, surface, half_width, mask3d):
    idx = np.argwhere(mask3d)
    if len(idx) == 0:
        raise GeometryError("narrow band is empty; sphere and grid are mismatched")
    ax = grid.axis_coords()
    pts = np.stack([ax[idx[:, 0]], ax[idx[:, 1]], ax[idx[:, 2]]], axis=-1)
    if surface is not None:
        cp = closest_point(pts, surface)
        nrm = (cp - surface.center) / surface.radius
    else:
        cp = pts.copy()
        nrm = np.zeros_like(pts)
    lookup = np.full((grid.resolution,) * 3, -1, dtype=np.int64)
    lookup[idx[:, 0], idx[:, 1], idx[:, 2]] = np.arange(len(idx))
    return NarrowBand(
        grid=grid, surface=surface, half_width=half_width,
        indices=idx, points=pts, closest_points=cp, normals=nrm, lookup=lookup,
    )


def build_narrow_band(grid: GridSpec, surface: SphereSurface, half_width_cells: float = 3.0) -> NarrowBand:
    """Collect grid points with | ||x - c|| - R | <= half_width_cells * h.

    The sphere must fit inside the domain with at least the band half-width of
    margin so every band point has full interpolation stencils available.
    """
    if half_width_cells <= 0:
        raise GeometryError("band half-width must be positive")
    h = grid.h
    w = half_width_cells * h
    # The tube may be clipped by the domain box (its edges get the same
    # Neumann closure as tube edges), but the sphere itself must sit inside
    # the domain: interpolation stencils at surface points then always exist
    # in the grid, and lie inside the band whenever w >= sqrt(3) h (enforced
    # where extension actually happens).
    margin_lo = (surface.center - surface.radius) - grid.domain_min
    margin_hi = grid.domain_max - (surface.center + surface.radius)
    if np.any(margin_lo < 0) or np.any(margin_hi < 0):
        raise GeometryError("sphere does not fit inside the grid domain")
    pos = grid.node_positions()
    d = np.linalg.norm(pos - surface.center, axis=1)
    mask = np.abs(d - surface.radius) <= w
    r = grid.resolution
    return _finalize_band(grid, surface, w, mask.reshape(r, r, r))


def build_cube_band(grid: GridSpec) -> NarrowBand:
    """Degenerate band covering every grid node (verification-harness mode)."""
    r = grid.resolution
    mask = np.ones((r, r, r), dtype=bool)
    return _finalize_band(grid, None, np.inf, mask)
