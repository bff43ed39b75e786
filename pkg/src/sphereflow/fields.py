"""Field storage on the narrow band and the closest-point extension operator.

Scalar fields are flat float arrays in band ordinal order; vector fields are
(n, 3) arrays whose columns share the band. The extension operator replaces
every band value with the trilinear interpolation at the point's closest
surface point, which keeps fields constant along surface normals to O(h^2).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .geometry import NarrowBand, tangent_project


class OutOfBandError(RuntimeError):
    """An interpolation stencil corner is missing from the band."""


def _stencil(band: NarrowBand, x):
    """Base cell and fractional offsets for query points ``x`` (m, 3)."""
    grid = band.grid
    q = (np.atleast_2d(x) - grid.domain_min) / grid.h
    base = np.floor(q).astype(np.int64)
    np.clip(base, 0, grid.resolution - 2, out=base)
    frac = q - base
    return base, frac


def interpolation_weights(band: NarrowBand, x):
    """Gather the 8 corner ordinals and trilinear weights for each query point.

    Returns (ordinals (m, 8), weights (m, 8), ok (m,)) where ok flags rows
    whose corners are all band members wherever they carry weight. Off-band
    corners with negligible weight (queries that sit on a cell face at the
    band edge) are zeroed out instead of failing the row.
    """
    base, frac = _stencil(band, x)
    m = len(base)
    ords = np.empty((m, 8), dtype=np.int64)
    wts = np.empty((m, 8))
    k = 0
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                ords[:, k] = band.lookup[base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz]
                wts[:, k] = wx * wy * wz
                k += 1
    missing = ords < 0
    ok = ~(missing & (wts > 1e-12)).any(axis=1)
    if missing.any():
        wts[missing] = 0.0
        ords[missing] = 0
    return ords, wts, ok


def trilinear_interpolate(band: NarrowBand, values, x):
    """Trilinear blend of band values at query point(s) ``x``.

    Exact for fields linear in x, y, z. Raises OutOfBandError if any needed
    stencil corner is not a band point; callers decide the fallback.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    ords, wts, ok = interpolation_weights(band, x)
    if not ok.all():
        raise OutOfBandError(f"{int((~ok).sum())} interpolation stencil corner(s) outside the band")
    out = np.sum(np.asarray(values)[ords] * wts, axis=1)
    return float(out[0]) if single else out


def extension_matrix(band: NarrowBand) -> sp.csr_matrix:
    """Sparse operator E with (E f)(x) = trilinear(f, CP(x)) for every band point.

    Rows are trilinear stencils at the closest points; constants are preserved
    exactly (rows sum to 1) and the operator is linear by construction.
    """
    ords, wts, ok = interpolation_weights(band, band.closest_points)
    if not ok.all():
        raise OutOfBandError(
            "band too thin: closest-point stencils leave the band; use half-width >= 3 cells"
        )
    n = band.size
    rows = np.repeat(np.arange(n), 8)
    return sp.csr_matrix((wts.ravel(), (rows, ords.ravel())), shape=(n, n))


def _extension(band: NarrowBand) -> sp.csr_matrix:
    mat = band._cache.get("extension")
    if mat is None:
        mat = extension_matrix(band)
        band._cache["extension"] = mat
    return mat


def cp_extend(band: NarrowBand, values):
    """Closest-point extension of a scalar band field.

    Identity on cube bands (no surface to project onto).
    """
    if band.surface is None:
        return np.array(values, dtype=float, copy=True)
    return _extension(band) @ np.asarray(values, dtype=float)


def cp_extend_vector(band: NarrowBand, values):
    """Componentwise closest-point extension followed by tangent projection."""
    v = np.asarray(values, dtype=float)
    if band.surface is None:
        return v.copy()
    ext = _extension(band)
    out = np.column_stack([ext @ v[:, k] for k in range(3)])
    return tangent_project(out, band.normals)
