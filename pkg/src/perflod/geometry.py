"""Perforation geometries on the unit square.

A geometry describes a closed solid obstacle set S inside [0, 1]^2; the
porous (fluid) region is its complement.  Every obstacle boundary lies on
dyadic grid lines, so a sufficiently fine structured mesh never straddles
a boundary and element membership can be decided at barycenters.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError


class GeometryKind(str, Enum):
    UNPERFORATED = "unperforated"
    PERIODIC_SQUARES = "periodic_squares"
    DUMBBELL = "dumbbell"
    FILAMENT = "filament"


def _as_fraction(x):
    if isinstance(x, Fraction):
        return x
    return Fraction(x).limit_denominator(1 << 62)


def dyadic_exponent(x, name="value"):
    """Return p for x = 2^-p, or raise if x is not a negative power of two."""
    f = _as_fraction(x)
    if f.numerator != 1 or f.denominator & (f.denominator - 1) or f >= 1:
        raise ConfigurationError(f"{name} must be a negative power of two, got {x}")
    return f.denominator.bit_length() - 1


@dataclass(frozen=True)
class GeometrySpec:
    """Declarative description of a perforation pattern.

    eta is the characteristic obstacle size/spacing, a negative power of
    two.  fixed_period is the period of the square-hole lattice of the
    dumbbell geometry (the dumbbell keeps its lattice fixed while eta
    controls only the neck width).
    """

    kind: GeometryKind
    eta: float | None = None
    fixed_period: float = 1.0 / 16.0

    def __post_init__(self):
        kind = GeometryKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is GeometryKind.UNPERFORATED:
            return
        if self.eta is None:
            raise ConfigurationError(f"{kind.value} geometry requires eta")
        dyadic_exponent(self.eta, "eta")
        if kind is GeometryKind.DUMBBELL:
            dyadic_exponent(self.fixed_period, "fixed_period")


def alignment_step(spec):
    """Largest dyadic h such that every obstacle boundary lies on the h-grid.

    A fine mesh size must divide this step for barycenter membership to be
    unambiguous.  The unperforated domain puts no constraint (step 1).
    """
    if spec.kind is GeometryKind.UNPERFORATED:
        return 1.0
    if spec.kind is GeometryKind.PERIODIC_SQUARES:
        return spec.eta / 4.0
    if spec.kind is GeometryKind.FILAMENT:
        return spec.eta
    # dumbbell: lattice hole boundaries sit on period/4 lines, the neck on
    # eta/2 lines, and the strip sides on 1/8 lines (covered by period/4).
    return min(spec.fixed_period / 4.0, spec.eta / 2.0)


def filament_strip_count(eta):
    """Index of the last strip pair, chosen so the right boundary stays free.

    Strip pair j occupies x in [4*eta*j, 4*eta*j + 3*eta]; pairs whose
    extent would reach x = 1 are dropped.
    """
    n = int(np.floor(1.0 / (4.0 * eta)))
    while n >= 0 and 4.0 * eta * n + 3.0 * eta >= 1.0:
        n -= 1
    return n


def _dumbbell_hole_mask(i, j, eta, period):
    """True for lattice cells whose hole is kept (does not meet the strips)."""
    x_lo = period * (i + 0.25)
    x_hi = period * (i + 0.75)
    y_lo = period * (j + 0.25)
    y_hi = period * (j + 0.75)
    hits_strip_x = (x_hi >= 0.375) & (x_lo <= 0.625)
    hits_strip_y = (y_lo <= (1.0 - eta) / 2.0) | (y_hi >= (1.0 + eta) / 2.0)
    return ~(hits_strip_x & hits_strip_y)


def is_solid(spec, points):
    """Membership test against the closed solid set S.

    points is a single (2,) coordinate or an (N, 2) array inside [0, 1]^2;
    returns a bool or a bool array.  Pure and deterministic.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 2:
        raise ConfigurationError("points must have two coordinates")
    if pts.min() < 0.0 or pts.max() > 1.0:
        raise ConfigurationError("points must lie in the unit square")
    x, y = pts[:, 0], pts[:, 1]

    if spec.kind is GeometryKind.UNPERFORATED:
        out = np.zeros(len(pts), dtype=bool)

    elif spec.kind is GeometryKind.PERIODIC_SQUARES:
        eta = spec.eta
        rx = x / eta - np.floor(x / eta)
        ry = y / eta - np.floor(y / eta)
        out = (rx >= 0.25) & (rx <= 0.75) & (ry >= 0.25) & (ry <= 0.75)

    elif spec.kind is GeometryKind.FILAMENT:
        eta = spec.eta
        n_strips = filament_strip_count(eta)
        block = np.floor(x / (4.0 * eta))
        offs = x - 4.0 * eta * block
        in_range = block <= n_strips
        first = (offs <= eta) & (y <= 1.0 - eta)
        second = (offs >= 2.0 * eta) & (offs <= 3.0 * eta) & (y >= eta)
        out = in_range & (first | second)

    elif spec.kind is GeometryKind.DUMBBELL:
        eta = spec.eta
        period = spec.fixed_period
        in_strip = (
            (x >= 0.375)
            & (x <= 0.625)
            & ((y <= (1.0 - eta) / 2.0) | (y >= (1.0 + eta) / 2.0))
        )
        ci = np.floor(x / period)
        cj = np.floor(y / period)
        rx = x - period * ci
        ry = y - period * cj
        in_hole = (
            (rx >= period / 4.0)
            & (rx <= 3.0 * period / 4.0)
            & (ry >= period / 4.0)
            & (ry <= 3.0 * period / 4.0)
        )
        kept = _dumbbell_hole_mask(ci, cj, eta, period)
        out = in_strip | (in_hole & kept)

    else:  # pragma: no cover - enum is exhaustive
        raise ConfigurationError(f"unsupported geometry kind {spec.kind}")

    return bool(out[0]) if single else out


def solid_area_fraction(spec):
    """Exact area of S within the unit square, computed from the spec."""
    if spec.kind is GeometryKind.UNPERFORATED:
        return 0.0

    if spec.kind is GeometryKind.PERIODIC_SQUARES:
        # each eta-cell loses a centered (eta/2)^2 hole
        return 0.25

    if spec.kind is GeometryKind.FILAMENT:
        eta = _as_fraction(spec.eta)
        n = filament_strip_count(spec.eta)
        if n < 0:
            return 0.0
        # each pair contributes two eta x (1 - eta) strips; pairs are disjoint
        return float((n + 1) * 2 * eta * (1 - eta))

    # dumbbell: strips plus the kept lattice holes, enumerated exactly
    eta = _as_fraction(spec.eta)
    period = _as_fraction(spec.fixed_period)
    strips = Fraction(1, 4) * (1 - eta) / 2 * 2
    cells = int(1 / period)
    hole_area = (period / 2) ** 2
    kept = 0
    for i in range(cells):
        for j in range(cells):
            if _dumbbell_hole_mask(np.array([i]), np.array([j]), float(eta), float(period))[0]:
                kept += 1
    return float(strips + kept * hole_area)
