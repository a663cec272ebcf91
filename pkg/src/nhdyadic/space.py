"""Finite metric measure spaces with upper doubling structure.

A space is a finite set of points with a symmetric distance matrix, one
nonnegative mass per point (the quadrature weight of an underlying
continuous or atomic measure), and a dominating function ``lam(x, r)``
that is nondecreasing and doubling in r and majorizes ball measures.

Balls are strictly open: ``B(x, r) = {y : d(x, y) < r}``.  Because ball
measures of an atomic quadrature jump exactly at realized distances, all
sampled-radius checks use the canonical protocol of drawing radii from the
realized distance set of the center (plus one radius beyond the diameter).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .streams import substream

_LAMBDA_FLOOR = 1e-300


class ViolationFound(Exception):
    """An upper-doubling check failed; carries the witness (x, r, detail)."""

    def __init__(self, message, witness):
        super().__init__(message)
        self.witness = witness


class GridTooLarge(Exception):
    pass


class ParseError(Exception):
    pass


class AsymmetricDistance(Exception):
    pass


class NegativeMass(Exception):
    pass


class PowerLaw:
    """lam(x, r) = coef * r**exponent; doubling constant 2**exponent."""

    def __init__(self, coef: float, exponent: float):
        if coef <= 0 or exponent <= 0:
            raise ValueError("power law needs coef > 0 and exponent > 0")
        self.coef = float(coef)
        self.exponent = float(exponent)
        self.c_lambda = 2.0 ** self.exponent

    def __call__(self, x, r):
        r = np.asarray(r, dtype=float)
        return np.broadcast_to(self.coef * r ** self.exponent, np.broadcast_shapes(np.shape(x), r.shape)).copy()


class EnvelopeLaw:
    """Per-point step envelope fitted from ball measures.

    lam(x, r) = factor * max{ mu(B(x, r')) : r' in grid(x), r' <= r },
    floored at a tiny positive value so the law stays positive.
    """

    def __init__(self, radius_grids, values, c_lambda):
        # radius_grids[i], values[i]: sorted radii and running-max envelope values
        self.radius_grids = radius_grids
        self.values = values
        self.c_lambda = float(c_lambda)

    def __call__(self, x, r):
        xs = np.atleast_1d(np.asarray(x, dtype=int))
        rs = np.atleast_1d(np.asarray(r, dtype=float))
        xs, rs = np.broadcast_arrays(xs, rs)
        out = np.empty(xs.shape, dtype=float)
        flat_x, flat_r, flat_o = xs.ravel(), rs.ravel(), out.ravel()
        for j in range(flat_x.size):
            g = self.radius_grids[flat_x[j]]
            v = self.values[flat_x[j]]
            idx = np.searchsorted(g, flat_r[j], side="right") - 1
            flat_o[j] = v[idx] if idx >= 0 else _LAMBDA_FLOOR
        if np.isscalar(x) and np.isscalar(r):
            return float(out.ravel()[0])
        return out


@dataclass
class MetricMeasureSpace:
    """Finite weighted point set with distance matrix and dominating function."""

    D: np.ndarray                 # (n, n) symmetric distances
    mass: np.ndarray              # (n,) nonnegative weights
    lam: object                   # callable lam(x, r); must be pure
    c_lambda: float               # doubling constant of lam
    beta: float = 1.0             # quasimetric exponent, recorded only
    coords: np.ndarray | None = None
    geometry: str = "abstract"    # euclidean | heisenberg | abstract
    heisenberg_n: int | None = None

    def __post_init__(self):
        self.D = np.ascontiguousarray(self.D, dtype=float)
        self.mass = np.ascontiguousarray(self.mass, dtype=float)
        self.D.setflags(write=False)
        self.mass.setflags(write=False)
        if self.coords is not None:
            self.coords = np.ascontiguousarray(self.coords, dtype=float)
            self.coords.setflags(write=False)

    @property
    def n_points(self) -> int:
        return self.D.shape[0]

    @property
    def dim_d(self) -> float:
        return math.log2(self.c_lambda)

    @property
    def diameter(self) -> float:
        return float(self.D.max())

    def dist(self, i: int, j: int) -> float:
        return float(self.D[i, j])

    def total_mass(self) -> float:
        return float(self.mass.sum())

    def radius_candidates(self, x: int, limit: int = 64) -> np.ndarray:
        """Canonical sampled radii for center x: realized distances, decimated."""
        d = np.unique(self.D[x])
        d = d[d > 0]
        if d.size == 0:
            return np.array([1.0])
        if d.size > limit:
            idx = np.unique(np.linspace(0, d.size - 1, limit).astype(int))
            d = d[idx]
        return np.append(d, 1.5 * d[-1])


def ball_measure(space: MetricMeasureSpace, center: int, r: float) -> float:
    """Mass of the open ball B(center, r)."""
    if r <= 0:
        raise ValueError("ball radius must be positive")
    return float(space.mass[space.D[center] < r].sum())


def ball_members(space: MetricMeasureSpace, center: int, r: float) -> np.ndarray:
    return np.where(space.D[center] < r)[0]


def geometric_doubling_estimate(space: MetricMeasureSpace, trials: int = 2000, seed=0) -> int:
    """Largest observed count of r/2-balls needed to cover a sampled ball.

    Greedy covering: repeatedly center a ball of radius r/2 at the smallest-id
    uncovered point of B(x, r).  Covering balls include their boundary
    (d <= r/2) so that exact-distance ties at sampled radii do not inflate
    the count.  The result is an empirical lower bound for the geometric
    doubling constant N.
    """
    n = space.n_points
    if n == 1:
        return 1
    pairs = []
    exhaustive = []
    for x in range(n):
        for r in space.radius_candidates(x):
            exhaustive.append((x, float(r)))
    if len(exhaustive) <= trials:
        pairs = exhaustive
    else:
        rng = substream(seed, "doubling")
        idx = rng.choice(len(exhaustive), size=trials, replace=False)
        pairs = [exhaustive[i] for i in idx]
    worst = 1
    for x, r in pairs:
        inside = np.where(space.D[x] < r)[0]
        if inside.size == 0:
            continue
        covered = np.zeros(inside.size, dtype=bool)
        count = 0
        while not covered.all():
            c = inside[np.argmax(~covered)]
            covered |= space.D[c][inside] <= r / 2
            count += 1
        worst = max(worst, count)
    return worst


@dataclass
class UpperDoublingReport:
    max_ratio_mu_lambda: float
    max_ratio_doubling: float
    samples_checked: int


def verify_upper_doubling(space: MetricMeasureSpace, samples: int = 2000, seed=0,
                          rtol: float = 1e-12) -> UpperDoublingReport:
    """Check mu(B(x,r)) <= lam(x,r) and lam(x,2r) <= C_lambda*lam(x,r) on samples.

    Radii follow the canonical realized-distance protocol.  Raises
    ViolationFound with the witness (x, r) on the first failure.
    """
    rng = substream(seed, "upper-doubling")
    n = space.n_points
    max_mu, max_dbl = 0.0, 0.0
    checked = 0
    while checked < samples:
        x = int(rng.integers(0, n))
        cand = space.radius_candidates(x)
        r = float(cand[rng.integers(0, cand.size)])
        lam_r = float(space.lam(x, r))
        lam_2r = float(space.lam(x, 2 * r))
        mu = ball_measure(space, x, r)
        if lam_r <= 0:
            raise ViolationFound("dominating function not positive", (x, r, lam_r))
        if lam_2r < lam_r * (1 - rtol):
            raise ViolationFound("dominating function not nondecreasing", (x, r, lam_r, lam_2r))
        ratio_mu = mu / lam_r
        ratio_dbl = lam_2r / lam_r
        if ratio_mu > 1 + rtol:
            raise ViolationFound("mu(B(x,r)) > lam(x,r)", (x, r, ratio_mu))
        if ratio_dbl > space.c_lambda * (1 + rtol):
            raise ViolationFound("lam(x,2r) > C_lambda*lam(x,r)", (x, r, ratio_dbl))
        max_mu = max(max_mu, ratio_mu)
        max_dbl = max(max_dbl, ratio_dbl)
        checked += 1
    return UpperDoublingReport(max_mu, max_dbl, checked)


# ---------------------------------------------------------------------------
# Heisenberg group H^n = C^n x R, identified with R^(2n+1)

def heisenberg_multiply(x, y, n: int):
    """Group law; the t-component picks up twice the symplectic form."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.empty(np.broadcast_shapes(x.shape, y.shape), dtype=float)
    out[..., : 2 * n] = x[..., : 2 * n] + y[..., : 2 * n]
    tw = np.zeros(out.shape[:-1])
    for j in range(n):
        tw = tw + x[..., j] * y[..., j + n] - x[..., j + n] * y[..., j]
    out[..., 2 * n] = x[..., 2 * n] + y[..., 2 * n] - 2.0 * tw
    return out


def heisenberg_inverse(x, n: int):
    return -np.asarray(x, dtype=float)


def heisenberg_norm(x, n: int):
    x = np.asarray(x, dtype=float)
    horiz = (x[..., : 2 * n] ** 2).sum(axis=-1)
    return (horiz ** 2 + x[..., 2 * n] ** 2) ** 0.25


def heisenberg_distance(x, y, n: int):
    return heisenberg_norm(heisenberg_multiply(heisenberg_inverse(x, n), y, n), n)


@dataclass
class HeisenbergGrid:
    """Bounded lattice sample of C^n x R with per-cell Haar weights."""

    shape: tuple
    spacing: float = 1.0
    max_points: int = 4096


def heisenberg_space(n: int, grid: HeisenbergGrid) -> MetricMeasureSpace:
    """Lattice sample of H^n with group-law metric and lam(x,r) = C r^(2n+2).

    The constant C is fitted as the max of mu(B(x,r))/r^(2n+2) over the
    canonical radius protocol, so the upper doubling bound holds with
    equality somewhere; C_lambda = 2^(2n+2) exactly.
    """
    if n < 1:
        raise ValueError("n >= 1 required")
    dim = 2 * n + 1
    if len(grid.shape) != dim:
        raise ValueError(f"grid shape must have {dim} axes")
    count = int(np.prod(grid.shape))
    if count > grid.max_points:
        raise GridTooLarge(f"{count} lattice points exceeds bound {grid.max_points}")
    axes = [grid.spacing * (np.arange(s) - (s - 1) / 2.0) for s in grid.shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=-1)
    D = np.empty((count, count))
    for i in range(count):
        D[i] = heisenberg_distance(coords[i], coords, n)
    D = 0.5 * (D + D.T)  # exact symmetry against float noise
    np.fill_diagonal(D, 0.0)
    mass = np.full(count, grid.spacing ** dim)
    exponent = 2 * n + 2
    space_tmp = MetricMeasureSpace(D, mass, PowerLaw(1.0, exponent), 2.0 ** exponent,
                                   coords=coords, geometry="heisenberg", heisenberg_n=n)
    coef = _fit_power_coef(space_tmp, exponent)
    return MetricMeasureSpace(D, mass, PowerLaw(coef, exponent), 2.0 ** exponent,
                              coords=coords, geometry="heisenberg", heisenberg_n=n)


def _fit_power_coef(space: MetricMeasureSpace, exponent: float) -> float:
    worst = 0.0
    for x in range(space.n_points):
        for r in space.radius_candidates(x):
            worst = max(worst, ball_measure(space, x, r) / r ** exponent)
    return worst if worst > 0 else 1.0


# ---------------------------------------------------------------------------
# Builtin fixtures

def line_space(n: int, length: float = 1.0) -> MetricMeasureSpace:
    """Lebesgue-discretized interval: n cells, midpoint nodes, mass h each.

    lam(x, r) = 2r dominates at the canonical radii because open balls
    undercount interval length at realized distances.
    """
    h = length / n
    xs = (np.arange(n) + 0.5) * h
    D = np.abs(xs[:, None] - xs[None, :])
    mass = np.full(n, h)
    return MetricMeasureSpace(D, mass, PowerLaw(2.0, 1.0), 2.0,
                              coords=xs[:, None], geometry="euclidean")


def grid2d_space(nx: int, ny: int, spacing: float = 1.0) -> MetricMeasureSpace:
    """Uniform planar grid with Lebesgue cell masses and fitted lam = C r^2."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    coords = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    diff = coords[:, None, :] - coords[None, :, :]
    D = np.sqrt((diff ** 2).sum(-1))
    mass = np.full(nx * ny, spacing ** 2)
    tmp = MetricMeasureSpace(D, mass, PowerLaw(1.0, 2.0), 4.0, coords=coords, geometry="euclidean")
    coef = _fit_power_coef(tmp, 2.0)
    return MetricMeasureSpace(D, mass, PowerLaw(coef, 2.0), 4.0, coords=coords, geometry="euclidean")


def point_cloud_space(coords, mass, lam=None, c_lambda=None, envelope_factor=1.0) -> MetricMeasureSpace:
    """Space from explicit coordinates with Euclidean metric.

    Without a user (c_lambda, lam) pair, a conservative envelope is fitted
    from ball measures and C_lambda is the max observed doubling ratio,
    rounded up to the next integer.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    diff = coords[:, None, :] - coords[None, :, :]
    D = np.sqrt((diff ** 2).sum(-1))
    return _space_from_matrix(D, mass, lam, c_lambda, envelope_factor, coords=coords)


def _space_from_matrix(D, mass, lam, c_lambda, envelope_factor, coords=None) -> MetricMeasureSpace:
    mass = np.asarray(mass, dtype=float)
    if (mass < 0).any():
        raise NegativeMass("point masses must be nonnegative")
    if lam is not None:
        if c_lambda is None:
            c_lambda = getattr(lam, "c_lambda", None)
        if c_lambda is None:
            raise ValueError("user-supplied lam needs c_lambda")
        return MetricMeasureSpace(D, mass, lam, float(c_lambda), coords=coords,
                                  geometry="euclidean" if coords is not None else "abstract")
    tmp = MetricMeasureSpace(D, mass, PowerLaw(1.0, 1.0), 2.0, coords=coords)
    grids, values = [], []
    for x in range(tmp.n_points):
        cand = tmp.radius_candidates(x)
        mus = np.array([ball_measure(tmp, x, r) for r in cand])
        env = np.maximum(np.maximum.accumulate(mus) * envelope_factor, _LAMBDA_FLOOR)
        grids.append(cand)
        values.append(env)
    law = EnvelopeLaw(grids, values, 2.0)
    worst = 1.0
    for x in range(tmp.n_points):
        for r in grids[x]:
            worst = max(worst, float(law(x, 2 * r)) / float(law(x, r)))
    law.c_lambda = float(math.ceil(worst))
    return MetricMeasureSpace(D, mass, law, law.c_lambda, coords=coords,
                              geometry="euclidean" if coords is not None else "abstract")


# ---------------------------------------------------------------------------
# Point-cloud files

def load_point_cloud(path, distance_path=None, lambda_path=None, c_lambda=None,
                     envelope_factor=1.0) -> MetricMeasureSpace:
    """Load a space from CSV.

    Formats: header ``id,x1..xk,mass`` (coordinates, Euclidean metric) or
    header ``id,mass`` plus a companion square distance-matrix CSV.  An
    optional lambda table has rows ``point_id,radius,lambda``.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows) < 2:
        raise ParseError(f"{path}: need a header and at least one point")
    header = [h.strip().lower() for h in rows[0]]
    if header[0] != "id" or header[-1] != "mass":
        raise ParseError(f"{path}: header must be id,...,mass")
    try:
        body = [[float(v) for v in r] for r in rows[1:] if r]
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from None
    body.sort(key=lambda r: r[0])
    mass = np.array([r[-1] for r in body])
    if (mass < 0).any():
        raise NegativeMass(f"{path}: negative mass")
    n = len(body)
    if len(header) > 2:  # coordinate form
        coords = np.array([r[1:-1] for r in body])
        if distance_path is not None:
            D = _load_distance_matrix(distance_path, n)
        else:
            diff = coords[:, None, :] - coords[None, :, :]
            D = np.sqrt((diff ** 2).sum(-1))
    else:
        if distance_path is None:
            raise ParseError(f"{path}: id,mass form needs a distance matrix")
        coords = None
        D = _load_distance_matrix(distance_path, n)
    lam = _load_lambda_table(lambda_path, n) if lambda_path else None
    return _space_from_matrix(D, mass, lam, c_lambda, envelope_factor, coords=coords)


def _load_distance_matrix(path, n):
    try:
        M = np.loadtxt(path, delimiter=",", dtype=float)
    except Exception as e:
        raise ParseError(f"{path}: {e}") from None
    if M.shape != (n, n):
        raise ParseError(f"{path}: expected {n}x{n} matrix, got {M.shape}")
    scale = max(1.0, float(np.abs(M).max()))
    if np.abs(M - M.T).max() > 1e-9 * scale:
        raise AsymmetricDistance(f"{path}: matrix asymmetry exceeds tolerance")
    M = 0.5 * (M + M.T)
    np.fill_diagonal(M, 0.0)
    return M


def _load_lambda_table(path, n):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    start = 1 if rows and not _is_number(rows[0][0]) else 0
    table = {}
    for r in rows[start:]:
        if not r:
            continue
        pid, rad, val = int(float(r[0])), float(r[1]), float(r[2])
        table.setdefault(pid, []).append((rad, val))
    grids, values = [], []
    for i in range(n):
        if i not in table:
            raise ParseError(f"{path}: missing lambda rows for point {i}")
        entries = sorted(table[i])
        g = np.array([e[0] for e in entries])
        v = np.maximum.accumulate(np.array([e[1] for e in entries]))
        grids.append(g)
        values.append(np.maximum(v, _LAMBDA_FLOOR))
    law = EnvelopeLaw(grids, values, 2.0)
    worst = 1.0
    for i in range(n):
        for r in grids[i]:
            worst = max(worst, float(law(i, 2 * r)) / float(law(i, r)))
    law.c_lambda = float(math.ceil(worst))
    return law


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# Test functions

@dataclass
class TestFunction:
    """Bounded function b with lower accretivity constant a."""

    values: np.ndarray            # (n,) complex
    accretivity_a: float
    mode: str = "strict"          # strict: Re b >= a pointwise; weak: set averages
    sup_bound: float = field(default=0.0)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=complex)
        self.values.setflags(write=False)
        if self.sup_bound == 0.0:
            self.sup_bound = float(np.abs(self.values).max()) if self.values.size else 0.0
        if self.mode not in ("strict", "weak"):
            raise ValueError("mode must be strict or weak")

    @classmethod
    def constant(cls, space: MetricMeasureSpace, value=1.0):
        vals = np.full(space.n_points, value, dtype=complex)
        return cls(vals, accretivity_a=float(np.real(value)))

    def validate_strict(self, rtol: float = 1e-12):
        if self.mode != "strict":
            raise ValueError("validate_strict applies to strict mode")
        re_min = float(self.values.real.min())
        if re_min < self.accretivity_a * (1 - rtol) - rtol:
            raise ViolationFound("Re b < a somewhere", (int(self.values.real.argmin()), re_min))
        amax = float(np.abs(self.values).max())
        if amax > self.sup_bound * (1 + rtol):
            raise ViolationFound("|b| exceeds sup bound", (int(np.abs(self.values).argmax()), amax))

    def weak_accretivity_on_sets(self, space: MetricMeasureSpace, member_sets) -> float:
        """min over sets of |integral of b| / mu(A); must be >= a for weak mode.

        The set family is whatever the caller supplies (in practice the cubes
        of a dyadic system); zero-mass sets are skipped.
        """
        worst = np.inf
        for members in member_sets:
            mu = float(space.mass[members].sum())
            if mu == 0:
                continue
            integral = abs(complex((self.values[members] * space.mass[members]).sum()))
            worst = min(worst, integral / mu)
        return worst
