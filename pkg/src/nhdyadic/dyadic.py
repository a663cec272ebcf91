"""Nested separated nets and half-open dyadic cube systems.

Reference nets are greedy maximal delta^k-separated subsets, built coarse to
fine with each finer net extending the coarser one, so net points persist
across generations.  Cube membership is built finest-first: every point
joins the nearest finest center, and each finer center joins the nearest
coarser center, so a cube of generation k is a function of the centers of
generations >= k only.  Ties always break to the smallest point id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .space import MetricMeasureSpace, ball_measure

DEFAULT_C0 = 10.0     # diameter bound: diam(Q) < C0 * side
DEFAULT_C1 = 0.01     # inner ball: B(center, C1 * side) subset of Q


class BadScaleRange(Exception):
    pass


class SeparationViolated(Exception):
    pass


class CoveringViolated(Exception):
    pass


class CubeInvariantViolated(Exception):
    pass


@dataclass
class NetHierarchy:
    """Per-generation maximal separated nets with parent links."""

    space: MetricMeasureSpace
    delta: float
    k_min: int
    k_max: int
    centers: dict                 # gen k -> sorted array of point ids
    parent: dict                  # gen k -> index into centers[k-1], for k > k_min

    @property
    def generations(self):
        return range(self.k_min, self.k_max + 1)

    def side(self, k: int) -> float:
        return self.delta ** k

    def children_of(self, k: int, alpha: int) -> np.ndarray:
        """Indices of generation k+1 net points whose parent is (k, alpha)."""
        return np.where(self.parent[k + 1] == alpha)[0]

    def verify(self):
        D = self.space.D
        for k in self.generations:
            c = self.centers[k]
            sep = self.side(k)
            if c.size > 1:
                sub = D[np.ix_(c, c)].copy()
                np.fill_diagonal(sub, np.inf)
                if sub.min() < sep:
                    raise SeparationViolated(f"net generation {k}")
            if (D[:, c].min(axis=1) >= sep).any():
                raise CoveringViolated(f"net generation {k}")
            if k > self.k_min:
                pk = self.parent[k]
                prev = self.centers[k - 1]
                d_link = D[c, prev[pk]]
                if (d_link >= self.side(k - 1)).any():
                    raise CoveringViolated(f"net parent link at generation {k}")


def build_nets(space: MetricMeasureSpace, delta: float, k_min: int, k_max: int) -> NetHierarchy:
    """Greedy maximal separated nets, coarse to fine, nested.

    Candidate points are scanned in id order; a point joins the net when it
    is at distance >= delta^k from every point already in.  Maximality gives
    the covering property min_a d(x, z^k_a) < delta^k for free.
    """
    if k_min > k_max:
        raise BadScaleRange(f"k_min={k_min} > k_max={k_max}")
    if not (0 < delta <= 0.5):
        raise ValueError("delta must lie in (0, 1/2]")
    if space.n_points == 0:
        raise ValueError("space is empty")
    D = space.D
    n = space.n_points
    centers = {}
    parent = {}
    prev: list = []
    for k in range(k_min, k_max + 1):
        sep = delta ** k
        chosen = list(prev)
        if chosen:
            mind = D[:, chosen].min(axis=1)
        else:
            mind = np.full(n, np.inf)
        for p in range(n):
            if mind[p] >= sep:
                chosen.append(p)
                mind = np.minimum(mind, D[:, p])
        centers[k] = np.array(sorted(chosen), dtype=int)
        if k > k_min:
            # nearest coarser center, ties to smallest id (argmin on sorted ids)
            parent[k] = np.argmin(D[np.ix_(centers[k], centers[k - 1])], axis=1)
        prev = centers[k]
    nets = NetHierarchy(space, delta, k_min, k_max, centers, parent)
    nets.verify()
    return nets


@dataclass
class Cube:
    """View of one half-open dyadic cube."""

    system: "DyadicSystem"
    k: int
    alpha: int

    @property
    def center(self) -> int:
        return int(self.system.centers[self.k][self.alpha])

    @property
    def side(self) -> float:
        return self.system.delta ** self.k

    @property
    def members(self) -> np.ndarray:
        return np.where(self.system.cube_of[self.k] == self.alpha)[0]

    @property
    def measure(self) -> float:
        return float(self.system.space.mass[self.members].sum())

    def children(self) -> list:
        if self.k == self.system.k_max:
            return []
        idx = np.where(self.system.center_parent[self.k + 1] == self.alpha)[0]
        return [Cube(self.system, self.k + 1, int(b)) for b in idx]

    def parent_index(self) -> int | None:
        if self.k == self.system.k_min:
            return None
        return int(self.system.center_parent[self.k][self.alpha])

    def __repr__(self):
        return f"Cube(k={self.k}, alpha={self.alpha}, center={self.center})"


@dataclass
class DyadicSystem:
    """Nested half-open cube partition across generations k_min..k_max."""

    space: MetricMeasureSpace
    delta: float
    k_min: int
    k_max: int
    centers: dict                 # gen -> array of point ids
    center_parent: dict           # gen -> index into centers[gen-1]
    cube_of: dict                 # gen -> per-point cube index
    c0: float = DEFAULT_C0
    c1: float = DEFAULT_C1

    @property
    def generations(self):
        return range(self.k_min, self.k_max + 1)

    def side(self, k: int) -> float:
        return self.delta ** k

    def n_cubes(self, k: int) -> int:
        return len(self.centers[k])

    def cube(self, k: int, alpha: int) -> Cube:
        return Cube(self, k, alpha)

    def cubes(self, k: int) -> list:
        return [Cube(self, k, a) for a in range(self.n_cubes(k))]

    def all_cubes(self) -> list:
        return [c for k in self.generations for c in self.cubes(k)]

    def members(self, k: int, alpha: int) -> np.ndarray:
        return np.where(self.cube_of[k] == alpha)[0]

    def measure(self, k: int, alpha: int) -> float:
        return float(self.space.mass[self.members(k, alpha)].sum())

    def ancestor_index(self, k: int, alpha: int, k_coarse: int) -> int:
        """Index of the generation-k_coarse cube containing cube (k, alpha)."""
        a = alpha
        for j in range(k, k_coarse, -1):
            a = int(self.center_parent[j][a])
        return a

    def verify(self):
        """Partition, nesting, union-of-children, diameter and inner ball."""
        D = self.space.D
        n = self.space.n_points
        for k in self.generations:
            cu = self.cube_of[k]
            if cu.min() < 0 or cu.max() >= self.n_cubes(k):
                raise CubeInvariantViolated(f"partition broken at generation {k}")
            side = self.side(k)
            for a in range(self.n_cubes(k)):
                mem = np.where(cu == a)[0]
                if mem.size == 0:
                    continue
                sub = D[np.ix_(mem, mem)]
                if not sub.max() < self.c0 * side:
                    raise CubeInvariantViolated(
                        f"diameter {sub.max():.4g} >= C0*side at (k={k}, a={a})")
                inner = np.where(D[self.centers[k][a]] < self.c1 * side)[0]
                if not np.isin(inner, mem).all():
                    raise CubeInvariantViolated(f"inner ball escapes cube (k={k}, a={a})")
            if k > self.k_min:
                # nesting: coarser membership is the parent link of finer membership
                lifted = self.center_parent[k][cu]
                if not np.array_equal(lifted, self.cube_of[k - 1]):
                    raise CubeInvariantViolated(f"nesting broken between {k-1} and {k}")
        # union-of-children holds by the lifted-membership identity above;
        # partition: every point has exactly one cube per generation by array shape
        if any(self.cube_of[k].shape != (n,) for k in self.generations):
            raise CubeInvariantViolated("membership arrays malformed")

    def to_json(self) -> str:
        payload = {
            "delta": self.delta,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "generations": [
                {
                    "k": k,
                    "side": self.side(k),
                    "centers": self.centers[k].tolist(),
                    "parent": self.center_parent[k].tolist() if k > self.k_min else None,
                    "members": [self.members(k, a).tolist() for a in range(self.n_cubes(k))],
                }
                for k in self.generations
            ],
        }
        return json.dumps(payload, sort_keys=True)


def validate_new_centers(space: MetricMeasureSpace, centers: dict, delta: float,
                         k_min: int, k_max: int):
    """Randomized-center preconditions: separation delta^k/8, covering 4 delta^k."""
    D = space.D
    for k in range(k_min, k_max + 1):
        c = np.asarray(centers[k])
        side = delta ** k
        if c.size > 1:
            sub = D[np.ix_(c, c)].copy()
            np.fill_diagonal(sub, np.inf)
            if sub.min() < side / 8:
                raise SeparationViolated(f"new centers at generation {k}: {sub.min():.4g} < side/8")
        if (D[:, c].min(axis=1) >= 4 * side).any():
            raise CoveringViolated(f"new centers at generation {k}")


def build_cubes(nets: NetHierarchy, new_centers: dict | None = None,
                c0: float = DEFAULT_C0, c1: float = DEFAULT_C1) -> DyadicSystem:
    """Half-open dyadic cubes from net (or randomized) centers.

    Membership is transitive and finest-first: points attach to the nearest
    finest center, finer centers attach to the nearest coarser center, and a
    coarser cube is exactly the union of its children.
    """
    space = nets.space
    D = space.D
    if new_centers is not None:
        centers = {k: np.asarray(new_centers[k], dtype=int) for k in nets.generations}
        validate_new_centers(space, centers, nets.delta, nets.k_min, nets.k_max)
    else:
        centers = {k: nets.centers[k].copy() for k in nets.generations}
    cube_of = {}
    center_parent = {}
    k_max, k_min = nets.k_max, nets.k_min
    cube_of[k_max] = np.argmin(D[:, centers[k_max]], axis=1)
    for k in range(k_max - 1, k_min - 1, -1):
        link = np.argmin(D[np.ix_(centers[k + 1], centers[k])], axis=1)
        center_parent[k + 1] = link
        cube_of[k] = link[cube_of[k + 1]]
    return DyadicSystem(space, nets.delta, k_min, k_max, centers, center_parent, cube_of,
                        c0=c0, c1=c1)


# ---------------------------------------------------------------------------
# Regularized radius

class EmptyOuterBall(Exception):
    pass


@dataclass
class RegularizedBall:
    center: int
    r_B: float
    R_B: float
    annulus_constant: float
    s_grid: np.ndarray = field(repr=False, default=None)


def regularized_radius(space: MetricMeasureSpace, c_B: int, r_B: float,
                       s_grid=None, candidates: int = 64) -> RegularizedBall:
    """Radius R_B in [r_B, 1.2 r_B] minimizing the thin-annulus constant.

    For each candidate R the constant is the sup over s > 0 in the grid of
    mu({R - r_B*s < d(x, c_B) < R + r_B*s}) / (s * mu(B(c_B, 3 r_B)));
    the s = 0 term is skipped (0/0).  Existence is an averaging argument;
    the scan realizes it constructively.
    """
    if r_B <= 0:
        raise ValueError("r_B must be positive")
    outer = ball_measure(space, c_B, 3 * r_B)
    if outer == 0:
        raise EmptyOuterBall(f"mu(B({c_B}, {3*r_B})) = 0")
    if s_grid is None:
        s_grid = np.linspace(0.0, 1.5, 61)
    s_grid = np.asarray(s_grid, dtype=float)
    s_pos = s_grid[s_grid > 0]
    d = space.D[c_B]
    best_R, best_const = None, np.inf
    for R in np.linspace(r_B, 1.2 * r_B, candidates):
        worst = 0.0
        for s in s_pos:
            lo, hi = R - r_B * s, R + r_B * s
            mu = float(space.mass[(d > lo) & (d < hi)].sum())
            worst = max(worst, mu / (s * outer))
        if worst < best_const - 1e-15:
            best_const, best_R = worst, float(R)
    return RegularizedBall(c_B, float(r_B), best_R, best_const, s_grid=s_grid)
