"""Tagged randomization of dyadic centers and good/bad cube statistics.

New centers for generation k are drawn among the net points of generation
k+1: one uniform tag i in {1..L} is drawn per generation, indices earmarked
with i pick a uniform child, all others keep the deterministic closest
finer net point (the center itself, since nets are nested).  Conflicting
indices never share a tag, so conflicting cubes never move simultaneously.

Goodness = geometric goodness (no two coarse cubes of the other grid close
to the center at the lag-s threshold) AND pseudogoodness (a Bernoulli
thinning equalizing the total goodness probability across cubes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dyadic import DyadicSystem, NetHierarchy, build_cubes, validate_new_centers
from .space import MetricMeasureSpace
from .streams import substream, trial_map


class TagExhausted(Exception):
    pass


class NoCloseChild(Exception):
    pass


class PiEstimateUnstable(Exception):
    pass


def goodness_gamma(alpha: float, dim_d: float) -> float:
    """Exponent gamma = alpha / (2 (alpha + d)) used in the badness threshold."""
    return alpha / (2.0 * (alpha + dim_d))


# ---------------------------------------------------------------------------
# Tagging

@dataclass
class TaggingPlan:
    nets: NetHierarchy
    conflict_sets: dict           # gen k -> list of frozensets of alpha indices
    tag_count: int = 0            # L
    tags: dict = field(default_factory=dict)   # gen k -> int array (1-based)

    @property
    def randomized_generations(self):
        return range(self.nets.k_min, self.nets.k_max)

    def max_conflict_size(self) -> int:
        return max((len(c) for k in self.conflict_sets for c in self.conflict_sets[k]),
                   default=0)


def conflict_sets(nets: NetHierarchy) -> TaggingPlan:
    """(k, b) conflicts with (k, a) when children of a and b come within side/4.

    Self-conflicts are excluded; the relation is symmetric by construction.
    """
    D = nets.space.D
    out = {}
    for k in range(nets.k_min, nets.k_max):
        ck = nets.centers[k]
        cf = nets.centers[k + 1]
        link = nets.parent[k + 1]
        thr = nets.side(k) / 4.0
        close = D[np.ix_(cf, cf)] < thr
        m = len(ck)
        conf = [set() for _ in range(m)]
        pairs = np.argwhere(close)
        for g, s in pairs:
            a, b = int(link[g]), int(link[s])
            if a != b:
                conf[a].add(b)
                conf[b].add(a)
        out[k] = [frozenset(c) for c in conf]
    plan = TaggingPlan(nets, out)
    plan.tag_count = plan.max_conflict_size() + 1
    return plan


def tag_points(plan: TaggingPlan, tag_count: int | None = None) -> TaggingPlan:
    """Greedy smallest-free-number tagging in point-id order."""
    L = tag_count if tag_count is not None else plan.tag_count
    if L <= plan.max_conflict_size():
        raise ValueError(f"L={L} must exceed the largest conflict set")
    tags = {}
    for k in plan.randomized_generations:
        conf = plan.conflict_sets[k]
        t = np.zeros(len(conf), dtype=int)
        for a in range(len(conf)):  # centers are sorted by point id
            used = {t[b] for b in conf[a] if b < a}
            pick = 1
            while pick in used:
                pick += 1
            if pick > L:
                raise TagExhausted(f"generation {k}, index {a}")
            t[a] = pick
        tags[k] = t
    plan.tags = tags
    plan.tag_count = L
    return plan


# ---------------------------------------------------------------------------
# Grid sampling

@dataclass
class RandomGridSample:
    """One draw of the tagged randomization."""

    seed: object
    nets: NetHierarchy
    drawn_tag: dict               # randomized gen -> i in {1..L}
    centers: dict                 # every gen -> array of point ids
    t: dict                       # gen -> uniform [0,1] per cube index
    u: dict                       # gen -> uniform [0,1] per cube index
    goodness: "GoodnessAnnotation | None" = None

    def system(self) -> DyadicSystem:
        return build_cubes(self.nets, self.centers)


@dataclass
class GoodnessAnnotation:
    gamma: float
    r: int
    eta: float
    eps_const: float              # C in pi_good = 1 - C delta^(r gamma eta)
    pi_good: float
    pi_x: dict                    # gen -> per-cube estimated geometric-good probability
    geometric_good: dict          # gen -> bool array
    pseudogood: dict
    good: dict


def sample_grid(nets: NetHierarchy, plan: TaggingPlan, seed,
                _stream_labels: dict | None = None) -> RandomGridSample:
    """Draw new dyadic centers plus pseudogoodness variables.

    Per generation: one uniform tag, uniform child choices for earmarked
    indices, deterministic closest finer net point for the rest.  The new
    centers are validated against separation side/8 and covering 4*side
    before returning.
    """
    if not plan.tags:
        raise ValueError("plan is untagged; call tag_points first")
    D = nets.space.D
    L = plan.tag_count
    drawn = {}
    centers = {nets.k_max: nets.centers[nets.k_max].copy()}
    t_vars, u_vars = {}, {}
    for k in plan.randomized_generations:
        label = _stream_labels[k] if _stream_labels else k
        g = substream(seed, "tag-draw", label)
        i = int(g.integers(1, L + 1))
        drawn[k] = i
        ck = nets.centers[k]
        cf = nets.centers[k + 1]
        new = np.empty(len(ck), dtype=int)
        for a in range(len(ck)):
            if plan.tags[k][a] == i:
                kids = nets.children_of(k, a)
                new[a] = cf[kids[int(g.integers(0, kids.size))]]
            else:
                j = int(np.argmin(D[ck[a], cf]))
                if D[ck[a], cf[j]] >= nets.side(k + 1):
                    raise NoCloseChild(f"generation {k}, index {a}")
                new[a] = cf[j]
        centers[k] = new
    for k in nets.generations:
        label = _stream_labels[k] if _stream_labels else k
        t_vars[k] = substream(seed, "pseudo-t", label).random(len(centers[k]))
        u_vars[k] = substream(seed, "pseudo-u", label).random(len(centers[k]))
    validate_new_centers(nets.space, centers, nets.delta, nets.k_min, nets.k_max)
    return RandomGridSample(seed, nets, drawn, centers, t_vars, u_vars)


# ---------------------------------------------------------------------------
# Geometric good/bad classification

def classify_points_geometric(space: MetricMeasureSpace, points, k: int,
                              other: DyadicSystem, r: int, gamma: float) -> np.ndarray:
    """Geometric goodness of prospective generation-k centers against other.

    A center x is bad when for some s >= r two generation-(k-1) centers of
    the other grid lie within delta^(gamma k) * delta^((1-gamma)(k-s)) of x
    and descend from distinct generation-(k-s) cubes.  Only centers of
    generations < k of the other system enter, never its memberships.
    """
    points = np.atleast_1d(np.asarray(points, dtype=int))
    delta = other.delta
    good = np.ones(points.size, dtype=bool)
    kc = k - 1
    if kc < other.k_min or kc > other.k_max:
        return good
    ys = other.centers[kc]
    dmat = space.D[np.ix_(points, ys)]
    s = r
    while k - s >= other.k_min:
        thr = delta ** (gamma * k) * delta ** ((1.0 - gamma) * (k - s))
        near = dmat <= thr
        anc = np.arange(len(ys))
        for j in range(kc, k - s, -1):
            anc = other.center_parent[j][anc]
        n_anc = other.n_cubes(k - s)
        onehot = np.zeros((len(ys), n_anc), dtype=bool)
        onehot[np.arange(len(ys)), anc] = True
        hit = near @ onehot            # (npoints, n_anc) counts > 0 per ancestor
        good &= (hit > 0).sum(axis=1) < 2
        s += 1
    return good


def classify_geometric(Q, other: DyadicSystem, r: int, gamma: float) -> bool:
    """Good/bad flag for one cube of a system against another system."""
    flag = classify_points_geometric(Q.system.space, [Q.center], Q.k, other, r, gamma)
    return bool(flag[0])


def annotate_goodness(sample: RandomGridSample, other: DyadicSystem, r: int,
                      gamma: float, eta: float, pi_x: dict, pi_good: float) -> GoodnessAnnotation:
    """Fill per-cube goodness flags: good = geometric AND t <= pi_good/pi_x."""
    nets = sample.nets
    space = nets.space
    geo, pseudo, good = {}, {}, {}
    for k in nets.generations:
        geo[k] = classify_points_geometric(space, sample.centers[k], k, other, r, gamma)
        thr = np.minimum(1.0, pi_good / np.asarray(pi_x[k], dtype=float))
        pseudo[k] = sample.t[k] <= thr
        good[k] = geo[k] & pseudo[k]
    eps_const = (1.0 - pi_good) / nets.delta ** (r * gamma * eta)
    ann = GoodnessAnnotation(gamma, r, eta, eps_const, pi_good, pi_x, geo, pseudo, good)
    sample.goodness = ann
    return ann


# ---------------------------------------------------------------------------
# Lemma statistics

def _t_quantile_975(df: int) -> float:
    table = {1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571, 6: 2.447,
             7: 2.365, 8: 2.306, 9: 2.262, 10: 2.228, 15: 2.131, 20: 2.086, 30: 2.042}
    if df in table:
        return table[df]
    keys = sorted(table)
    for lo, hi in zip(keys, keys[1:]):
        if lo < df < hi:
            w = (df - lo) / (hi - lo)
            return table[lo] * (1 - w) + table[hi] * w
    return 1.96


@dataclass
class BoundaryReport:
    generation: int
    eps_list: np.ndarray
    freq: np.ndarray
    se: np.ndarray
    eta_hat: float
    eta_ci: tuple
    monotone_within_3sigma: bool
    trials: int


def estimate_boundary_probability(nets: NetHierarchy, plan: TaggingPlan, k: int,
                                  eps_list, trials: int, seed,
                                  workers: int = 1) -> BoundaryReport:
    """Frequency of points landing in some generation-k cube boundary layer.

    The layer of a cube is the set of points within eps*side of both the
    cube and its complement.  Frequencies are averaged over the points of
    the space, then over random grids; the decay exponent is an ordinary
    log-log least squares fit with a t-based confidence interval.
    """
    space = nets.space
    eps_arr = np.asarray(sorted(eps_list, reverse=True), dtype=float)
    side = nets.side(k)
    n = space.n_points

    def one(tr):
        sample = sample_grid(nets, plan, (seed, "trial", tr))
        system = sample.system()
        cu = system.cube_of[k]
        m = system.n_cubes(k)
        M = np.full((n, m), np.inf)
        for a in range(m):
            mem = cu == a
            if mem.any():
                M[:, a] = space.D[:, mem].min(axis=1)
        if m > 1:
            second = np.partition(M, 1, axis=1)[:, 1]
        else:
            second = np.full(n, np.inf)
        return np.array([(second <= e * side).mean() for e in eps_arr])

    W = np.array(trial_map(one, trials, workers))
    freq = W.mean(axis=0)
    se = W.std(axis=0, ddof=1) / math.sqrt(trials)
    diffs = W[:, :-1] - W[:, 1:]          # layers nest, so these are >= 0 per trial
    dmean = diffs.mean(axis=0)
    dse = diffs.std(axis=0, ddof=1) / math.sqrt(trials)
    monotone = bool((dmean >= -3 * dse - 1e-15).all())
    pos = freq > 0
    if pos.sum() >= 3:
        lx, ly = np.log(eps_arr[pos]), np.log(freq[pos])
        A = np.vstack([lx, np.ones(lx.size)]).T
        coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
        resid = ly - A @ coef
        dof = lx.size - 2
        s2 = (resid ** 2).sum() / max(dof, 1)
        se_slope = math.sqrt(s2 / ((lx - lx.mean()) ** 2).sum())
        tq = _t_quantile_975(max(dof, 1))
        eta_hat = float(coef[0])
        ci = (eta_hat - tq * se_slope, eta_hat + tq * se_slope)
    else:
        eta_hat, ci = float("nan"), (float("nan"), float("nan"))
    return BoundaryReport(k, eps_arr, freq, se, eta_hat, ci, monotone, trials)


@dataclass
class BadnessReport:
    generation: int
    r_list: list
    freq: np.ndarray              # mean badness frequency over cubes, per r
    per_cube: np.ndarray          # (len(r_list), n_cubes)
    decay_within_3sigma: bool
    fitted_C: float
    eta_used: float
    trials: int


def estimate_bad_probability(fixed: DyadicSystem, nets: NetHierarchy, plan: TaggingPlan,
                             k: int, r_list, gamma: float, eta: float,
                             trials: int, seed, workers: int = 1) -> BadnessReport:
    """Badness frequency of the fixed generation-k cubes under random grids.

    Badness at r+1 implies badness at r, so per-trial decay is exact; the
    3-sigma slack only matters for the aggregated paired differences.  The
    single fitted constant is max_r freq(r) / delta^(r gamma eta).
    """
    space = fixed.space
    xs = fixed.centers[k]
    r_list = list(r_list)

    def one(tr):
        sample = sample_grid(nets, plan, (seed, "trial", tr))
        other = sample.system()
        row = np.empty((len(r_list), len(xs)), dtype=bool)
        for j, r in enumerate(r_list):
            row[j] = ~classify_points_geometric(space, xs, k, other, r, gamma)
        return row

    B = np.array(trial_map(one, trials, workers))   # (T, n_r, n_cubes)
    per_cube = B.mean(axis=0)
    freq = per_cube.mean(axis=1)
    Wr = B.mean(axis=2)                             # per-trial mean badness per r
    diffs = Wr[:, :-1] - Wr[:, 1:]
    dmean = diffs.mean(axis=0)
    dse = diffs.std(axis=0, ddof=1) / math.sqrt(trials)
    decay = bool((dmean >= -3 * dse - 1e-15).all())
    delta = fixed.delta
    fitted_C = max(f / delta ** (r * gamma * eta) for f, r in zip(freq, r_list))
    return BadnessReport(k, r_list, freq, per_cube, decay, fitted_C, eta, trials)


def estimate_pi_geometric(space: MetricMeasureSpace, points, k: int,
                          nets: NetHierarchy, plan: TaggingPlan, r: int, gamma: float,
                          trials: int, seed, workers: int = 1) -> np.ndarray:
    """Monte Carlo estimate of P(center is geometrically good) per point.

    The probability is over the random draw of the other grid; it depends
    only on the candidate center, which is why one estimate per point value
    is enough.
    """
    points = np.atleast_1d(np.asarray(points, dtype=int))

    def one(tr):
        sample = sample_grid(nets, plan, (seed, "pi", tr))
        other = sample.system()
        return classify_points_geometric(space, points, k, other, r, gamma)

    G = np.array(trial_map(one, trials, workers))
    return G.mean(axis=0)


@dataclass
class UniformGoodnessReport:
    generation: int
    pi_hat: np.ndarray
    pi_good: float
    eps_const: float
    freq: np.ndarray
    sigma: np.ndarray             # combined MC + propagation standard error per cube
    max_abs_dev: float
    within_3sigma: bool
    trials: int
    pi_trials: int


def verify_uniform_goodness(fixed: DyadicSystem, nets: NetHierarchy, plan: TaggingPlan,
                            k: int, r: int, gamma: float, eta: float,
                            trials: int, seed, pi_trials: int | None = None,
                            workers: int = 1) -> UniformGoodnessReport:
    """Check that pseudogoodness equalizes per-cube goodness frequencies.

    Phase 1 estimates the geometric-good probability per cube center on a
    dedicated seed stream; phase 2 picks the smallest constant C with every
    estimate >= pi_good = 1 - C delta^(r gamma eta); phase 3 layers the
    thinning on fresh grids and compares per-cube frequencies with pi_good.
    """
    space = fixed.space
    T1 = pi_trials if pi_trials is not None else 4 * trials
    xs = fixed.centers[k]
    pi_hat = estimate_pi_geometric(space, xs, k, nets, plan, r, gamma, T1,
                                   (seed, "pi-phase"), workers)
    se1 = np.sqrt(np.maximum(pi_hat * (1 - pi_hat), 1e-12) / T1)
    rel_width = 2 * 1.96 * se1 / np.maximum(pi_hat, 1e-12)
    if (rel_width > 0.10).any():
        worst = int(np.argmax(rel_width))
        raise PiEstimateUnstable(
            f"cube {worst}: relative CI width {rel_width[worst]:.3f} > 10%")
    pi_good = float(pi_hat.min())
    eps_const = (1.0 - pi_good) / fixed.delta ** (r * gamma * eta)
    thr = np.minimum(1.0, pi_good / pi_hat)

    def one(tr):
        sample = sample_grid(nets, plan, (seed, "verify", tr))
        other = sample.system()
        geo = classify_points_geometric(space, xs, k, other, r, gamma)
        t = substream(seed, "verify-t", tr).random(len(xs))
        return geo & (t <= thr)

    G = np.array(trial_map(one, trials, workers))
    freq = G.mean(axis=0)
    se3 = np.sqrt(np.maximum(freq * (1 - freq), 1e-12) / trials)
    propagated = pi_good * se1 / np.maximum(pi_hat, 1e-12)
    sigma = np.sqrt(se3 ** 2 + propagated ** 2)
    dev = np.abs(freq - pi_good)
    ok = bool((dev <= 3 * sigma).all())
    return UniformGoodnessReport(k, pi_hat, pi_good, eps_const, freq, sigma,
                                 float(dev.max()), ok, trials, T1)


# ---------------------------------------------------------------------------
# Collapse identity

@dataclass
class CollapseReport:
    lhs_mean: complex
    rhs_mean: complex
    diff_mean: complex
    diff_sigma: float             # paired MC standard error + pi propagation
    pi_good: float
    scale: float                  # typical magnitude of the compared averages
    within_3sigma: bool
    trials: int


def check_collapse_identity(nets: NetHierarchy, plan: TaggingPlan, fixed_other: DyadicSystem,
                            f, g, b1, b2, operator, r: int, gamma: float, eta: float,
                            m: int, k0: int, trials: int, seed,
                            pi_trials: int | None = None, workers: int = 1) -> CollapseReport:
    """Two-sided Monte Carlo check of the good-cube thinning identity.

    With the second grid fixed, (1 - C delta^(r gamma eta)) E[sum over all R,
    good Q of phi(Q, R)] must equal E[sum over good R, good Q of phi(Q, R)]
    for phi(Q,R) = <g, psi_R><b2, T(b1 phi_Q)><psi_R>_Q <phi_Q, f>, summed
    over generations m <= gen < k0 with gen(Q) >= gen(R).  Averaging is over
    the first grid's centers and both pseudogoodness streams; the paired
    difference estimator carries the Monte Carlo error.
    """
    from .martingale import haar_functions_for_system

    space = nets.space
    T1 = pi_trials if pi_trials is not None else 4 * trials

    # Candidate center values per generation: all finer net points (plus the
    # finest net for the pass-through generation).  Their geometric-good
    # probability over the random other grid feeds the t-thinning.
    cand = {}
    for k in nets.generations:
        cand[k] = nets.centers[k + 1] if k < nets.k_max else nets.centers[k]
    pi_by_gen = {}
    for k in nets.generations:
        if not (m <= k < k0):
            continue
        pi_by_gen[k] = _pi_lookup(space, cand[k], k, nets, plan, r, gamma, T1,
                                  (seed, "pi-q", k), workers)

    # Fixed-grid side: geometric-good probability of each R center over the
    # random first grid, and the fixed Haar data for g.
    pi_R = {}
    for kR in fixed_other.generations:
        if not (m <= kR < k0):
            continue
        pi_R[kR] = estimate_pi_geometric(space, fixed_other.centers[kR], kR, nets, plan,
                                         r, gamma, T1, (seed, "pi-r", kR), workers)
    all_pi = [v for lk in pi_by_gen.values() for v in lk.values()] + \
             [float(x) for kR in pi_R for x in pi_R[kR]]
    pi_good = min(all_pi)

    psi_data = haar_functions_for_system(fixed_other, b2, m, k0)
    g_arr = np.asarray(g, dtype=complex)
    mu = space.mass
    gpsi = np.array([(p.values * g_arr * mu).sum() for p in psi_data])
    psi_w = np.stack([p.values * mu for p in psi_data])        # (nPsi, n)
    psi_cube = [(p.k, p.alpha) for p in psi_data]
    gens_R = sorted({k for k, _ in psi_cube})

    b1_arr = np.asarray(b1, dtype=complex)
    b2_arr = np.asarray(b2, dtype=complex)
    f_arr = np.asarray(f, dtype=complex)
    delta = nets.delta

    def one(tr):
        sample = sample_grid(nets, plan, (seed, "trial", tr))
        system = sample.system()
        phis = haar_functions_for_system(system, b1, m, k0)
        # Q-cube coefficient sum_u <b2, T(b1 phi)> <phi, f>
        coefQ = {}
        for p in phis:
            tb = (b2_arr * operator.apply(b1_arr * p.values) * mu).sum()
            pf = (p.values * f_arr * mu).sum()
            coefQ[(p.k, p.alpha)] = coefQ.get((p.k, p.alpha), 0.0) + tb * pf
        # goodness of Q cubes: geometric against the FIXED grid, thinned by
        # the marginal probability of the realized center value
        t_draws = {k: substream(seed, "trial", tr, "t", k).random(system.n_cubes(k))
                   for k in system.generations}
        goodQ = {}
        for k in system.generations:
            if not (m <= k < k0):
                continue
            geo = classify_points_geometric(space, system.centers[k], k, fixed_other, r, gamma)
            pi_vals = np.array([pi_by_gen[k][int(c)] for c in system.centers[k]])
            goodQ[k] = geo & (t_draws[k] <= np.minimum(1.0, pi_good / pi_vals))
        # goodness of R cubes: geometric against the trial grid, thinned by u
        goodR = {}
        for kR in gens_R:
            geo = classify_points_geometric(space, fixed_other.centers[kR], kR, system, r, gamma)
            u = substream(seed, "trial", tr, "u", kR).random(fixed_other.n_cubes(kR))
            goodR[kR] = geo & (u <= np.minimum(1.0, pi_good / pi_R[kR]))
        # phi(Q,R) factorizes: [sum_v <g,psi_Rv><psi_Rv>_Q] * coefQ
        lhs = 0.0 + 0.0j
        rhs = 0.0 + 0.0j
        for (kQ, aQ), cQ in coefQ.items():
            if not goodQ[kQ][aQ]:
                continue
            memQ = system.members(kQ, aQ)
            muQ = float(mu[memQ].sum())
            if muQ == 0:
                continue
            for j, (kR, aR) in enumerate(psi_cube):
                if kQ < kR:     # need ell(Q) <= ell(R)
                    continue
                avg = psi_w[j][memQ].sum() / muQ
                term = gpsi[j] * avg * cQ
                lhs += term
                if goodR[kR][aR]:
                    rhs += term
        return np.array([pi_good * lhs - rhs, pi_good * lhs, rhs])

    rows = np.array(trial_map(one, trials, workers))
    diff = rows[:, 0]
    lhs_mean, rhs_mean = rows[:, 1].mean(), rows[:, 2].mean()
    diff_mean = diff.mean()
    var = diff.real.var(ddof=1) + diff.imag.var(ddof=1)
    se = math.sqrt(var / trials)
    scale = max(abs(lhs_mean), abs(rhs_mean), 1e-30)
    prop = max(np.sqrt(np.maximum(pi_good * (1 - pi_good), 1e-12) / T1), 0.0) * scale
    sigma = math.sqrt(se ** 2 + prop ** 2)
    ok = abs(diff_mean) <= 3 * sigma + 1e-30
    return CollapseReport(lhs_mean, rhs_mean, diff_mean, sigma, pi_good, scale, ok, trials)


def _pi_lookup(space, points, k, nets, plan, r, gamma, trials, seed, workers):
    vals = estimate_pi_geometric(space, points, k, nets, plan, r, gamma, trials, seed, workers)
    return {int(p): float(v) for p, v in zip(np.atleast_1d(points), np.atleast_1d(vals))}
