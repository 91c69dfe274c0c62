"""Space-time cone geometry and simple-random-walk statistics.

The directed polymer lives on nearest-neighbor paths in Z^d x Z.  All
dynamic programming happens on `LatticeCone` index sets: per time slice,
the parity-admissible points of an l1 ball, densely indexed in
lexicographic order.  This module also provides the exact N-step walk
law and the collision (return) statistics that define the L^2 region.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product

import numpy as np
from scipy.special import gammaln, logsumexp, zeta

from . import _rng

#: refuse to build cones larger than this many sites
MAX_CONE_SITES = 80_000_000


class CapacityError(Exception):
    """Requested window does not fit in addressable memory."""


@dataclass
class ConeSlice:
    """One time slice of a cone: parity-admissible l1-ball points."""

    t: int
    radius: int
    coords: np.ndarray      # (n, d) int32, lexicographic order
    codes: np.ndarray       # (n,) int64, ascending (same order as coords)
    l1: np.ndarray          # (n,) int32, |x - x_anchor|_1
    offset: int             # global dense index of the first site

    def __len__(self):
        return self.coords.shape[0]


@dataclass
class LatticeCone:
    """Dense index set {(t,x): t_min <= t <= t_max, |x - x_a|_1 <= |t - t_a|},
    restricted to the admissible parity class of each slice."""

    d: int
    t_min: int
    t_max: int
    anchor: tuple
    slices: dict = field(repr=False)
    site_count: int
    code_base: int          # K: codes are sum((x_i + K//2) * K**i)
    _cache: dict = field(default_factory=dict, repr=False)

    def slice_at(self, t):
        if t not in self.slices:
            raise KeyError(f"time {t} outside cone window [{self.t_min}, {self.t_max}]")
        return self.slices[t]

    def encode(self, coords):
        """Map site coordinates to sortable integer codes."""
        coords = np.asarray(coords, dtype=np.int64)
        half = self.code_base // 2
        code = coords[..., 0] + half
        for i in range(1, self.d):
            code = code * self.code_base + (coords[..., i] + half)
        return code

    def local_index(self, t, x):
        """Index of site x within slice t; raises KeyError if absent."""
        sl = self.slice_at(t)
        code = self.encode(np.asarray(x, dtype=np.int64))
        pos = int(np.searchsorted(sl.codes, code))
        if pos >= len(sl) or sl.codes[pos] != code:
            raise KeyError(f"site {tuple(x)} not in cone slice t={t}")
        return pos

    def global_index(self, t, x):
        sl = self.slice_at(t)
        return sl.offset + self.local_index(t, x)

    def contains(self, t, x):
        try:
            self.local_index(t, x)
            return True
        except KeyError:
            return False


def _ball_template(d, radius):
    """All integer points with |x|_1 <= radius, lexicographic, plus |x|_1."""
    side = 2 * radius + 1
    if side ** d > 2.5e8:
        raise CapacityError(f"l1 ball of radius {radius} in d={d} exceeds capacity")
    axes = [np.arange(-radius, radius + 1, dtype=np.int32)] * d
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid], axis=1)
    l1 = np.abs(coords).sum(axis=1, dtype=np.int32)
    keep = l1 <= radius
    return coords[keep], l1[keep]


def build_cone(d, t_min, t_max, anchor):
    """Build the dense cone index for the window [t_min, t_max].

    `anchor` is a (time, site) pair; slice t holds the points x with
    |x - x_anchor|_1 <= |t - t_anchor| whose coordinate sum matches the
    parity of t - t_anchor.
    """
    t_anchor, x_anchor = anchor
    x_anchor = tuple(int(c) for c in np.atleast_1d(np.asarray(x_anchor)).ravel())
    if len(x_anchor) == 1 and d > 1:
        x_anchor = x_anchor * d
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if t_min > t_max:
        raise ValueError("t_min must be <= t_max")
    if not (t_min <= t_anchor <= t_max):
        raise ValueError("anchor time must lie inside the window")
    if len(x_anchor) != d:
        raise ValueError("anchor site has wrong dimension")

    radii = {t: abs(t - t_anchor) for t in range(t_min, t_max + 1)}
    r_max = max(radii.values())
    template, template_l1 = _ball_template(d, r_max)

    # capacity check from per-(l1, parity) counts before allocating slices
    counts = np.bincount(template_l1, minlength=r_max + 1)
    cum_even = np.cumsum(np.where(np.arange(r_max + 1) % 2 == 0, counts, 0))
    cum_odd = np.cumsum(np.where(np.arange(r_max + 1) % 2 == 1, counts, 0))
    total = 0
    for t, r in radii.items():
        total += int(cum_even[r] if r % 2 == 0 else cum_odd[r])
    if total > MAX_CONE_SITES:
        raise CapacityError(f"cone would hold {total} sites (limit {MAX_CONE_SITES})")

    code_base = 2 * (r_max + (max(abs(c) for c in x_anchor) if x_anchor else 0)) + 5

    anchor_arr = np.asarray(x_anchor, dtype=np.int32)
    cone = LatticeCone(d=d, t_min=t_min, t_max=t_max, anchor=(t_anchor, x_anchor),
                       slices={}, site_count=total, code_base=code_base)
    offset = 0
    for t in range(t_min, t_max + 1):
        r = radii[t]
        keep = (template_l1 <= r) & (template_l1 % 2 == r % 2)
        coords = template[keep] + anchor_arr
        l1 = template_l1[keep]
        codes = cone.encode(coords)
        # lexicographic template order maps to ascending codes
        cone.slices[t] = ConeSlice(t=t, radius=r, coords=coords, codes=codes,
                                   l1=l1, offset=offset)
        offset += coords.shape[0]
    assert offset == total
    return cone


# ---------------------------------------------------------------------------
# N-step walk law

@dataclass
class WalkDistribution:
    """Exact law of the simple symmetric walk after `time` steps."""

    d: int
    time: int
    masses: dict            # site tuple -> probability

    def mass(self, x):
        return self.masses.get(tuple(int(c) for c in x), 0.0)

    def total(self):
        return sum(self.masses.values())


@lru_cache(maxsize=64)
def n_step_distribution(d, N):
    """N-fold convolution of the uniform nearest-neighbor kernel."""
    if N < 0:
        raise ValueError("N must be >= 0")
    side = 2 * N + 1
    arr = np.zeros((side,) * d)
    arr[(N,) * d] = 1.0
    for _ in range(N):
        new = np.zeros_like(arr)
        for axis in range(d):
            lo = [slice(None)] * d
            hi = [slice(None)] * d
            lo[axis] = slice(0, side - 1)
            hi[axis] = slice(1, side)
            new[tuple(lo)] += arr[tuple(hi)]
            new[tuple(hi)] += arr[tuple(lo)]
        arr = new / (2 * d)
    masses = {}
    for idx in np.argwhere(arr > 0.0):
        masses[tuple(int(i) - N for i in idx)] = float(arr[tuple(idx)])
    return WalkDistribution(d=d, time=N, masses=masses)


# ---------------------------------------------------------------------------
# Collision statistics / pi_d

@dataclass
class CollisionEstimate:
    """Truncated-series estimate of the two-walk collision probability."""

    d: int
    t_max: int
    partial_green: float
    tail_bound: float
    pi_d: float
    pi_low: float
    pi_high: float
    recurrent_flag: bool
    u: np.ndarray           # u_t = sum_x p_t(x)^2, t = 0..t_max


def _log_return_probs(d, t_max):
    """log p_{2t}(0,0) for t = 0..t_max, any dimension.

    Walk-count generating identity: the number of 2t-step loops is
    (2t)! * f_t where f = g^{*d} with g_a = 1/(a!)^2.  The convolutions
    are done in log space, so t_max in the thousands is exact to double
    precision.
    """
    n = np.arange(t_max + 1)
    log_g = -2.0 * gammaln(n + 1.0)
    log_f = log_g.copy()
    for _ in range(d - 1):
        nxt = np.empty_like(log_f)
        for m in range(t_max + 1):
            nxt[m] = logsumexp(log_g[: m + 1] + log_f[m::-1])
        log_f = nxt
    return gammaln(2.0 * n + 1.0) - 2.0 * n * np.log(2.0 * d) + log_f


def collision_green_function(d, t_max):
    """Sum the on-diagonal collision series and estimate pi_d.

    u_t is computed through the exact identity u_t = p_{2t}(0,0); the
    t > t_max remainder is bracketed by fitting c * t^(-d/2) on the last
    decade (lower bound 0, upper bound twice the fitted tail).
    """
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    u = np.exp(_log_return_probs(d, t_max))
    partial = float(u.sum())

    decade_lo = t_max // 10
    fit_t = np.arange(decade_lo + 1, t_max + 1)
    if fit_t.size < 8:
        raise ValueError("t_max too small to fit the tail (need >= 8 points in the last decade)")

    if d <= 2:
        # series diverges; partial sums fail the Cauchy criterion
        increment = float(u[decade_lo + 1:].sum())
        recurrent = increment > 0.01 * partial
        return CollisionEstimate(d=d, t_max=t_max, partial_green=partial,
                                 tail_bound=float("inf"), pi_d=1.0,
                                 pi_low=1.0, pi_high=1.0,
                                 recurrent_flag=recurrent, u=u)

    c_fit = float(np.mean(u[fit_t] * fit_t ** (d / 2.0)))
    tail = c_fit * float(zeta(d / 2.0, t_max + 1))
    green = partial + tail
    return CollisionEstimate(
        d=d, t_max=t_max, partial_green=partial, tail_bound=tail,
        pi_d=1.0 - 1.0 / green,
        pi_low=1.0 - 1.0 / partial,
        pi_high=1.0 - 1.0 / (partial + 2.0 * tail),
        recurrent_flag=False, u=u)


def sample_collision_count(d, N, seed, samples, chunk=20_000):
    """Histogram of the overlap L_N of two independent N-step walks.

    Returns integer counts c where c[k] is the number of walk pairs with
    exactly k coincidences over t = 1..N.  Fully reproducible: step
    directions come from the counter stream keyed by `seed`.
    """
    if N < 0:
        raise ValueError("N must be >= 0")
    deltas = np.zeros((2 * d, d), dtype=np.int32)
    for axis in range(d):
        deltas[2 * axis, axis] = 1
        deltas[2 * axis + 1, axis] = -1

    key = np.uint64(_rng.derive_key(seed, 0))
    max_l = 0
    counts = np.zeros(N + 1, dtype=np.int64)
    for start in range(0, samples, chunk):
        m = min(chunk, samples - start)
        counters = (np.arange(start, start + m, dtype=np.int64)[:, None] * (2 * N)
                    + np.arange(2 * N, dtype=np.int64)[None, :])
        words = _rng.uniform_words(key, counters.ravel()).reshape(m, 2, N)
        dirs = (words % np.uint64(2 * d)).astype(np.int8)
        pos_a = np.zeros((m, d), dtype=np.int32)
        pos_b = np.zeros((m, d), dtype=np.int32)
        overlap = np.zeros(m, dtype=np.int64)
        for t in range(N):
            pos_a += deltas[dirs[:, 0, t]]
            pos_b += deltas[dirs[:, 1, t]]
            overlap += (pos_a == pos_b).all(axis=1)
        counts += np.bincount(overlap, minlength=N + 1)
        max_l = max(max_l, int(overlap.max(initial=0)))
    return counts[: max(max_l + 1, 1)]


def enumerate_slice_count(d, radius, parity):
    """Independent brute-force count of parity-admissible l1-ball points.

    Deliberately naive (nested product over the bounding box); used as an
    oracle against the vectorized cone construction.
    """
    count = 0
    for x in product(range(-radius, radius + 1), repeat=d):
        s = sum(abs(c) for c in x)
        if s <= radius and sum(x) % 2 == parity % 2:
            count += 1
    return count
