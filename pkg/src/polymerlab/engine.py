"""Exact forward/backward transfer-matrix computations for one environment.

Every quantity is an exact lattice path sum: sweeps run over "bands",
per-time subsets of the field's cone slices that are provably closed
under the steps a given quantity needs (point-to-point bands may drop
sites whose value is exactly zero; free-endpoint bands are validated to
contain every reachable site, and refuse to run otherwise).  Weights are
kept in direct space with a per-slice logarithmic offset.

Band geometry and neighbor tables depend only on (cone, query), so they
are cached on the cone and shared across environment samples; per-sample
work is one fused weight generation plus one gather per slice.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _rng
from .lattice import n_step_distribution

#: when True, every sweep renormalizes on every slice (scale-safety testing)
FORCE_RENORM = False

_RENORM_HI = 1e120
_RENORM_LO = 1e-120


class WindowError(Exception):
    """Field window does not cover the sites the computation needs."""


class UnreachableEndpointError(Exception):
    """Conditioning endpoint is not reachable (parity or distance)."""


class NumericRangeError(Exception):
    """Partition weights underflowed to zero despite rescaling."""


# ---------------------------------------------------------------------------
# bands

@dataclass
class _Layer:
    t: int
    coords: np.ndarray
    codes: np.ndarray
    local_idx: np.ndarray

    def __len__(self):
        return self.coords.shape[0]


@dataclass
class _Band:
    cone: object
    layers: list
    _next: dict = field(default_factory=dict)
    _prev: dict = field(default_factory=dict)

    def next_table(self, j):
        """Neighbor indices into layer j-1 for the sites of layer j."""
        if j not in self._next:
            self._next[j] = _neighbor_table(self.cone, self.layers[j - 1], self.layers[j])
        return self._next[j]

    def prev_table(self, j, strict=False):
        """Neighbor indices into layer j+1 for the sites of layer j."""
        if j not in self._prev:
            self._prev[j] = _neighbor_table(self.cone, self.layers[j + 1], self.layers[j])
        table = self._prev[j]
        if strict and (table < 0).any():
            raise WindowError(
                f"free sweep needs sites missing from the window near t={self.layers[j + 1].t}")
        return table


def _delta_codes(cone):
    codes = []
    for i in range(cone.d):
        step = cone.code_base ** (cone.d - 1 - i)
        codes.extend((step, -step))
    return np.array(codes, dtype=np.int64)


def _neighbor_table(cone, src, dst):
    """For each dst site, the src-layer index of each of its 2d neighbors."""
    deltas = _delta_codes(cone)
    n = len(dst)
    out = np.empty((n, deltas.size), dtype=np.int32)
    if len(src) == 0:
        out.fill(-1)
        return out
    for k, dc in enumerate(deltas):
        target = dst.codes + dc
        pos = np.searchsorted(src.codes, target)
        pos = np.minimum(pos, len(src) - 1)
        ok = src.codes[pos] == target
        out[:, k] = np.where(ok, pos, -1)
    return out


def _make_layer(cone, t, constraints):
    sl = cone.slice_at(t)
    mask = None
    for center, rad in constraints:
        c = np.asarray(center, dtype=np.int64)
        dist = np.abs(sl.coords.astype(np.int64) - c).sum(axis=1)
        m = dist <= rad
        mask = m if mask is None else (mask & m)
    if mask is None:
        idx = np.arange(len(sl), dtype=np.int64)
        return _Layer(t=t, coords=sl.coords, codes=sl.codes, local_idx=idx)
    idx = np.nonzero(mask)[0].astype(np.int64)
    return _Layer(t=t, coords=sl.coords[idx], codes=sl.codes[idx], local_idx=idx)


def _get_band(cone, key, times, constraints_fn):
    band = cone._cache.get(key)
    if band is None:
        layers = [_make_layer(cone, t, constraints_fn(t)) for t in times]
        band = _Band(cone=cone, layers=layers)
        cone._cache[key] = band
    return band


def _check_cover(cone, times, constraints_fn, what):
    """Verify that for each time at least one constraint ball fits in the slice."""
    t_anchor, x_anchor = cone.anchor
    xa = np.asarray(x_anchor, dtype=np.int64)
    for t in times:
        sl = cone.slice_at(t)
        ok = False
        for center, rad in constraints_fn(t):
            off = int(np.abs(np.asarray(center, dtype=np.int64) - xa).sum())
            if off + rad <= sl.radius:
                ok = True
                break
        if not ok:
            raise WindowError(f"{what}: window does not cover the reachable set at t={t}")


# ---------------------------------------------------------------------------
# sweep kernels

@njit(cache=True)
def _gather_scale(vals, nbr, scale):
    n, m = nbr.shape
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        s = 0.0
        for k in range(m):
            j = nbr[i, k]
            if j >= 0:
                s += vals[j]
        out[i] = s * scale
    return out


def _renorm(v, off):
    m = float(v.max())
    if m == 0.0:
        raise NumericRangeError("all path weights underflowed to zero")
    if FORCE_RENORM or not (_RENORM_LO < m < _RENORM_HI):
        v = v / m
        off += math.log(m)
    return v, off


def _run_forward(params, env, band, v0=None, keep=False):
    """Path-ordered sweep: value at layer j sums over steps from layer j-1,
    weighted by exp(beta * eta) at the arrival site."""
    layers = band.layers
    inv = 1.0 / (2 * params.d)
    v = np.ones(len(layers[0])) if v0 is None else v0
    off = 0.0
    out = [(v, off)]
    for j in range(1, len(layers)):
        nbr = band.next_table(j)
        stream = env.weight_stream(layers[j].t, layers[j].local_idx)
        if stream is not None:
            key, counters, law_id = stream
            v = _rng.gather_arrival(key, counters, law_id, params.beta,
                                    v, nbr, inv)
        else:
            s = _gather_scale(v, nbr, inv)
            v = s * env.weights_at(layers[j].t, layers[j].local_idx, params.beta)
        v, off = _renorm(v, off)
        out.append((v, off))
    return out if keep else out[-1]


def _run_backward(params, env, band, v_top=None, strict=True, keep=False):
    """Horizon sweep: value at layer j gathers exp(beta*eta)-weighted values
    of layer j+1 (band layers must be in ascending time order)."""
    layers = band.layers
    inv = 1.0 / (2 * params.d)
    v = np.ones(len(layers[-1])) if v_top is None else v_top
    off = 0.0
    out = [None] * len(layers)
    out[-1] = (v, off)
    for j in range(len(layers) - 2, -1, -1):
        nbr = band.prev_table(j, strict=strict)
        stream = env.weight_stream(layers[j + 1].t, layers[j + 1].local_idx)
        if stream is not None:
            key, counters, law_id = stream
            v = _rng.gather_departure(key, counters, law_id, params.beta,
                                      v, nbr, inv)
        else:
            g = v * env.weights_at(layers[j + 1].t, layers[j + 1].local_idx,
                                   params.beta)
            v = _gather_scale(g, nbr, inv)
        v, off = _renorm(v, off)
        out[j] = (v, off)
    return out if keep else out[0]


# ---------------------------------------------------------------------------
# public value types

@dataclass
class SliceVector:
    """Nonnegative weights on one time slice; stored values represent
    weights * exp(log_offset)."""

    time: int
    coords: np.ndarray
    weights: np.ndarray
    log_offset: float

    def value_at(self, x):
        x = np.asarray(x, dtype=np.int32)
        hit = np.nonzero((self.coords == x).all(axis=1))[0]
        if hit.size == 0:
            return 0.0
        return float(self.weights[hit[0]]) * math.exp(self.log_offset)

    def total(self):
        return float(self.weights.sum()) * math.exp(self.log_offset)


@dataclass
class PartitionSet:
    """Free-endpoint partition function with its endpoint resolution."""

    log_Z: float
    Z: float
    W: float
    point_to_point: SliceVector
    marginals: list


@dataclass
class DensityValue:
    """A particle-view density evaluation q_N or q_{N,M}."""

    q: float
    backward_factor: float = None
    site_factor: float = None
    forward_factor: float = None
    far_mass: float = None


@dataclass
class LltRemainder:
    """Local-limit-theorem remainder with its three factors."""

    value: float
    conditional: float
    forward_factor: float
    backward_factor: float
    site_factor: float


def default_llt_l(span, alpha=0.3):
    """Default intermediate scale for the LLT factorization."""
    return max(1, int(span ** alpha))


# ---------------------------------------------------------------------------
# operations

def _as_site(cone, x):
    x = np.atleast_1d(np.asarray(x, dtype=np.int64)).ravel()
    if x.size == 1 and cone.d > 1:
        x = np.repeat(x, cone.d)
    if x.size != cone.d:
        raise ValueError("site has wrong dimension")
    return x


def _origin(cone):
    return np.zeros(cone.d, dtype=np.int64)


def _fwd_band(params, env, M, x, N, check=True):
    cone = env.cone
    key = ("fwd", M, tuple(x), N)
    times = range(M, N + 1)
    cfn = lambda t: [(x, t - M)]
    if check and key not in cone._cache:
        _check_cover(cone, times, cfn, "forward sweep")
    return _get_band(cone, key, times, cfn)


def forward_point_to_point(params, env, start, end_time):
    """Endpoint-resolved path sums from `start` = (M, x) up to end_time.

    Slice t holds (2d)^-(t-M) * sum over paths x -> y of exp(beta * sum eta),
    with the environment read at arrival sites (times M+1 .. t).
    """
    M, x = start
    x = _as_site(env.cone, x)
    if end_time < M:
        raise ValueError("end_time must be >= start time")
    band = _fwd_band(params, env, M, x, end_time)
    if len(band.layers[0]) != 1:
        raise WindowError("start site outside the field window")
    res = _run_forward(params, env, band, keep=True)
    return [SliceVector(time=lay.t, coords=lay.coords, weights=v, log_offset=off)
            for lay, (v, off) in zip(band.layers, res)]


def backward_free(params, env, horizon, start_time):
    """Free-endpoint partition functions Z^x_{t,horizon} for every cone site,
    one sweep from the horizon down to start_time."""
    cone = env.cone
    for t in range(start_time, horizon):
        if cone.slice_at(t + 1).radius != cone.slice_at(t).radius + 1:
            raise WindowError("backward free sweep needs a forward-opening window")
    key = ("free", start_time, horizon)
    band = _get_band(cone, key, range(start_time, horizon + 1), lambda t: [])
    res = _run_backward(params, env, band, strict=True, keep=True)
    return [SliceVector(time=lay.t, coords=lay.coords, weights=v, log_offset=off)
            for lay, (v, off) in zip(band.layers, res)]


def normalized_W(params, env, M, N, x):
    """W_{M,N}(x) = Z^x_{M,N} exp(-(N-M) lambda)."""
    x = _as_site(env.cone, x)
    band = _fwd_band(params, env, M, x, N)
    if len(band.layers[0]) != 1:
        raise WindowError("start site outside the field window")
    v, off = _run_forward(params, env, band)
    return math.exp(off + math.log(float(v.sum())) - (N - M) * params.lam)


def backward_W(params, env, M, N, y):
    """Backward normalized partition function: the same path sum with the
    environment read at times N-1, N-2, ... (field reversed about N)."""
    cone = env.cone
    y = _as_site(cone, y)
    key = ("bwdW", M, N, tuple(y))
    times = range(N, M - 1, -1)
    cfn = lambda t: [(y, N - t)]
    if key not in cone._cache:
        _check_cover(cone, times, cfn, "backward partition sweep")
    band = _get_band(cone, key, times, cfn)
    if len(band.layers[0]) != 1:
        raise WindowError("base site outside the field window")
    v, off = _run_forward(params, env, band)
    return math.exp(off + math.log(float(v.sum())) - (N - M) * params.lam)


def conditional_W(params, env, M, N, x, y):
    """W_{M,N}(x|y): endpoint-pinned partition function divided by the
    walk's pinning probability p_{N-M}(x, y)."""
    cone = env.cone
    x = _as_site(cone, x)
    y = _as_site(cone, y)
    span = N - M
    dist = int(np.abs(y - x).sum())
    if dist > span or (dist - span) % 2 != 0:
        raise UnreachableEndpointError(
            f"endpoint {tuple(y)} not reachable from {tuple(x)} in {span} steps")
    key = ("cond", M, tuple(x), N, tuple(y))
    times = range(M, N + 1)
    cfn = lambda t: [(x, t - M), (y, N - t)]
    if key not in cone._cache:
        _check_cover(cone, times, cfn, "conditional sweep")
    band = _get_band(cone, key, times, cfn)
    v, off = _run_forward(params, env, band)
    p = n_step_distribution(cone.d, span).mass(y - x)
    return math.exp(off + math.log(float(v.sum())) - span * params.lam) / p


def path_marginals(params, env, M, N, x):
    """Per-time site distributions of the polymer measure based at (M, x)."""
    x = _as_site(env.cone, x)
    band = _fwd_band(params, env, M, x, N)
    if len(band.layers[0]) != 1:
        raise WindowError("base site outside the field window")
    fwd = _run_forward(params, env, band, keep=True)
    bwd = _run_backward(params, env, band, strict=True, keep=True)
    out = []
    for lay, (c, _), (f, _) in zip(band.layers, fwd, bwd):
        m = c * f
        tot = float(m.sum())
        if tot <= 0.0:
            raise NumericRangeError("polymer measure normalization underflowed")
        out.append(SliceVector(time=lay.t, coords=lay.coords,
                               weights=m / tot, log_offset=0.0))
    return out


def partition_set(params, env, M, N, x):
    """Z, W, endpoint-resolved weights and marginals in one pass."""
    x = _as_site(env.cone, x)
    slices = forward_point_to_point(params, env, (M, x), N)
    end = slices[-1]
    log_z = end.log_offset + math.log(float(end.weights.sum()))
    marginals = path_marginals(params, env, M, N, x)
    return PartitionSet(log_Z=log_z, Z=math.exp(log_z),
                        W=math.exp(log_z - (N - M) * params.lam),
                        point_to_point=end, marginals=marginals)


def replica_overlap(params, env, M, N, x):
    """Expected overlap of two independent replicas under the same measure:
    sum over t = M+1..N of sum_z mu(omega_t = z)^2."""
    marg = path_marginals(params, env, M, N, x)
    return float(sum((sv.weights ** 2).sum() for sv in marg[1:]))


def endpoint_mean_square(params, env, M, N, x):
    """Mean squared endpoint displacement under the polymer measure."""
    x = _as_site(env.cone, x)
    marg = path_marginals(params, env, M, N, x)
    end = marg[-1]
    d2 = ((end.coords.astype(np.int64) - x) ** 2).sum(axis=1)
    return float((end.weights * d2).sum())


def endpoint_square_by_coord(params, env, M, N, x):
    """Per-coordinate second moments and pairwise products of the endpoint."""
    x = _as_site(env.cone, x)
    marg = path_marginals(params, env, M, N, x)
    end = marg[-1]
    disp = end.coords.astype(np.float64) - x
    second = (end.weights[:, None] * disp ** 2).sum(axis=0)
    cross = []
    for i in range(env.cone.d):
        for j in range(i + 1, env.cone.d):
            cross.append(float((end.weights * disp[:, i] * disp[:, j]).sum()))
    return second, np.array(cross)


def _qn_bands(params, env, N, M):
    """Numerator (pinned-to-origin) and denominator (free) bands for the
    particle-view densities; the free band needs the window to open at
    least 2N wide, which is validated against the cone geometry."""
    cone = env.cone
    origin = _origin(cone)
    bkey = ("qn_B", N)
    btimes = range(-N, 1)
    bcfn = lambda t: [(origin, -t)]
    fkey = ("qn_F", N, M)
    ftimes = range(-N, M + 1)
    fcfn = lambda t: [(origin, 2 * N + t)]
    if fkey not in cone._cache:
        _check_cover(cone, ftimes, fcfn, "particle-view density")
    return (_get_band(cone, bkey, btimes, bcfn),
            _get_band(cone, fkey, ftimes, fcfn))


def density_qN(params, env, N, far_radius=None):
    """q_N = sum_x mu^x_{-N,0}(omega_N = 0), computed exactly from one
    pinned backward sweep and one free backward sweep."""
    return density_qNM(params, env, N, 0, far_radius=far_radius)


def density_qNM(params, env, N, M, far_radius=None):
    """q_{N,M} = sum_x mu^x_{-N,M}(omega_N = 0) via the Markov factorization
    at time 0: numerator B_{-N}(x) * Z^0_{0,M}, denominator Z^x_{-N,M}.

    With far_radius set, also reports the part of the sum coming from
    base points with Euclidean norm >= far_radius."""
    if N < 0 or M < 0:
        raise ValueError("N and M must be >= 0")
    bband, fband = _qn_bands(params, env, N, M)
    bres = _run_backward(params, env, bband, strict=False, keep=True)
    fres = _run_backward(params, env, fband, strict=True, keep=True)
    b, b_off = bres[0]
    f, f_off = fres[0]
    if len(bband.layers[0]) != len(fband.layers[0]):
        raise AssertionError("numerator/denominator base layers misaligned")
    # Z^0_{0,M} read off the same free sweep at (0, 0)
    zero_layer = N  # index of t=0 within the free band
    fv0, fo0 = fres[zero_layer]
    lay0 = fband.layers[zero_layer]
    origin_code = env.cone.encode(_origin(env.cone))
    pos = int(np.searchsorted(lay0.codes, origin_code))
    z00 = float(fv0[pos])
    contrib = b / f
    scale = z00 * math.exp(b_off + fo0 - f_off)
    q = float(contrib.sum()) * scale
    far = None
    if far_radius is not None:
        base = bband.layers[0].coords.astype(np.float64)
        mask = (base ** 2).sum(axis=1) >= far_radius ** 2
        far = float(contrib[mask].sum()) * scale
    return DensityValue(q=q, far_mass=far)


def limit_density(params, env, K, M_opt=None):
    """Finite-horizon proxy for the limiting particle-view density:
    backward W over [-K, 0] times exp(beta eta(0,0) - lambda), optionally
    times the forward factor W_{0,M_opt}(0)."""
    origin = _origin(env.cone)
    bw = backward_W(params, env, -K, 0, origin)
    eta00 = env.value_at_site(0, origin)
    out = bw * math.exp(params.beta * eta00 - params.lam)
    if M_opt:
        out *= normalized_W(params, env, 0, M_opt, origin)
    return out


def llt_remainder(params, env, M, N, x, y, l=None):
    """Local-limit-theorem remainder
    R = W(x|y) - W_{M,M+l}(x) * backward_W_{N-l,N}(y) * e^{beta eta(N,y)-lambda}."""
    span = N - M
    if l is None:
        l = default_llt_l(span)
    if not 0 < l < span / 2:
        raise ValueError("need 0 < l < (N - M)/2")
    cone = env.cone
    x = _as_site(cone, x)
    y = _as_site(cone, y)
    cond = conditional_W(params, env, M, N, x, y)
    f_fwd = normalized_W(params, env, M, M + l, x)
    f_bwd = backward_W(params, env, N - l, N, y)
    f_site = math.exp(params.beta * env.value_at_site(N, y) - params.lam)
    return LltRemainder(value=cond - f_fwd * f_bwd * f_site,
                        conditional=cond, forward_factor=f_fwd,
                        backward_factor=f_bwd, site_factor=f_site)


def h_transform_kernel(params, env, N, x, horizon):
    """One-step transition law of the infinite-horizon polymer, with the
    limit partition function approximated at the finite horizon."""
    cone = env.cone
    x = _as_site(cone, x)
    if horizon <= N + 1:
        raise ValueError("horizon must exceed N + 1")
    key = ("ht", N, tuple(x), horizon)
    times = range(N, horizon + 1)
    cfn = lambda t: [(x, t - N + 1)]
    if key not in cone._cache:
        _check_cover(cone, times, cfn, "h-transform kernel")
    band = _get_band(cone, key, times, cfn)
    res = _run_backward(params, env, band, strict=True, keep=True)
    f_n, off_n = res[0]
    f_n1, off_n1 = res[1]
    lay_n = band.layers[0]
    lay_n1 = band.layers[1]
    code = cone.encode(x)
    pos_x = int(np.searchsorted(lay_n.codes, code))
    if pos_x >= len(lay_n.codes) or lay_n.codes[pos_x] != code:
        raise WindowError(f"site {tuple(x)} not admissible at time {N}")
    w = env.weights_at(lay_n1.t, lay_n1.local_idx, params.beta)
    inv = 1.0 / (2 * params.d)
    probs = inv * w * f_n1 * math.exp(off_n1 - off_n) / float(f_n[pos_x])
    return lay_n1.coords.copy(), probs
