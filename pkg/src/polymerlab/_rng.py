"""Counter-based random number streams.

Every disorder value is a pure function of (master_seed, sample_index,
site_index), so fields can be generated lazily, slice by slice, in any
order, on any number of workers, and always come out bit-identical.

The generator is a keyed splitmix64: the site counter is multiplied into
the Weyl sequence, the derived state is run through the splitmix64
finalizer, and the resulting 64-bit word is mapped to the target law.
Gaussian variates use Wichura's AS241 inverse normal CDF (double
precision) rather than a rejection method, so the mapping from counter to
value is deterministic and platform-stable.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_KEY_SALT = np.uint64(0xD1B54A32D192ED03)

LAW_GAUSSIAN = 0
LAW_UNIFORM = 1
LAW_RADEMACHER = 2


@njit(cache=True, inline="always")
def _sm64(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def derive_key(master_seed, sample_index):
    """Mix (master_seed, sample_index) into one 64-bit stream key."""
    a = _sm64(np.uint64(master_seed) + _GOLDEN)
    b = _sm64(np.uint64(sample_index) * _GOLDEN + _KEY_SALT)
    return _sm64(a ^ (b + _GOLDEN))


@njit(cache=True, inline="always")
def _word_at(key, counter):
    return _sm64(key + (np.uint64(counter) + np.uint64(1)) * _GOLDEN)


@njit(cache=True, inline="always", fastmath=True)
def _uniform01(w):
    # 53-bit mantissa, offset so 0 and 1 are excluded
    return (np.float64(w >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)


@njit(cache=True, inline="always", fastmath=True)
def _ndtri(p):
    # Wichura's algorithm AS241, routine PPND16.
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                    + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                  + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                + 1.3314166789178437745e2) * r + 3.3871328727963666080)
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                    + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                  + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
                + 4.2313330701600911252e1) * r + 1.0)
        return q * num / den
    if q < 0.0:
        r = p
    else:
        r = 1.0 - p
    r = np.sqrt(-np.log(r))
    if r <= 5.0:
        r = r - 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258) * r
                  + 3.64784832476320460504) * r + 5.76949722146069140550) * r
                + 4.63033784615654529590) * r + 1.42343711074968357734)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940) * r
                + 2.05319162663775882187) * r + 1.0)
    else:
        r = r - 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580) * r
                + 5.46378491116411436990) * r + 6.65790464350110377720)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    x = num / den
    if q < 0.0:
        return -x
    return x


@njit(cache=True, inline="always", fastmath=True)
def _variate(key, counter, law_id):
    w = _word_at(key, counter)
    if law_id == LAW_GAUSSIAN:
        return _ndtri(_uniform01(w))
    if law_id == LAW_UNIFORM:
        return 2.0 * _uniform01(w) - 1.0
    # Rademacher: top bit picks the sign
    if w >> np.uint64(63):
        return 1.0
    return -1.0


@njit(cache=True, fastmath=True)
def site_values(key, counters, law_id):
    """Disorder values at the given site counters."""
    out = np.empty(counters.shape[0], dtype=np.float64)
    for i in range(counters.shape[0]):
        out[i] = _variate(key, counters[i], law_id)
    return out


@njit(cache=True, fastmath=True)
def site_weights(key, counters, law_id, beta):
    """exp(beta * eta) at the given site counters, in one fused pass."""
    out = np.empty(counters.shape[0], dtype=np.float64)
    for i in range(counters.shape[0]):
        out[i] = np.exp(beta * _variate(key, counters[i], law_id))
    return out


@njit(cache=True)
def uniform_words(key, counters):
    out = np.empty(counters.shape[0], dtype=np.uint64)
    for i in range(counters.shape[0]):
        out[i] = _word_at(key, counters[i])
    return out


def ndtri(p):
    """AS241 inverse normal CDF, vectorized (test/reference entry point)."""
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    return _ndtri_vec(p)


@njit(cache=True, fastmath=True)
def _ndtri_vec(p):
    out = np.empty(p.shape[0], dtype=np.float64)
    for i in range(p.shape[0]):
        out[i] = _ndtri(p[i])
    return out


@njit(cache=True, fastmath=True)
def gather_arrival(key, counters, law_id, beta, prev, nbr, scale):
    """Fused forward DP step: neighbor gather from the previous slice
    times the freshly generated arrival weight exp(beta * eta)."""
    n = counters.shape[0]
    m = nbr.shape[1]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        s = 0.0
        for k in range(m):
            j = nbr[i, k]
            if j >= 0:
                s += prev[j]
        if s != 0.0:
            s *= scale * np.exp(beta * _variate(key, counters[i], law_id))
        out[i] = s
    return out


@njit(cache=True, fastmath=True)
def gather_departure(key, counters_next, law_id, beta, vnext, nbr, scale):
    """Fused backward DP step: weight the next slice by its freshly
    generated exp(beta * eta) and gather into the current slice."""
    m = vnext.shape[0]
    g = np.empty(m, dtype=np.float64)
    for j in range(m):
        if vnext[j] != 0.0:
            g[j] = vnext[j] * np.exp(beta * _variate(key, counters_next[j], law_id))
        else:
            g[j] = 0.0
    n = nbr.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        s = 0.0
        for k in range(nbr.shape[1]):
            jj = nbr[i, k]
            if jj >= 0:
                s += g[jj]
        out[i] = s * scale
    return out
