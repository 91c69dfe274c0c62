"""Environment laws, cumulants, and disorder fields on cone windows.

Fields sampled from a (master_seed, sample_index) pair are lazy: any
slice, or any subset of sites, can be materialized directly from the
counter stream, so workers never need to exchange or precompute whole
fields and always agree bit-for-bit.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .lattice import LatticeCone, build_cone

GAUSSIAN = "gaussian"
UNIFORM = "uniform"
RADEMACHER = "rademacher"

_LAW_IDS = {GAUSSIAN: 0, UNIFORM: 1, RADEMACHER: 2}
_LAW_NAMES = {v: k for k, v in _LAW_IDS.items()}

_MAGIC = b"DPRE"
_VERSION = 1
_HEADER = struct.Struct("<4sHHiiiBQQQ")

MAX_ENUMERABLE_SITES = 24


class FieldFormatError(Exception):
    """Field file is corrupt or has an unsupported version."""


@dataclass(frozen=True)
class DisorderLaw:
    """Marginal law of one environment value.

    Supported kinds: standard Gaussian, Uniform on [-1, 1], Rademacher
    (+-1 equiprobable).  The bounded kinds have |eta| <= 1.
    """

    kind: str

    def __post_init__(self):
        if self.kind not in _LAW_IDS:
            raise ValueError(f"unknown disorder law {self.kind!r}")

    @property
    def law_id(self):
        return _LAW_IDS[self.kind]

    @property
    def bounded(self):
        return self.kind in (UNIFORM, RADEMACHER)


def lambda_of_beta(law, beta):
    """Log moment generating function of one disorder value."""
    beta = float(beta)
    if law.kind == GAUSSIAN:
        return 0.5 * beta * beta
    if law.kind == RADEMACHER:
        # log cosh(beta), overflow-safe
        return float(np.logaddexp(beta, -beta)) - math.log(2.0)
    # Uniform[-1,1]: log(sinh(beta)/beta)
    if abs(beta) < 1e-5:
        b2 = beta * beta
        return math.log1p(b2 / 6.0 + b2 * b2 / 120.0)
    return math.log(math.sinh(abs(beta)) / abs(beta))


@dataclass(frozen=True)
class ModelParams:
    """Dimension, temperature and the derived cumulants of the model."""

    d: int
    beta: float
    law: DisorderLaw
    lam: float       # lambda(beta)
    lam2: float      # lambda(2 beta)
    gamma: float     # lambda(2 beta) - 2 lambda(beta)

    @classmethod
    def create(cls, d, beta, law):
        if beta < 0:
            raise ValueError("beta must be >= 0")
        lam = lambda_of_beta(law, beta)
        lam2 = lambda_of_beta(law, 2.0 * beta)
        return cls(d=d, beta=float(beta), law=law, lam=lam, lam2=lam2,
                   gamma=lam2 - 2.0 * lam)


@dataclass
class EnvironmentField:
    """Disorder values on the sites of a cone window.

    Sampled fields carry only their stream key and generate values on
    demand; explicit fields (loaded, enumerated, reversed) store the
    full value array in canonical site order (t ascending, lexicographic
    within a slice).
    """

    cone: LatticeCone
    law: DisorderLaw
    master_seed: int = 0
    sample_index: int = 0
    provenance: str = "explicit"
    _values: np.ndarray = field(default=None, repr=False)
    _key: np.uint64 = field(default=None, repr=False)

    @property
    def lazy(self):
        return self._values is None

    @property
    def values(self):
        """All values in canonical order (materializes lazy fields)."""
        if self._values is None:
            counters = np.arange(self.cone.site_count, dtype=np.int64)
            self._values = _rng.site_values(self._key, counters, self.law.law_id)
        return self._values

    def values_at(self, t, local_idx):
        """Values at the given within-slice indices of slice t."""
        sl = self.cone.slice_at(t)
        if self._values is not None:
            return self._values[sl.offset + local_idx]
        counters = (sl.offset + local_idx).astype(np.int64)
        return _rng.site_values(self._key, counters, self.law.law_id)

    def weights_at(self, t, local_idx, beta):
        """exp(beta * eta) at the given within-slice indices of slice t."""
        sl = self.cone.slice_at(t)
        if self._values is not None:
            return np.exp(beta * self._values[sl.offset + local_idx])
        counters = (sl.offset + local_idx).astype(np.int64)
        return _rng.site_weights(self._key, counters, self.law.law_id, beta)

    def weight_stream(self, t, local_idx):
        """(key, site counters, law id) for fused kernels; None when the
        field stores explicit values."""
        if self._values is not None:
            return None
        sl = self.cone.slice_at(t)
        return self._key, (sl.offset + local_idx).astype(np.int64), self.law.law_id

    def value_at_site(self, t, x):
        idx = self.cone.local_index(t, x)
        return float(self.values_at(t, np.array([idx], dtype=np.int64))[0])


def sample_environment(cone, law, master_seed, sample_index):
    """I.i.d. field on the cone; value at site i depends only on
    (master_seed, sample_index, i), independent of evaluation order."""
    key = np.uint64(_rng.derive_key(int(master_seed), int(sample_index)))
    return EnvironmentField(cone=cone, law=law, master_seed=int(master_seed),
                            sample_index=int(sample_index),
                            provenance="sampled", _key=key)


def enumerate_environments(cone, law):
    """All sign assignments of a Rademacher field, with probabilities.

    Exact Q-expectation oracle for tiny cones; refuses more than
    MAX_ENUMERABLE_SITES sites.
    """
    if law.kind != RADEMACHER:
        raise ValueError("exact enumeration is only available for the Rademacher law")
    n = cone.site_count
    if n > MAX_ENUMERABLE_SITES:
        raise ValueError(f"cone has {n} sites; enumeration is capped at {MAX_ENUMERABLE_SITES}")
    prob = 0.5 ** n
    bits = np.arange(n)
    for k in range(1 << n):
        values = np.where((k >> bits) & 1, 1.0, -1.0)
        yield EnvironmentField(cone=cone, law=law, sample_index=k,
                               provenance=f"enumerated({k})", _values=values), prob


def time_reverse(env):
    """Field with value(t, x) = original value(-t, x), on the mirrored cone."""
    cone = env.cone
    t_a, x_a = cone.anchor
    mirrored = build_cone(cone.d, -cone.t_max, -cone.t_min, (-t_a, x_a))
    values = np.empty(mirrored.site_count)
    for t in range(mirrored.t_min, mirrored.t_max + 1):
        dst = mirrored.slice_at(t)
        src = cone.slice_at(-t)
        if len(dst) != len(src) or not np.array_equal(dst.coords, src.coords):
            raise ValueError(f"reflected slice t={t} not covered by the stored window")
        idx = np.arange(len(src), dtype=np.int64)
        values[dst.offset:dst.offset + len(dst)] = env.values_at(-t, idx)
    return EnvironmentField(cone=mirrored, law=env.law,
                            master_seed=env.master_seed,
                            sample_index=env.sample_index,
                            provenance=f"reversed[{env.provenance}]",
                            _values=values)


def save_field(env, path):
    """Write a field to the versioned DPRE binary format."""
    cone = env.cone
    t_a, x_a = cone.anchor
    if any(c != 0 for c in x_a):
        raise ValueError("field files only support origin-anchored cones")
    header = _HEADER.pack(_MAGIC, _VERSION, cone.d, cone.t_min, cone.t_max,
                          t_a, env.law.law_id, env.master_seed,
                          env.sample_index, cone.site_count)
    data = np.ascontiguousarray(env.values, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data)


def load_field(path):
    """Read a field written by save_field; round-trip is bit-exact."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise FieldFormatError("truncated header")
        magic, version, d, t_min, t_max, t_anchor, law_id, seed, index, count = \
            _HEADER.unpack(raw)
        if magic != _MAGIC:
            raise FieldFormatError(f"bad magic {magic!r}")
        if version != _VERSION:
            raise FieldFormatError(f"unsupported version {version}")
        if law_id not in _LAW_NAMES:
            raise FieldFormatError(f"unknown law id {law_id}")
        payload = fh.read(count * 8)
        if len(payload) != count * 8:
            raise FieldFormatError("truncated payload")
        if fh.read(1):
            raise FieldFormatError("trailing bytes after payload")
    cone = build_cone(d, t_min, t_max, (t_anchor, (0,) * d))
    if cone.site_count != count:
        raise FieldFormatError(f"site count {count} does not match window geometry "
                               f"({cone.site_count})")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return EnvironmentField(cone=cone, law=DisorderLaw(_LAW_NAMES[law_id]),
                            master_seed=seed, sample_index=index,
                            provenance="loaded", _values=values)
