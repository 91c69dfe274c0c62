"""Shared fixtures and brute-force oracles.

The oracles enumerate all (2d)^N nearest-neighbor step sequences
explicitly and reduce them with plain numpy, independently of the
engine's banded sweeps; agreement is therefore evidence for the dynamic
programming, not a tautology.
"""

import math
from itertools import product

import numpy as np
import pytest

from polymerlab import disorder
from polymerlab.lattice import build_cone, n_step_distribution


def step_deltas(d):
    deltas = np.zeros((2 * d, d), dtype=np.int64)
    for axis in range(d):
        deltas[2 * axis, axis] = 1
        deltas[2 * axis + 1, axis] = -1
    return deltas


def all_paths(d, n):
    """(P, n, d) displacements of every n-step nearest-neighbor path."""
    seqs = np.array(list(product(range(2 * d), repeat=n)), dtype=np.int64)
    if n == 0:
        return np.zeros((1, 0, d), dtype=np.int64)
    return np.cumsum(step_deltas(d)[seqs], axis=1)


def field_lookup(env, t, sites):
    """Environment values at the (P, d) integer sites of slice t."""
    cone = env.cone
    sl = cone.slice_at(t)
    codes = cone.encode(np.asarray(sites, dtype=np.int64))
    idx = np.searchsorted(sl.codes, codes)
    if np.any(idx >= len(sl)) or np.any(sl.codes[idx] != codes):
        raise KeyError(f"oracle site outside window at t={t}")
    return env.values_at(t, idx.astype(np.int64))


def brute_path_weights(params, env, M, x, n):
    """Endpoints (P, d) and weights exp(beta sum eta) of all n-step paths
    started at (M, x), environment read at arrival sites."""
    x = np.asarray(x, dtype=np.int64)
    pos = all_paths(params.d, n) + x
    logw = np.zeros(pos.shape[0])
    for t in range(n):
        logw += params.beta * field_lookup(env, M + t + 1, pos[:, t])
    return pos[:, -1] if n > 0 else x[None, :], np.exp(logw)


def brute_endpoint_sums(params, env, M, x, N):
    """Dict endpoint -> (2d)^-(N-M) sum over paths of exp(beta sum eta)."""
    ends, w = brute_path_weights(params, env, M, x, N - M)
    scale = (2.0 * params.d) ** -(N - M)
    acc = {}
    for e, wi in zip(map(tuple, ends.tolist()), w):
        acc[e] = acc.get(e, 0.0) + wi * scale
    return acc


def brute_W(params, env, M, N, x):
    sums = brute_endpoint_sums(params, env, M, x, N)
    return sum(sums.values()) * math.exp(-(N - M) * params.lam)


def brute_conditional_W(params, env, M, N, x, y):
    sums = brute_endpoint_sums(params, env, M, x, N)
    p = n_step_distribution(params.d, N - M).mass(np.asarray(y) - np.asarray(x))
    return sums.get(tuple(y), 0.0) * math.exp(-(N - M) * params.lam) / p


def brute_marginals(params, env, M, x, N):
    """List of dicts: mu^x_{M,N}(omega_t = z) for t = M..N."""
    x = np.asarray(x, dtype=np.int64)
    pos = all_paths(params.d, N - M) + x
    logw = np.zeros(pos.shape[0])
    for t in range(N - M):
        logw += params.beta * field_lookup(env, M + t + 1, pos[:, t])
    w = np.exp(logw)
    z = w.sum()
    out = [{tuple(x.tolist()): 1.0}]
    for t in range(N - M):
        marg = {}
        for site, wi in zip(map(tuple, pos[:, t].tolist()), w):
            marg[site] = marg.get(site, 0.0) + wi / z
        out.append(marg)
    return out


def brute_backward_W(params, env, M, N, y):
    """Path sum from (N, y) downward, environment read at N-1, ..., M."""
    y = np.asarray(y, dtype=np.int64)
    pos = all_paths(params.d, N - M) + y
    logw = np.zeros(pos.shape[0])
    for k in range(N - M):
        logw += params.beta * field_lookup(env, N - k - 1, pos[:, k])
    scale = (2.0 * params.d) ** -(N - M)
    return float(np.exp(logw).sum()) * scale * math.exp(-(N - M) * params.lam)


def brute_qNM(params, env, N, M):
    """sum_x mu^x_{-N,M}(omega_0 = 0) by full path enumeration per base."""
    d = params.d
    span = N + M
    rel = all_paths(d, span)
    origin = np.zeros(d, dtype=np.int64)
    bases = env.cone.slice_at(-N).coords.astype(np.int64)
    bases = bases[np.abs(bases).sum(axis=1) <= N]
    total = 0.0
    for x in bases:
        pos = rel + x
        logw = np.zeros(pos.shape[0])
        for t in range(span):
            logw += params.beta * field_lookup(env, -N + t + 1, pos[:, t])
        w = np.exp(logw)
        den = w.sum()
        hit = (pos[:, N - 1] == origin).all(axis=1)
        total += w[hit].sum() / den
    return total


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance summary")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def gaussian_law():
    return disorder.DisorderLaw("gaussian")


@pytest.fixture(scope="session")
def uniform_law():
    return disorder.DisorderLaw("uniform")


@pytest.fixture(scope="session")
def rademacher_law():
    return disorder.DisorderLaw("rademacher")


def make_env(d, t_min, t_max, anchor, law_kind="gaussian", seed=0, index=0):
    cone = build_cone(d, t_min, t_max, anchor)
    return disorder.sample_environment(cone, disorder.DisorderLaw(law_kind),
                                       seed, index)
