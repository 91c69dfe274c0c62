import math

import numpy as np
import pytest

from polymerlab import engine
from polymerlab.disorder import DisorderLaw, ModelParams, time_reverse
from polymerlab.engine import (FORCE_RENORM, UnreachableEndpointError,
                               WindowError, backward_W, backward_free,
                               conditional_W, density_qN, density_qNM,
                               endpoint_mean_square, endpoint_square_by_coord,
                               forward_point_to_point, h_transform_kernel,
                               limit_density, llt_remainder, normalized_W,
                               partition_set, path_marginals, replica_overlap)
from polymerlab.lattice import build_cone, n_step_distribution

from conftest import (brute_backward_W, brute_conditional_W,
                      brute_endpoint_sums, brute_marginals, brute_qNM,
                      brute_W, make_env)

CASES = [
    (1, "gaussian", 0.7, 4),
    (1, "rademacher", 0.5, 4),
    (2, "uniform", 0.9, 3),
    (2, "gaussian", 0.4, 4),
    (3, "gaussian", 0.3, 3),
]


def params_env(d, kind, beta, n, seed=0, index=0, t_lo=0):
    params = ModelParams.create(d, beta, DisorderLaw(kind))
    env = make_env(d, t_lo, t_lo + n, (t_lo, (0,) * d), law_kind=kind,
                   seed=seed, index=index)
    return params, env


class TestForwardSweep:
    @pytest.mark.parametrize("d,kind,beta,n", CASES)
    def test_endpoint_sums_match_enumeration(self, d, kind, beta, n):
        params, env = params_env(d, kind, beta, n, seed=1)
        slices = forward_point_to_point(params, env, (0, (0,) * d), n)
        oracle = brute_endpoint_sums(params, env, 0, (0,) * d, n)
        end = slices[-1]
        assert len(end.coords) >= len(oracle)
        for i, x in enumerate(map(tuple, end.coords.tolist())):
            want = oracle.get(x, 0.0)
            got = end.weights[i] * math.exp(end.log_offset)
            assert got == pytest.approx(want, rel=1e-12, abs=1e-300)

    def test_beta_zero_reproduces_walk_law(self):
        params, env = params_env(2, "gaussian", 0.0, 5)
        slices = forward_point_to_point(params, env, (0, (0, 0)), 5)
        dist = n_step_distribution(2, 5)
        for i, x in enumerate(map(tuple, slices[-1].coords.tolist())):
            got = slices[-1].weights[i] * math.exp(slices[-1].log_offset)
            assert got == pytest.approx(dist.mass(x), abs=1e-15)

    def test_intermediate_slices(self):
        params, env = params_env(1, "gaussian", 0.6, 4, seed=2)
        slices = forward_point_to_point(params, env, (0, (0,)), 4)
        for t in (1, 2, 3):
            oracle = brute_endpoint_sums(params, env, 0, (0,), t)
            for i, x in enumerate(map(tuple, slices[t].coords.tolist())):
                got = slices[t].weights[i] * math.exp(slices[t].log_offset)
                assert got == pytest.approx(oracle.get(x, 0.0), rel=1e-12)

    def test_start_outside_window(self):
        params, env = params_env(1, "gaussian", 0.5, 3)
        with pytest.raises((WindowError, KeyError)):
            forward_point_to_point(params, env, (0, (2,)), 3)


class TestNormalizedW:
    @pytest.mark.parametrize("d,kind,beta,n", CASES)
    def test_matches_enumeration(self, d, kind, beta, n):
        params, env = params_env(d, kind, beta, n, seed=3)
        got = normalized_W(params, env, 0, n, (0,) * d)
        assert got == pytest.approx(brute_W(params, env, 0, n, (0,) * d),
                                    rel=1e-12)

    def test_degenerate_horizon(self):
        params, env = params_env(2, "gaussian", 0.8, 3)
        assert normalized_W(params, env, 0, 0, (0, 0)) == 1.0

    def test_one_step_closed_form(self):
        params, env = params_env(3, "gaussian", 0.5, 2, seed=4)
        acc = 0.0
        for axis in range(3):
            for s in (1, -1):
                e = [0, 0, 0]
                e[axis] = s
                acc += math.exp(params.beta * env.value_at_site(1, tuple(e)))
        want = acc / 6.0 * math.exp(-params.lam)
        assert normalized_W(params, env, 0, 1, (0, 0, 0)) == pytest.approx(
            want, rel=1e-14)

    def test_beta_zero_is_one(self):
        params, env = params_env(3, "gaussian", 0.0, 6)
        assert normalized_W(params, env, 0, 6, (0, 0, 0)) == pytest.approx(
            1.0, abs=1e-13)


class TestBackwardW:
    @pytest.mark.parametrize("d,kind,beta,n", [(1, "gaussian", 0.7, 4),
                                               (2, "uniform", 0.9, 3)])
    def test_matches_enumeration(self, d, kind, beta, n):
        params = ModelParams.create(d, beta, DisorderLaw(kind))
        env = make_env(d, -2 * n, 0, (-2 * n, (0,) * d), law_kind=kind, seed=5)
        got = backward_W(params, env, -n, 0, (0,) * d)
        assert got == pytest.approx(
            brute_backward_W(params, env, -n, 0, (0,) * d), rel=1e-12)

    def test_equals_forward_in_reversed_field(self):
        params = ModelParams.create(2, 0.6, DisorderLaw("gaussian"))
        env = make_env(2, -8, 0, (-8, (0, 0)), seed=6)
        rev = time_reverse(env)
        got = backward_W(params, env, -4, 0, (0, 0))
        want = normalized_W(params, rev, 0, 4, (0, 0))
        assert got == pytest.approx(want, rel=1e-12)

    def test_window_refusal(self):
        # the backward reachable set leaves a forward-opening cone
        params, env = params_env(2, "gaussian", 0.5, 6)
        with pytest.raises(WindowError):
            backward_W(params, env, 2, 6, (0, 0))


class TestConditionalW:
    @pytest.mark.parametrize("d,kind,beta,n", [(1, "gaussian", 0.7, 4),
                                               (2, "gaussian", 0.4, 4),
                                               (3, "rademacher", 0.5, 3)])
    def test_matches_enumeration(self, d, kind, beta, n):
        params, env = params_env(d, kind, beta, n, seed=7)
        dist = n_step_distribution(d, n)
        for y in list(dist.masses)[::3]:
            got = conditional_W(params, env, 0, n, (0,) * d, y)
            want = brute_conditional_W(params, env, 0, n, (0,) * d, y)
            assert got == pytest.approx(want, rel=1e-11)

    def test_total_expectation_identity(self):
        # sum_y p(y) W(x|y) recovers the free W
        params, env = params_env(2, "gaussian", 0.8, 4, seed=8)
        dist = n_step_distribution(2, 4)
        acc = sum(p * conditional_W(params, env, 0, 4, (0, 0), y)
                  for y, p in dist.masses.items())
        assert acc == pytest.approx(normalized_W(params, env, 0, 4, (0, 0)),
                                    rel=1e-12)

    def test_unreachable_endpoints(self):
        params, env = params_env(2, "gaussian", 0.5, 3)
        with pytest.raises(UnreachableEndpointError):
            conditional_W(params, env, 0, 3, (0, 0), (5, 0))   # too far
        with pytest.raises(UnreachableEndpointError):
            conditional_W(params, env, 0, 3, (0, 0), (2, 0))   # wrong parity

    def test_pinned_degenerate(self):
        params, env = params_env(1, "gaussian", 0.9, 2)
        assert conditional_W(params, env, 0, 0, (0,), (0,)) == 1.0


class TestMarginals:
    @pytest.mark.parametrize("d,kind,beta,n", CASES[:4])
    def test_match_enumeration(self, d, kind, beta, n):
        params, env = params_env(d, kind, beta, n, seed=9)
        marg = path_marginals(params, env, 0, n, (0,) * d)
        oracle = brute_marginals(params, env, 0, (0,) * d, n)
        for t in range(n + 1):
            assert marg[t].weights.sum() == pytest.approx(1.0, abs=1e-12)
            for i, x in enumerate(map(tuple, marg[t].coords.tolist())):
                assert marg[t].weights[i] == pytest.approx(
                    oracle[t].get(x, 0.0), rel=1e-11, abs=1e-14)

    def test_base_is_delta(self):
        params, env = params_env(2, "gaussian", 0.7, 3, seed=10)
        marg = path_marginals(params, env, 0, 3, (0, 0))
        assert marg[0].weights.tolist() == [1.0]

    def test_replica_overlap_beta_zero(self):
        # at beta = 0 the overlap is the sum of walk collision probabilities
        params, env = params_env(2, "gaussian", 0.0, 5)
        got = replica_overlap(params, env, 0, 5, (0, 0))
        want = 0.0
        for t in range(1, 6):
            dist = n_step_distribution(2, t)
            want += sum(p * p for p in dist.masses.values())
        assert got == pytest.approx(want, abs=1e-13)

    def test_replica_overlap_vs_oracle(self):
        params, env = params_env(1, "gaussian", 0.8, 4, seed=11)
        oracle = brute_marginals(params, env, 0, (0,), 4)
        want = sum(sum(p * p for p in m.values()) for m in oracle[1:])
        got = replica_overlap(params, env, 0, 4, (0,))
        assert got == pytest.approx(want, rel=1e-12)


class TestPartitionSet:
    def test_consistency(self):
        params, env = params_env(2, "gaussian", 0.6, 4, seed=12)
        ps = partition_set(params, env, 0, 4, (0, 0))
        assert ps.Z == pytest.approx(math.exp(ps.log_Z), rel=1e-14)
        assert ps.W == pytest.approx(ps.Z * math.exp(-4 * params.lam), rel=1e-14)
        assert ps.point_to_point.total() == pytest.approx(ps.Z, rel=1e-12)
        oracle = brute_endpoint_sums(params, env, 0, (0, 0), 4)
        assert ps.Z == pytest.approx(sum(oracle.values()), rel=1e-12)
        assert len(ps.marginals) == 5


class TestBackwardFree:
    def test_matches_per_site_forward(self):
        params, env = params_env(1, "gaussian", 0.7, 4, seed=13)
        free = backward_free(params, env, 4, 0)
        sl = env.cone.slice_at(1)
        for i, x in enumerate(map(tuple, sl.coords.tolist())):
            want = sum(brute_endpoint_sums(params, env, 1, x, 4).values())
            assert free[1].weights[i] * math.exp(free[1].log_offset) == \
                pytest.approx(want, rel=1e-12)

    def test_needs_forward_opening_window(self):
        params, env = params_env(1, "gaussian", 0.5, 4, t_lo=-8)
        env_back = make_env(1, -4, 0, (0, (0,)))
        with pytest.raises(WindowError):
            backward_free(params, env_back, 0, -4)


class TestDensities:
    @pytest.mark.parametrize("d,kind,beta,n,m", [(1, "gaussian", 0.7, 3, 0),
                                                 (1, "uniform", 0.9, 3, 2),
                                                 (2, "gaussian", 0.4, 2, 2),
                                                 (2, "rademacher", 0.5, 3, 0)])
    def test_match_enumeration(self, d, kind, beta, n, m):
        params = ModelParams.create(d, beta, DisorderLaw(kind))
        env = make_env(d, -2 * n, m, (-2 * n, (0,) * d), law_kind=kind, seed=14)
        got = density_qNM(params, env, n, m).q
        assert got == pytest.approx(brute_qNM(params, env, n, m), rel=1e-11)

    def test_qn_is_qnm_at_zero(self):
        params = ModelParams.create(2, 0.5, DisorderLaw("gaussian"))
        env = make_env(2, -6, 0, (-6, (0, 0)), seed=15)
        assert density_qN(params, env, 3).q == density_qNM(params, env, 3, 0).q

    def test_beta_zero_is_exactly_one(self):
        params = ModelParams.create(2, 0.0, DisorderLaw("gaussian"))
        env = make_env(2, -8, 2, (-8, (0, 0)), seed=16)
        assert density_qNM(params, env, 4, 2).q == pytest.approx(1.0, abs=1e-12)

    def test_far_mass_partition(self):
        params = ModelParams.create(1, 0.8, DisorderLaw("gaussian"))
        env = make_env(1, -6, 0, (-6, (0,)), seed=17)
        dv_all = density_qNM(params, env, 3, 0, far_radius=0.0)
        assert dv_all.far_mass == pytest.approx(dv_all.q, rel=1e-14)
        dv_none = density_qNM(params, env, 3, 0, far_radius=100.0)
        assert dv_none.far_mass == 0.0

    def test_limit_density_factorization(self):
        params = ModelParams.create(2, 0.4, DisorderLaw("gaussian"))
        env = make_env(2, -8, 4, (-8, (0, 0)), seed=18)
        bw = backward_W(params, env, -4, 0, (0, 0))
        fw = normalized_W(params, env, 0, 3, (0, 0))
        site = math.exp(params.beta * env.value_at_site(0, (0, 0)) - params.lam)
        assert limit_density(params, env, 4) == pytest.approx(bw * site,
                                                              rel=1e-14)
        assert limit_density(params, env, 4, 3) == pytest.approx(
            bw * site * fw, rel=1e-14)


class TestEndpointMoments:
    def test_beta_zero_diffusivity_exact(self):
        for d in (1, 2, 3):
            params, env = params_env(d, "gaussian", 0.0, 6)
            got = endpoint_mean_square(params, env, 0, 6, (0,) * d)
            assert got == pytest.approx(6.0, abs=1e-12)
            second, cross = endpoint_square_by_coord(params, env, 0, 6, (0,) * d)
            np.testing.assert_allclose(second, 6.0 / d, atol=1e-12)
            if cross.size:
                np.testing.assert_allclose(cross, 0.0, atol=1e-12)

    def test_vs_marginals(self):
        params, env = params_env(2, "gaussian", 0.9, 4, seed=19)
        marg = path_marginals(params, env, 0, 4, (0, 0))[-1]
        want = sum(w * sum(c * c for c in x)
                   for x, w in zip(marg.coords.tolist(), marg.weights))
        got = endpoint_mean_square(params, env, 0, 4, (0, 0))
        assert got == pytest.approx(want, rel=1e-13)


class TestLltRemainder:
    def test_factor_identity(self):
        params = ModelParams.create(2, 0.4, DisorderLaw("gaussian"))
        env = make_env(2, -16, 0, (-16, (0, 0)), seed=20)
        r = llt_remainder(params, env, -8, 0, (0, 0), (0, 0), l=2)
        assert r.value == pytest.approx(
            r.conditional - r.forward_factor * r.backward_factor * r.site_factor,
            abs=1e-15)
        assert r.forward_factor > 0 and r.backward_factor > 0

    def test_beta_zero_vanishes(self):
        params = ModelParams.create(2, 0.0, DisorderLaw("gaussian"))
        env = make_env(2, -16, 0, (-16, (0, 0)), seed=21)
        for y in ((0, 0), (2, 0)):
            r = llt_remainder(params, env, -8, 0, y, (0, 0), l=2)
            assert abs(r.value) < 1e-12

    def test_l_validation(self):
        params = ModelParams.create(1, 0.5, DisorderLaw("gaussian"))
        env = make_env(1, -8, 0, (-8, (0,)), seed=22)
        with pytest.raises(ValueError):
            llt_remainder(params, env, -4, 0, (0,), (0,), l=2)
        with pytest.raises(ValueError):
            llt_remainder(params, env, -4, 0, (0,), (0,), l=0)


class TestHTransform:
    def test_rows_sum_to_one(self):
        params = ModelParams.create(3, 0.6, DisorderLaw("gaussian"))
        for i in range(5):
            env = make_env(3, 0, 10, (0, (0, 0, 0)), seed=23, index=i)
            coords, probs = h_transform_kernel(params, env, 2, (0, 0, 0), 8)
            assert probs.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(probs > 0)
            assert coords.shape == (6, 3)

    def test_matches_ratio_oracle(self):
        params = ModelParams.create(1, 0.7, DisorderLaw("gaussian"))
        env = make_env(1, 0, 8, (0, (0,)), seed=24)
        coords, probs = h_transform_kernel(params, env, 2, (0,), 6)
        w_down = brute_W(params, env, 2, 6, (0,))
        for x, p in zip(map(tuple, coords.tolist()), probs):
            w_up = brute_W(params, env, 3, 6, x)
            eta = env.value_at_site(3, x)
            want = (0.5 * math.exp(params.beta * eta - params.lam)
                    * w_up / w_down)
            assert p == pytest.approx(want, rel=1e-11)

    def test_beta_zero_uniform(self):
        params = ModelParams.create(2, 0.0, DisorderLaw("gaussian"))
        env = make_env(2, 0, 8, (0, (0, 0)), seed=25)
        _, probs = h_transform_kernel(params, env, 2, (0, 0), 7)
        np.testing.assert_allclose(probs, 0.25, atol=1e-12)

    def test_horizon_validation(self):
        params = ModelParams.create(1, 0.5, DisorderLaw("gaussian"))
        env = make_env(1, 0, 4, (0, (0,)))
        with pytest.raises(ValueError):
            h_transform_kernel(params, env, 2, (0,), 3)


class TestScaleSafety:
    def test_force_renorm_invariance(self):
        params, env = params_env(2, "gaussian", 0.8, 6, seed=26)
        base = normalized_W(params, env, 0, 6, (0, 0))
        qbase = density_qNM(
            params, make_env(2, -8, 0, (-8, (0, 0)), seed=26), 4, 0).q
        engine.FORCE_RENORM = True
        try:
            forced = normalized_W(params, env, 0, 6, (0, 0))
            qforced = density_qNM(
                params, make_env(2, -8, 0, (-8, (0, 0)), seed=26), 4, 0).q
        finally:
            engine.FORCE_RENORM = False
        assert forced == pytest.approx(base, rel=1e-12)
        assert qforced == pytest.approx(qbase, rel=1e-12)

    def test_extreme_beta_stays_finite(self):
        params, env = params_env(1, "gaussian", 8.0, 30, seed=27)
        ps = partition_set(params, env, 0, 30, (0,))
        assert math.isfinite(ps.log_Z)
        assert ps.log_Z > 100.0     # far beyond unscaled float range in weights
        marg = ps.marginals[-1]
        assert marg.weights.sum() == pytest.approx(1.0, abs=1e-12)
