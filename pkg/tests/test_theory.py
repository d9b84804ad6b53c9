from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import tv_by_events
from safeproj.errors import InfeasibleProjectionError
from safeproj.metric import angular_distance
from safeproj.theory import (
    DiscreteGenerator,
    DiscretePromptSpace,
    Instance,
    ProjectionKernel,
    UnsafetyFunction,
    alignment_tv,
    brute_force_projection,
    build_projection_kernel,
    check_idempotence,
    check_kernel_spat,
    check_pointwise_spat,
    check_spat,
    expectation_gap,
    kernel_violations,
    nearest_sets,
    population_unsafety,
    project_conditionals,
    prompt_unsafety,
    random_instance,
    run_property_suite,
    safe_set,
    tv_discrete,
    tv_subset_sup,
)


def simplex(rng, n):
    p = rng.dirichlet(np.ones(n))
    return p / p.sum()


def space_from(emb, mu=None):
    emb = np.asarray(emb, dtype=float)
    n = emb.shape[0]
    mu = np.full(n, 1.0 / n) if mu is None else mu
    return DiscretePromptSpace(tuple(f"c{i}" for i in range(n)), tuple(f"t{i}" for i in range(n)), emb, mu)


@st.composite
def distributions(draw, n):
    w = draw(st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n).filter(lambda v: sum(v) > 1e-3))
    p = np.array(w) / sum(w)
    return p / p.sum()


class TestTypes:
    def test_generator_rows_must_be_stochastic(self):
        with pytest.raises(ValueError):
            DiscreteGenerator(np.array([[0.5, 0.6]]))
        with pytest.raises(ValueError):
            DiscreteGenerator(np.array([[1.5, -0.5]]))

    def test_unsafety_range(self):
        with pytest.raises(ValueError):
            UnsafetyFunction(np.array([0.2, 1.2]))

    def test_space_validation(self):
        with pytest.raises(ValueError):
            space_from([[1.0, 0.0], [0.0, 1.0]], mu=np.array([0.7, 0.7]))
        with pytest.raises(Exception):
            space_from([[1.0, 0.0], [0.0, 0.0]])


class TestFunctionals:
    def test_prompt_unsafety_examples(self):
        G = DiscreteGenerator(np.array([[0.0, 1.0, 0.0], [0.2, 0.3, 0.5]]))
        assert prompt_unsafety(G, UnsafetyFunction(np.zeros(3)), 1) == 0.0
        assert prompt_unsafety(G, UnsafetyFunction(np.array([0.1, 0.7, 0.3])), 0) == 0.7
        with pytest.raises(KeyError):
            prompt_unsafety(G, UnsafetyFunction(np.zeros(3)), 5)

    def test_population_unsafety_examples(self):
        G = DiscreteGenerator(np.array([[1.0, 0.0], [0.0, 1.0]]))
        U = UnsafetyFunction(np.array([0.2, 0.4]))
        assert population_unsafety(G, U, [0.5, 0.5]) == pytest.approx(0.3, abs=1e-15)
        assert population_unsafety(G, UnsafetyFunction(np.ones(2)), [0.5, 0.5]) == 1.0

    def test_against_summation_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n, m = rng.integers(1, 15, size=2)
            G = DiscreteGenerator(np.stack([simplex(rng, m) for _ in range(n)]))
            U = UnsafetyFunction(rng.uniform(size=m))
            mu = simplex(rng, n)
            per = [math.fsum(G.matrix[c, x] * U.values[x] for x in range(m)) for c in range(n)]
            for c in range(n):
                assert prompt_unsafety(G, U, c) == pytest.approx(per[c], abs=1e-12)
            assert population_unsafety(G, U, mu) == pytest.approx(math.fsum(mu[c] * per[c] for c in range(n)), abs=1e-12)

    def test_tv_examples(self):
        p = np.array([0.2, 0.3, 0.5])
        assert tv_discrete(p, p) == 0.0
        assert tv_discrete([1.0, 0.0], [0.0, 1.0]) == 1.0
        with pytest.raises(ValueError):
            tv_discrete([1.0, 0.0], [1.0, 0.0, 0.0])

    def test_tv_matches_event_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            n = int(rng.integers(1, 10))
            p, q = simplex(rng, n), simplex(rng, n)
            assert tv_discrete(p, q) == pytest.approx(tv_by_events(p, q), abs=1e-12)
            assert tv_subset_sup(p, q) == pytest.approx(tv_by_events(p, q), abs=1e-12)

    def test_alignment_examples(self):
        rng = np.random.default_rng(2)
        G = DiscreteGenerator(np.stack([simplex(rng, 4) for _ in range(3)]))
        assert alignment_tv(G, G, [0.2, 0.3, 0.5]) == 0.0
        a, b = simplex(rng, 4), simplex(rng, 4)
        single = alignment_tv(DiscreteGenerator(a[None]), DiscreteGenerator(b[None]), [1.0])
        assert single == tv_discrete(a, b)

    def test_alignment_against_direct_average(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n, m = rng.integers(1, 10, size=2)
            A = np.stack([simplex(rng, m) for _ in range(n)])
            B = np.stack([simplex(rng, m) for _ in range(n)])
            mu = simplex(rng, n)
            direct = math.fsum(mu[c] * 0.5 * math.fsum(abs(A[c] - B[c])) for c in range(n))
            assert alignment_tv(DiscreteGenerator(A), DiscreteGenerator(B), mu) == pytest.approx(direct, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12).flatmap(lambda n: st.tuples(distributions(n), distributions(n))))
def test_tv_equals_subset_sup_property(pq):
    p, q = pq
    assert abs(tv_discrete(p, q) - tv_subset_sup(p, q)) <= 1e-12


@settings(max_examples=300, deadline=None)
@given(
    st.integers(1, 12).flatmap(
        lambda n: st.tuples(distributions(n), distributions(n), st.lists(st.floats(0, 1), min_size=n, max_size=n))
    )
)
def test_expectation_gap_bounded_by_tv(args):
    p, q, f = args
    assert expectation_gap(p, q, f) <= tv_discrete(p, q) + 1e-12


class TestSafeSetAndProjection:
    def setup_method(self):
        self.G_ref = DiscreteGenerator(np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]))
        self.U = UnsafetyFunction(np.array([0.1, 0.9]))

    def test_safe_set_examples(self):
        assert safe_set(self.G_ref, self.U, 1.0) == {0, 1, 2}
        assert safe_set(self.G_ref, self.U, 0.0) == frozenset()
        # boundary included: u(G*|2) = 0.5
        assert 2 in safe_set(self.G_ref, self.U, 0.5)

    def test_safe_set_recheck(self):
        inst = random_instance(5)
        for tau in (0.05, 0.3, 0.7):
            s = safe_set(inst.G_ref, inst.U, tau)
            for c in range(len(inst.space)):
                assert (c in s) == (float(inst.G_ref.matrix[c] @ inst.U.values) <= tau)

    def test_safe_prompt_projects_to_its_fiber(self):
        space = space_from([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
        assert brute_force_projection(0, {0, 1, 2}, space) == {0, 1}

    def test_equidistant_safe_prompts_both_returned(self):
        space = space_from([[1.0, 0.0], [1.0, 1.0], [1.0, -1.0]])
        assert brute_force_projection(0, {1, 2}, space) == {1, 2}

    def test_empty_safe_set_is_infeasible(self):
        space = space_from([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(InfeasibleProjectionError):
            brute_force_projection(0, set(), space)
        with pytest.raises(InfeasibleProjectionError):
            build_projection_kernel(space, set())

    def test_projection_against_full_scan(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            n = int(rng.integers(2, 15))
            emb = rng.normal(size=(n, 5))
            space = space_from(emb)
            safe = {int(i) for i in rng.choice(n, size=rng.integers(1, n + 1), replace=False)}
            for c in range(n):
                d = {s: angular_distance(emb[c], emb[s]) for s in safe}
                best = min(d.values())
                assert brute_force_projection(c, safe, space) == {s for s, v in d.items() if v <= best + 1e-9}


class TestKernels:
    def test_all_safe_gives_identity(self):
        space = space_from(np.eye(3))
        K = build_projection_kernel(space, {0, 1, 2})
        assert np.array_equal(K.matrix, np.eye(3))

    def test_two_way_tie_gives_half_half(self):
        space = space_from([[1.0, 0.0], [1.0, 1.0], [1.0, -1.0]])
        K = build_projection_kernel(space, {1, 2})
        assert np.array_equal(K.matrix[0], [0.0, 0.5, 0.5])
        assert check_idempotence(K) <= 1e-12

    def test_random_kernels_satisfy_invariants(self):
        for seed in range(1, 200):
            inst = random_instance(seed)
            safe = safe_set(inst.G_ref, inst.U, 0.3)
            if not safe:
                continue
            nearest = nearest_sets(inst.space, safe)
            K = build_projection_kernel(inst.space, safe, nearest)
            assert kernel_violations(K, nearest) == []
            assert check_idempotence(K) <= 1e-12
            Gt = project_conditionals(inst.G, K)
            assert np.abs(Gt.matrix.sum(axis=1) - 1.0).max() <= 1e-12

    def test_broken_kernel_detected(self):
        M = np.array([[0.5, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
        K = ProjectionKernel(M, np.array([True, True, False]))
        assert check_idempotence(K) > 0
        assert any("not Dirac" in v for v in kernel_violations(K))

    def test_mass_on_unsafe_column_detected(self):
        M = np.array([[1.0, 0.0], [0.0, 1.0]])
        K = ProjectionKernel(M, np.array([True, False]))
        assert "mass on unsafe columns" in kernel_violations(K)

    def test_project_conditionals_examples(self):
        rng = np.random.default_rng(6)
        G = DiscreteGenerator(np.stack([simplex(rng, 4) for _ in range(3)]))
        I = ProjectionKernel(np.eye(3), np.ones(3, dtype=bool))
        assert np.array_equal(project_conditionals(G, I).matrix, G.matrix)
        D = ProjectionKernel(np.tile([0.0, 1.0, 0.0], (3, 1)), np.array([False, True, False]))
        assert np.array_equal(project_conditionals(G, D).matrix, np.tile(G.matrix[1], (3, 1)))

    def test_project_conditionals_explicit_mixture(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n, m = rng.integers(2, 8, size=2)
            G = np.stack([simplex(rng, m) for _ in range(n)])
            K = np.stack([simplex(rng, n) for _ in range(n)])
            out = project_conditionals(DiscreteGenerator(G), ProjectionKernel(K, np.ones(n, dtype=bool))).matrix
            for c in range(n):
                for x in range(m):
                    assert out[c, x] == pytest.approx(math.fsum(K[c, k] * G[k, x] for k in range(n)), abs=1e-12)


class TestSpat:
    def test_equal_generators_have_zero_residual(self):
        inst = random_instance(8)
        assert check_spat(inst.G_ref, inst.G_ref, inst.U, inst.space.mu) == pytest.approx(0.0, abs=1e-15)

    def test_zero_unsafety_reduces_to_alignment(self):
        inst = random_instance(9)
        zero = UnsafetyFunction(np.zeros(inst.G.shape[1]))
        r = check_spat(inst.G, inst.G_ref, zero, inst.space.mu)
        assert r == pytest.approx(alignment_tv(inst.G, inst.G_ref, inst.space.mu), abs=1e-15)

    def test_pointwise_extremal_case(self):
        G = DiscreteGenerator(np.array([[1.0, 0.0]]))
        G_ref = DiscreteGenerator(np.array([[0.0, 1.0]]))
        U = UnsafetyFunction(np.array([0.0, 1.0]))
        assert check_pointwise_spat(G, G_ref, U, 0) == pytest.approx(0.0, abs=1e-15)
        assert check_pointwise_spat(G, G, U, 0) == 0.0

    def test_kernel_spat_with_identity_kernel_matches_plain(self):
        inst = random_instance(10)
        n = len(inst.space)
        I = ProjectionKernel(np.eye(n), np.ones(n, dtype=bool))
        res = check_kernel_spat(inst.G, inst.G_ref, inst.U, inst.space.mu, I, 1.0)
        assert res.residual == pytest.approx(check_spat(inst.G, inst.G_ref, inst.U, inst.space.mu), abs=1e-15)

    def test_kernel_spat_same_generator(self):
        inst = random_instance(11)
        safe = safe_set(inst.G_ref, inst.U, 0.5)
        K = build_projection_kernel(inst.space, safe)
        res = check_kernel_spat(inst.G_ref, inst.G_ref, inst.U, inst.space.mu, K, 0.5)
        assert res.residual == pytest.approx(0.0, abs=1e-15) and res.floor_gap >= -1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0.05, 0.1, 0.3, 0.5]))
def test_kernel_spat_and_floor_property(seed, tau):
    inst = random_instance(seed)
    mu = inst.space.mu
    assert check_spat(inst.G, inst.G_ref, inst.U, mu) >= -1e-12
    safe = safe_set(inst.G_ref, inst.U, tau)
    if not safe:
        with pytest.raises(InfeasibleProjectionError):
            build_projection_kernel(inst.space, safe)
        return
    res = check_kernel_spat(inst.G, inst.G_ref, inst.U, mu, build_projection_kernel(inst.space, safe), tau)
    assert res.residual >= -1e-12 and res.floor_gap >= -1e-12


class TestInstances:
    def test_same_seed_identical(self):
        a, b = random_instance(42), random_instance(42)
        assert a.to_json() == b.to_json()

    def test_sizes_respected(self):
        inst = random_instance(3, sizes=(7, 4))
        assert len(inst.space) == 7 and inst.G.shape == (7, 4) and inst.U.values.shape == (4,)

    def test_rows_stochastic(self):
        for seed in range(50):
            inst = random_instance(seed)
            for M in (inst.G.matrix, inst.G_ref.matrix):
                assert np.all(M >= 0) and np.abs(M.sum(axis=1) - 1).max() <= 1e-12

    def test_json_roundtrip(self, tmp_path):
        inst = random_instance(12)
        path = tmp_path / "inst.json"
        inst.save(path)
        back = Instance.load(path)
        assert back.to_json() == inst.to_json()
        assert set(inst.to_json()) >= {"prompts", "mu", "G", "Gstar", "U", "tau"}

    def test_duplicates_create_zero_distance_fibers(self):
        found = False
        for seed in range(1, 40):
            D = random_instance(seed).space.distances()
            off = D[~np.eye(D.shape[0], dtype=bool)]
            if off.size and off.min() <= 1e-12:
                found = True
                break
        assert found


def test_property_suite_small_run_is_clean():
    rep = run_property_suite(1, 50)
    assert rep.ok, rep.violations[:5]
    assert "violations: none" in rep.table()
    assert rep.to_json()["ok"] is True
