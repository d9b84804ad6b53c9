from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DictEmbedder
from oracles import j_argmin
from safeproj._http import EndpointConfig
from safeproj.errors import BackendUnavailableError, ProjectionUnavailableError
from safeproj.metric import angular_distance
from safeproj.projection import (
    STOP_ALREADY_SAFE,
    STOP_EARLY_TAU,
    STOP_STEPS_EXHAUSTED,
    GraphProposer,
    ProjectionConfig,
    RemoteProposer,
    hinge,
    local_search_project,
    objective,
    parse_rewrites,
)
from safeproj.scoring import Scorer, TableBackend, UnsafetyScore


def table_scorer(values: dict[str, float]) -> Scorer:
    # u = p_B / (p_A + p_B) with p_A + p_B = 1
    return Scorer(TableBackend({k: [1.0 - v, v] for k, v in values.items()}))


def plane(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta), 0.0])


# 12-node toy universe: (angle from the original, unsafety)
TOY = {
    "c": (0.0, 0.9),
    "a1": (0.2, 0.6),
    "a2": (0.3, 0.3),
    "a3": (1.0, 0.4),
    "b1": (0.35, 0.1),
    "b2": (0.8, 0.04),
    "b3": (0.25, 0.5),
    "b4": (0.1, 0.7),
    "b5": (1.1, 0.0),
    "d1": (0.6, 0.07),
    "d2": (0.9, 0.0),
    "e1": (0.05, 0.0),  # unreachable from c
}
TOY_GRAPH = {
    "c": ["a1", "a2", "a3"],
    "a1": ["b4"],
    "a2": ["b1", "b2", "b3"],
    "a3": ["b5"],
    "b1": ["d1"],
    "b3": ["d2"],
}


def toy_parts():
    emb = DictEmbedder({k: plane(t) for k, (t, _) in TOY.items()})
    scorer = table_scorer({k: u for k, (_, u) in TOY.items()})
    return GraphProposer(TOY_GRAPH), scorer, emb


def reachable(graph, start, steps):
    seen, frontier = {start}, {start}
    for _ in range(steps):
        frontier = {n for f in frontier for n in graph.get(f, [])} - seen
        seen |= frontier
    return seen


class TestFormula:
    @pytest.mark.parametrize("z,expected", [(-0.3, 0.0), (0.0, 0.0), (0.05, 0.05)])
    def test_hinge(self, z, expected):
        assert hinge(z) == expected

    def test_objective_examples(self):
        cfg = ProjectionConfig()
        assert objective(0.3, UnsafetyScore(0.10), cfg) == pytest.approx(1.3, abs=1e-12)
        assert objective(0.0, UnsafetyScore(0.01), cfg) == 0.0
        assert objective(0.2, UnsafetyScore(0.5, abstained=True), cfg) == pytest.approx(9.2, abs=1e-12)

    def test_defaults(self):
        cfg = ProjectionConfig()
        assert (cfg.tau, cfg.alpha, cfg.steps, cfg.neighbors) == (0.05, 20.0, 3, 16)

    @pytest.mark.parametrize(
        "kwargs", [{"tau": -0.1}, {"tau": 1.5}, {"alpha": 0.0}, {"steps": 0}, {"neighbors": 0}]
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            ProjectionConfig(**kwargs)


class TestToyGraph:
    def test_matches_reachable_argmin(self):
        proposer, scorer, emb = toy_parts()
        cfg = ProjectionConfig()
        out, trace = local_search_project("c", proposer, scorer, emb, cfg)
        pool = reachable(TOY_GRAPH, "c", cfg.steps)
        assert "e1" not in pool
        best = j_argmin(
            "c", sorted(pool), lambda t: angular_distance(plane(0), plane(TOY[t][0])),
            lambda t: TOY[t][1], cfg.tau, cfg.alpha,
        )
        assert out == best == "b2"
        assert trace.stop_reason == STOP_EARLY_TAU

    def test_huge_alpha_gives_nearest_feasible(self):
        proposer, scorer, emb = toy_parts()
        cfg = ProjectionConfig(alpha=1e6)
        out, _ = local_search_project("c", proposer, scorer, emb, cfg)
        pool = reachable(TOY_GRAPH, "c", cfg.steps)
        feasible = [t for t in pool if TOY[t][1] <= cfg.tau]
        assert out == min(feasible, key=lambda t: TOY[t][0])

    def test_trace_is_complete_and_anchored(self):
        proposer, scorer, emb = toy_parts()
        cfg = ProjectionConfig()
        _, trace = local_search_project("c", proposer, scorer, emb, cfg)
        assert trace.initial.text == "c" and trace.initial.distance == 0.0
        for step in trace.steps:
            for cand in step.candidates:
                # distance to the ORIGINAL prompt, never to the incumbent
                assert cand.distance == pytest.approx(TOY[cand.text][0], abs=1e-12)
                assert cand.objective == pytest.approx(
                    cand.distance + cfg.alpha * max(cand.score.value - cfg.tau, 0.0), abs=1e-12
                )
        objs = trace.objectives()
        assert all(b <= a for a, b in zip(objs, objs[1:]))
        json.dumps(trace.to_json())


class TestBehaviour:
    def test_identity_on_safe(self):
        emb = DictEmbedder({"ok": plane(0.0)})
        calls = []

        class Spy(GraphProposer):
            def propose(self, *a, **k):
                calls.append(a)
                return super().propose(*a, **k)

        out, trace = local_search_project("ok", Spy({}), table_scorer({"ok": 0.01}), emb)
        assert out == "ok" and trace.stop_reason == STOP_ALREADY_SAFE and not calls

    def test_empty_proposals_keep_incumbent(self):
        emb = DictEmbedder({"bad": plane(0.0)})
        out, trace = local_search_project("bad", GraphProposer({}), table_scorer({"bad": 0.9}), emb)
        assert out == "bad"
        assert trace.stop_reason == STOP_STEPS_EXHAUSTED and len(trace.steps) == 3

    def test_duplicates_scored_once(self):
        emb = DictEmbedder({"bad": plane(0.0), "x": plane(0.5), "y": plane(0.7)})
        counts: dict[str, int] = {}
        inner = TableBackend({"bad": [0.1, 0.9], "x": [0.5, 0.5], "y": [0.4, 0.6]})

        class Counting:
            kind = "count"

            def top_logprobs(self, protocol, subject):
                counts[subject] = counts.get(subject, 0) + 1
                return inner.top_logprobs(protocol, subject)

        proposer = GraphProposer({"bad": ["x", "x", "bad", "y", "y"], "x": ["bad", "y"]})
        local_search_project("bad", proposer, Scorer(Counting()), emb)
        assert all(v == 1 for v in counts.values())
        step0 = [c.text for c in local_search_project("bad", proposer, Scorer(Counting()), emb)[1].steps[0].candidates]
        assert step0 == ["x", "y"]

    def test_abstained_candidate_never_early_stops(self):
        emb = DictEmbedder({"bad": plane(0.0), "unknown": plane(0.1)})
        cfg = ProjectionConfig(tau=0.6)
        out, trace = local_search_project(
            "bad", GraphProposer({"bad": ["unknown"]}), table_scorer({"bad": 0.9}), emb, cfg
        )
        assert out == "unknown" and trace.final.score.abstained
        assert trace.stop_reason == STOP_STEPS_EXHAUSTED

    def test_tie_break_smaller_distance_then_text(self):
        v = plane(0.2)
        emb = DictEmbedder({"o": plane(0.0), "far": plane(0.2 + 1e-3), "nearB": v, "nearA": v.copy()})
        # far has larger d; nearA and nearB tie exactly on J and d
        scorer = table_scorer({"o": 0.9, "far": 0.0, "nearB": 0.0, "nearA": 0.0})
        cfg = ProjectionConfig(alpha=1.0)
        out, trace = local_search_project("o", GraphProposer({"o": ["far", "nearB", "nearA"]}), scorer, emb, cfg)
        j = {c.text: c.objective for c in trace.steps[0].candidates}
        assert j["nearA"] == j["nearB"] < j["far"]
        assert out == "nearA"

    def test_incumbent_wins_exact_tie(self):
        v = plane(0.0)
        # "a" shares the embedding and score of the original, so J ties exactly
        emb = DictEmbedder({"o": v, "a": v.copy()})
        scorer = table_scorer({"o": 0.9, "a": 0.9})
        out, trace = local_search_project("o", GraphProposer({"o": ["a"]}), scorer, emb)
        assert trace.steps[0].candidates[0].objective == trace.initial.objective
        assert out == "o" and trace.stop_reason == STOP_STEPS_EXHAUSTED

    def test_backend_failure_raises_with_trace(self):
        emb = DictEmbedder({"bad": plane(0.0), "x": plane(0.2)})
        inner = TableBackend({"bad": [0.1, 0.9]})

        class Flaky:
            kind = "flaky"

            def top_logprobs(self, protocol, subject):
                if subject == "x":
                    raise BackendUnavailableError("scorer", "HTTP 503")
                return inner.top_logprobs(protocol, subject)

        with pytest.raises(ProjectionUnavailableError) as info:
            local_search_project("bad", GraphProposer({"bad": ["x"]}), Scorer(Flaky()), emb)
        assert info.value.trace is not None and info.value.trace.initial.text == "bad"

    def test_executor_gives_identical_result(self):
        proposer, scorer, emb = toy_parts()
        a = local_search_project("c", proposer, scorer, emb)
        with ThreadPoolExecutor(4) as pool:
            b = local_search_project("c", proposer, scorer, emb, executor=pool)
        assert a[0] == b[0] and a[1].objectives() == b[1].objectives()


@st.composite
def universes(draw, max_nodes=30):
    n = draw(st.integers(2, max_nodes))
    names = [f"p{i:03d}" for i in range(n)]
    angles = draw(st.lists(st.sampled_from([0.0, 0.1, 0.2, 0.3, 0.5, 0.8, 1.3, 2.0]), min_size=n, max_size=n))
    scores = draw(st.lists(st.sampled_from([0.0, 0.01, 0.05, 0.1, 0.3, 0.7, 0.99]), min_size=n, max_size=n))
    tau = draw(st.sampled_from([0.05, 0.1, 0.3, 0.5]))
    alpha = draw(st.sampled_from([0.5, 1.0, 20.0]))
    return names, angles, scores, tau, alpha


@settings(max_examples=150, deadline=None)
@given(universes())
def test_one_step_full_universe_equals_brute_force(u):
    names, angles, scores, tau, alpha = u
    emb = DictEmbedder({t: plane(a) for t, a in zip(names, angles)})
    scorer = table_scorer(dict(zip(names, scores)))
    cfg = ProjectionConfig(tau=tau, alpha=alpha, steps=1, neighbors=len(names))
    proposer = GraphProposer({names[0]: names[1:]})
    out, _ = local_search_project(names[0], proposer, scorer, emb, cfg)
    u_of = {t: scorer.score(t).value for t in names}
    expected = j_argmin(
        names[0], names[1:], lambda t: angular_distance(emb.table[names[0]], emb.table[t]), u_of.__getitem__, tau, alpha
    )
    assert out == expected


@settings(max_examples=100, deadline=None)
@given(universes(), st.integers(0, 2**16))
def test_descent_on_random_graphs(u, seed):
    names, angles, scores, tau, alpha = u
    rng = np.random.default_rng(seed)
    graph = {t: [names[j] for j in rng.choice(len(names), size=min(4, len(names)), replace=False)] for t in names}
    emb = DictEmbedder({t: plane(a) for t, a in zip(names, angles)})
    cfg = ProjectionConfig(tau=tau, alpha=alpha, neighbors=3)
    _, trace = local_search_project(names[0], GraphProposer(graph, seed=seed), table_scorer(dict(zip(names, scores))), emb, cfg)
    objs = trace.objectives()
    assert all(b <= a for a, b in zip(objs, objs[1:]))


@settings(max_examples=100, deadline=None)
@given(st.text(min_size=1, max_size=40), st.sampled_from([0.0, 0.01, 0.049]))
def test_identity_on_safe_property(text, u):
    emb = DictEmbedder({text: plane(0.3)})
    out, _ = local_search_project(text, GraphProposer({text: ["other"]}), table_scorer({text: u}), emb)
    assert out == text


class TestGraphProposer:
    def test_returns_all_when_small(self):
        assert GraphProposer({"a": ["b", "c"]}).propose("a", 5) == ["b", "c"]

    def test_sampling_depends_on_attempt_and_is_reproducible(self):
        g = GraphProposer({"a": [f"n{i}" for i in range(40)]}, seed=3)
        first = g.propose("a", 5, attempt=1)
        assert first == g.propose("a", 5, attempt=1)
        assert len(first) == 5
        assert first != g.propose("a", 5, attempt=2)


class TestRemoteProposer:
    def test_parse_json_and_lines(self):
        assert parse_rewrites('Sure: ["one", "two", ""]', 5) == ["one", "two"]
        assert parse_rewrites("1. first\n- second\n\n* third", 2) == ["first", "second"]

    def test_request_and_seed_perturbation(self):
        seen = []

        def handler(request):
            seen.append(json.loads(request.read()))
            return httpx.Response(200, json={"choices": [{"message": {"content": '["a calm street"]'}}]})

        ep = EndpointConfig(url="http://llm.test/v1/chat/completions", model="m", retries=0)
        p = RemoteProposer(ep, seed=7, transport=httpx.MockTransport(handler))
        assert p.propose("a riot", 4, step=0, attempt=1) == ["a calm street"]
        p.propose("a riot", 4, step=0, attempt=2, feedback="too violent")
        assert seen[0]["seed"] != seen[1]["seed"]
        assert "a riot" in seen[0]["messages"][0]["content"]
        assert "too violent" in seen[1]["messages"][0]["content"]
