"""Stage-1 prompt projection by penalized local search.

Each step asks a proposer for rewrites of the current incumbent and moves to
the candidate minimizing

    J(c; c') = d(c, c') + alpha * max(u(c') - tau, 0)

where ``d`` is always measured from the ORIGINAL prompt ``c``. The incumbent
is part of every candidate pool, so J never increases across steps.
"""

from __future__ import annotations

import json
import logging
import random
import re
import zlib
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence

import httpx

from ._http import EndpointConfig, JsonClient
from .errors import BackendUnavailableError, ProjectionUnavailableError, ProtocolError
from .metric import CachedEmbedder, Embedder, angular_distance
from .scoring import Scorer, UnsafetyScore

logger = logging.getLogger(__name__)

STOP_ALREADY_SAFE = "already-safe"
STOP_EARLY_TAU = "early-tau"
STOP_STEPS_EXHAUSTED = "steps-exhausted"


@dataclass(frozen=True)
class ProjectionConfig:
    tau: float = 0.05
    alpha: float = 20.0
    steps: int = 3
    neighbors: int = 16
    early_stop: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.steps < 1 or self.neighbors < 1:
            raise ValueError("steps and neighbors must be positive integers")


def hinge(z: float) -> float:
    return max(z, 0.0)


def objective(d: float, u: UnsafetyScore | float, cfg: ProjectionConfig) -> float:
    """Penalized projection objective. Abstentions enter with their value 0.5."""
    value = u.value if isinstance(u, UnsafetyScore) else float(u)
    return d + cfg.alpha * hinge(value - cfg.tau)


@dataclass
class Candidate:
    text: str
    distance: float
    score: UnsafetyScore
    objective: float

    def to_json(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "distance": self.distance,
            "score": self.score.to_json(),
            "objective": self.objective,
        }


@dataclass
class StepRecord:
    step: int
    incumbent: str
    candidates: list[Candidate]
    chosen: Candidate

    def to_json(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "incumbent": self.incumbent,
            "candidates": [c.to_json() for c in self.candidates],
            "chosen": self.chosen.text,
            "chosen_objective": self.chosen.objective,
        }


@dataclass
class ProjectionTrace:
    initial: Candidate
    steps: list[StepRecord] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def final(self) -> Candidate:
        return self.steps[-1].chosen if self.steps else self.initial

    def objectives(self) -> list[float]:
        return [self.initial.objective] + [s.chosen.objective for s in self.steps]

    def to_json(self) -> dict[str, Any]:
        return {
            "initial": self.initial.to_json(),
            "steps": [s.to_json() for s in self.steps],
            "stop_reason": self.stop_reason,
            "final": self.final.text,
        }


class RewriteProposer(Protocol):
    kind: str

    def propose(
        self,
        prompt: str,
        n: int,
        *,
        step: int = 0,
        attempt: int = 1,
        feedback: str | None = None,
    ) -> list[str]: ...


class GraphProposer:
    """Fixed adjacency list over a synthetic prompt universe.

    If a node has more than ``n`` neighbors, a subset is drawn with an RNG
    seeded from (seed, attempt, step, node), so retries under a different
    attempt number see different neighbors.
    """

    kind = "deterministic-graph"

    def __init__(self, graph: Mapping[str, Sequence[str]], seed: int = 0) -> None:
        self.graph = {k: list(v) for k, v in graph.items()}
        self.seed = seed

    def propose(
        self,
        prompt: str,
        n: int,
        *,
        step: int = 0,
        attempt: int = 1,
        feedback: str | None = None,
    ) -> list[str]:
        nbrs = [t for t in self.graph.get(prompt, []) if t]
        if len(nbrs) <= n:
            return nbrs
        rng = random.Random(hash((self.seed, attempt, step, zlib.crc32(prompt.encode("utf-8")))))
        return rng.sample(nbrs, n)


REWRITE_INSTRUCTION = (
    "Rewrite the image-generation prompt below so that the resulting image would be safe "
    "for a general audience. Make the smallest edit that achieves this: preserve key "
    "entities, composition, background, and style; edit only unsafe cues; keep characters "
    "fully clothed. If the prompt is already safe, return it unchanged.\n"
    "Return {n} alternative rewrites as a JSON array of strings.\n\n"
    "Prompt: {prompt}"
)


def parse_rewrites(content: str, n: int) -> list[str]:
    """Read rewrites from a JSON array, or else one per line."""
    text = content.strip()
    items: list[str] = []
    m = re.search(r"\[.*\]", text, flags=re.S)
    if m:
        try:
            parsed = json.loads(m.group(0))
        except ValueError:
            parsed = None
        if isinstance(parsed, list):
            items = [str(x) for x in parsed if isinstance(x, (str, int, float))]
    if not items:
        for line in text.splitlines():
            line = re.sub(r"^\s*(?:[-*•]|\d+[.)])\s*", "", line).strip().strip('"').strip()
            if line:
                items.append(line)
    return [s.strip() for s in items if s.strip()][:n]


class RemoteProposer:
    """Chat-completions backed rewrite proposer."""

    kind = "remote-llm"

    def __init__(
        self,
        endpoint: EndpointConfig,
        instruction: str = REWRITE_INSTRUCTION,
        temperature: float = 0.7,
        seed: int = 0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.instruction = instruction
        self.temperature = temperature
        self.seed = seed
        self._client = JsonClient(endpoint, "proposer", transport=transport)

    def build_request(
        self, prompt: str, n: int, step: int, attempt: int, feedback: str | None
    ) -> dict[str, Any]:
        user = self.instruction.format(n=n, prompt=prompt)
        if feedback:
            user += f"\n\nA previous rewrite was rejected after image verification: {feedback}"
        payload = {
            "model": self.endpoint.model,
            "messages": [{"role": "user", "content": user}],
            "temperature": self.temperature,
            "seed": self.seed + 1000 * (attempt - 1) + step,
        }
        payload.update(self.endpoint.extra)
        return payload

    def propose(
        self,
        prompt: str,
        n: int,
        *,
        step: int = 0,
        attempt: int = 1,
        feedback: str | None = None,
    ) -> list[str]:
        body = self._client.post(self.build_request(prompt, n, step, attempt, feedback))
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError("proposer response lacks choices[0].message.content") from exc
        return parse_rewrites(content or "", n)


def _pick(incumbent: Candidate, others: Sequence[Candidate]) -> Candidate:
    # ties on J: incumbent, then smaller d, then lexicographically smaller text
    if not others:
        return incumbent
    best = min(others, key=lambda c: (c.objective, c.distance, c.text))
    return best if best.objective < incumbent.objective else incumbent


def local_search_project(
    prompt: str,
    proposer: RewriteProposer,
    scorer: Scorer,
    embedder: Embedder,
    cfg: ProjectionConfig | None = None,
    *,
    attempt: int = 1,
    feedback: str | None = None,
    executor: Executor | None = None,
) -> tuple[str, ProjectionTrace]:
    """Project ``prompt`` toward the tau-safe set; returns ``(projected, trace)``.

    Prompts whose own Stage-1 score already passes are returned untouched.
    Any backend failure raises :class:`ProjectionUnavailableError` carrying
    the partial trace; the original prompt is never returned in its place.
    """
    cfg = cfg or ProjectionConfig()
    emb = CachedEmbedder(embedder)
    scores: dict[str, UnsafetyScore] = {}
    trace: ProjectionTrace | None = None

    def score(text: str) -> UnsafetyScore:
        hit = scores.get(text)
        if hit is None:
            hit = scores[text] = scorer.score(text)
        return hit

    def evaluate(texts: Sequence[str]) -> list[Candidate]:
        anchor = emb.embed(prompt)
        if executor is not None:
            got = list(executor.map(score, texts))
        else:
            got = [score(t) for t in texts]
        out = []
        for text, s in zip(texts, got):
            d = 0.0 if text == prompt else angular_distance(anchor, emb.embed(text))
            out.append(Candidate(text, d, s, objective(d, s, cfg)))
        return out

    try:
        initial = evaluate([prompt])[0]
        trace = ProjectionTrace(initial=initial)
        if initial.score.passes(cfg.tau):
            trace.stop_reason = STOP_ALREADY_SAFE
            return prompt, trace

        incumbent = initial
        for t in range(cfg.steps):
            proposals = proposer.propose(
                incumbent.text, cfg.neighbors, step=t, attempt=attempt, feedback=feedback
            )
            seen = {incumbent.text}
            fresh: list[str] = []
            for text in proposals[: cfg.neighbors]:
                if text and text not in seen:
                    seen.add(text)
                    fresh.append(text)
            cands = evaluate(fresh)
            chosen = _pick(incumbent, cands)
            trace.steps.append(StepRecord(t, incumbent.text, cands, chosen))
            incumbent = chosen
            if cfg.early_stop and incumbent.score.passes(cfg.tau):
                trace.stop_reason = STOP_EARLY_TAU
                break
        else:
            trace.stop_reason = STOP_STEPS_EXHAUSTED
    except (BackendUnavailableError, ProtocolError) as exc:
        raise ProjectionUnavailableError(f"projection aborted: {exc}", trace=trace) from exc

    return incumbent.text, trace
