"""Projected-reference sampling: project, generate, verify, retry.

Stage-1 (prompt-only score) steers the projection; only the Stage-2 image
score can accept. A run accepts the first attempt whose image scores at or
below tau without abstaining, and otherwise returns the last attempt with
``accepted=False``.
"""

from __future__ import annotations

import base64
import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Protocol, Sequence

import httpx
import numpy as np

from ._http import EndpointConfig, JsonClient
from .errors import (
    BackendUnavailableError,
    CascadeError,
    ProjectionUnavailableError,
    ProtocolError,
)
from .metric import Embedder
from .projection import ProjectionConfig, ProjectionTrace, RewriteProposer, local_search_project
from .scoring import ImageRef, Scorer, UnsafetyScore

logger = logging.getLogger(__name__)

__all__ = [
    "AttemptRecord",
    "CascadeConfig",
    "CascadeDeps",
    "CascadeOutcome",
    "Generator",
    "ImageRef",
    "RemoteGenerator",
    "SimulatorGenerator",
    "projected_reference_sample",
]


@dataclass(frozen=True)
class CascadeConfig:
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    max_attempts: int = 2
    # pass the previous Stage-2 rejection to the proposer on retries
    feedback_on_retry: bool = False

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    @property
    def tau(self) -> float:
        """The one tolerance shared by both stages."""
        return self.projection.tau

    def with_tau(self, tau: float) -> "CascadeConfig":
        return replace(self, projection=replace(self.projection, tau=tau))


class Generator(Protocol):
    kind: str

    def generate(self, prompt: str, seed: int) -> ImageRef: ...


class SimulatorGenerator:
    """Discrete reference model: each prompt has a distribution over image symbols.

    Sampling is inverse-CDF on one uniform draw from ``default_rng(seed)``, so
    the same seed couples draws across prompts and tolerance settings.
    """

    kind = "discrete-simulator"

    def __init__(
        self,
        images: Sequence[str],
        conditionals: Mapping[str, Sequence[float]],
        default: Sequence[float] | None = None,
        name: str = "simulator",
    ) -> None:
        self.images = list(images)
        self.name = name
        self._rows: dict[str, np.ndarray] = {}
        for prompt, row in conditionals.items():
            self._rows[prompt] = self._check(row)
        self._default = None if default is None else self._check(default)

    def _check(self, row: Sequence[float]) -> np.ndarray:
        arr = np.asarray(row, dtype=np.float64)
        if arr.shape != (len(self.images),) or np.any(arr < 0) or abs(arr.sum() - 1.0) > 1e-12:
            raise ValueError("conditional must be a probability vector over the image symbols")
        return arr

    def conditional(self, prompt: str) -> np.ndarray:
        row = self._rows.get(prompt, self._default)
        if row is None:
            raise ProtocolError(f"simulator has no conditional for prompt {prompt!r}")
        return row

    def generate(self, prompt: str, seed: int) -> ImageRef:
        row = self.conditional(prompt)
        u = np.random.default_rng(seed).random()
        idx = int(np.searchsorted(np.cumsum(row), u, side="right"))
        idx = min(idx, len(self.images) - 1)
        # skip zero-mass symbols that rounding could land on
        while row[idx] == 0.0:
            idx -= 1
        return ImageRef(self.images[idx], kind="symbol", generator=self.name, seed=seed)


class RemoteGenerator:
    """HTTP text-to-image backend: POST {prompt, seed, size} -> bytes or URI."""

    kind = "remote-t2i"

    def __init__(
        self,
        endpoint: EndpointConfig,
        size: str = "512x512",
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.size = size
        self._client = JsonClient(endpoint, "generator", transport=transport)

    def generate(self, prompt: str, seed: int) -> ImageRef:
        payload: dict[str, Any] = {"prompt": prompt, "seed": seed, "size": self.size}
        if self.endpoint.model:
            payload["model"] = self.endpoint.model
        resp = self._client.post_raw(payload)
        ctype = resp.headers.get("content-type", "")
        if ctype.startswith("image/"):
            data = resp.content
            if not data:
                raise ProtocolError("generator returned an empty image")
            return ImageRef(data, kind="bytes", generator=self.endpoint.url, seed=seed)
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProtocolError("generator reply is neither an image nor JSON") from exc
        if isinstance(body, dict) and body.get("url"):
            return ImageRef(str(body["url"]), kind="uri", generator=self.endpoint.url, seed=seed)
        if isinstance(body, dict) and body.get("b64"):
            return ImageRef(base64.b64decode(body["b64"]), kind="bytes", generator=self.endpoint.url, seed=seed)
        raise ProtocolError("generator JSON reply lacks 'url' or 'b64'")


@dataclass
class CascadeDeps:
    proposer: RewriteProposer
    prompt_scorer: Scorer
    image_scorer: Scorer
    generator: Generator
    embedder: Embedder


@dataclass
class AttemptRecord:
    attempt: int
    prompt: str
    projection: ProjectionTrace
    image: ImageRef | None = None
    verification: UnsafetyScore | None = None
    accepted: bool = False

    def to_json(self) -> dict[str, Any]:
        return {
            "attempt": self.attempt,
            "prompt": self.prompt,
            "projection": self.projection.to_json(),
            "image": None if self.image is None else self.image.to_json(),
            "verification": None if self.verification is None else self.verification.to_json(),
            "accepted": self.accepted,
        }


@dataclass
class CascadeOutcome:
    accepted: bool
    prompt: str
    image: ImageRef
    verification: UnsafetyScore
    attempts: list[AttemptRecord]

    @property
    def attempts_used(self) -> int:
        return len(self.attempts)

    def to_json(self) -> dict[str, Any]:
        return {
            "accepted": self.accepted,
            "prompt": self.prompt,
            "image": self.image.to_json(),
            "verification": self.verification.to_json(),
            "attempts_used": self.attempts_used,
            "attempts": [a.to_json() for a in self.attempts],
        }


def attempt_seed(seed: int, attempt: int) -> int:
    # distinct, reproducible generator seed per attempt
    return int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0])


def projected_reference_sample(
    prompt: str,
    deps: CascadeDeps,
    cfg: CascadeConfig | None = None,
    *,
    seed: int = 0,
    executor: Executor | None = None,
) -> CascadeOutcome:
    cfg = cfg or CascadeConfig()
    tau = cfg.tau
    done: list[AttemptRecord] = []
    feedback: str | None = None

    for r in range(1, cfg.max_attempts + 1):
        try:
            projected, trace = local_search_project(
                prompt,
                deps.proposer,
                deps.prompt_scorer,
                deps.embedder,
                cfg.projection,
                attempt=r,
                feedback=feedback if cfg.feedback_on_retry else None,
                executor=executor,
            )
        except ProjectionUnavailableError as exc:
            raise CascadeError(f"attempt {r}: {exc}", attempts=done) from exc

        record = AttemptRecord(r, projected, trace)
        try:
            image = deps.generator.generate(projected, attempt_seed(seed, r))
        except (BackendUnavailableError, ProtocolError) as exc:
            # no image, so this attempt is not counted
            raise CascadeError(f"attempt {r}: generation failed: {exc}", attempts=done) from exc
        record.image = image
        done.append(record)
        try:
            q = deps.image_scorer.score(image)
        except (BackendUnavailableError, ProtocolError) as exc:
            raise CascadeError(f"attempt {r}: verification failed: {exc}", attempts=done) from exc
        record.verification = q
        if q.passes(tau):
            record.accepted = True
            return CascadeOutcome(True, projected, image, q, done)
        feedback = f"verifier score {q.value:.3f} exceeds tolerance {tau}"
        logger.debug("attempt %d rejected (u_vlm=%.4f, abstained=%s)", r, q.value, q.abstained)

    last = done[-1]
    assert last.image is not None and last.verification is not None
    return CascadeOutcome(False, last.prompt, last.image, last.verification, done)
