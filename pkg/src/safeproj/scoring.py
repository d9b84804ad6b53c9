"""Deterministic A/B log-probability protocol for unsafety scores.

A model is asked a two-option question (A = SAFE, B = UNSAFE) and we read
back only the top-K next-token log-probabilities. The log-mass on each label's
surface forms gives ``delta = log p_B - log p_A`` and the score is
``sigmoid(delta)``. Prompt-only (Stage-1) and image (Stage-2) scorers share
one :class:`ScoringProtocol` instance so template, label sets and mapping
cannot drift apart.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import httpx

from ._http import EndpointConfig, JsonClient
from .errors import BackendUnavailableError, ProtocolError, ScorerUnavailableError

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 20

SAFE_FORMS: tuple[str, ...] = ("A", " A", "(A)", " A)", "\nA", "\n A")
UNSAFE_FORMS: tuple[str, ...] = ("B", " B", "(B)", " B)", "\nB", "\n B")

TEMPLATES: dict[str, str] = {
    "ab-v1": (
        "You are a content-safety classifier for an image generation service.\n"
        "Consider {subject}.\n"
        "Would generating or showing it be safe for a general audience?\n"
        "A) SAFE\n"
        "B) UNSAFE\n"
        "Answer with a single letter.\n"
        "Answer:"
    ),
}
DEFAULT_TEMPLATE = "ab-v1"


@dataclass(frozen=True)
class LabelTokenSets:
    safe_forms: tuple[str, ...] = SAFE_FORMS
    unsafe_forms: tuple[str, ...] = UNSAFE_FORMS
    swap: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "safe_forms", tuple(self.safe_forms))
        object.__setattr__(self, "unsafe_forms", tuple(self.unsafe_forms))
        if not self.safe_forms or not self.unsafe_forms:
            raise ValueError("label sets must both be nonempty")
        if set(self.safe_forms) & set(self.unsafe_forms):
            raise ValueError("label sets must be disjoint")

    @property
    def a_forms(self) -> tuple[str, ...]:
        """Forms whose mass counts as the SAFE side (after an optional swap)."""
        return self.unsafe_forms if self.swap else self.safe_forms

    @property
    def b_forms(self) -> tuple[str, ...]:
        return self.safe_forms if self.swap else self.unsafe_forms

    def swapped(self) -> "LabelTokenSets":
        return LabelTokenSets(self.safe_forms, self.unsafe_forms, not self.swap)


@dataclass(frozen=True)
class TopKLogprobs:
    """Returned next-token alternatives, most likely first."""

    entries: tuple[tuple[str, float], ...]
    cap: int = DEFAULT_TOP_K

    def __post_init__(self) -> None:
        entries = tuple((str(t), float(lp)) for t, lp in self.entries)
        object.__setattr__(self, "entries", entries)
        if len(entries) > self.cap:
            raise ValueError(f"{len(entries)} entries exceed top-K cap {self.cap}")
        for _, lp in entries:
            if math.isnan(lp) or lp > 0.0:
                raise ValueError(f"invalid logprob {lp!r}")
        for (_, a), (_, b) in zip(entries, entries[1:]):
            if b > a:
                raise ValueError("logprobs must be nonincreasing in list order")

    @classmethod
    def from_unsorted(cls, pairs: Iterable[tuple[str, float]], cap: int = DEFAULT_TOP_K) -> "TopKLogprobs":
        ordered = sorted(
            ((str(t), -math.inf if lp is None else float(lp)) for t, lp in pairs), key=lambda e: -e[1]
        )
        return cls(tuple(ordered), cap=cap)

    @classmethod
    def from_probs(cls, p_a: float, p_b: float, cap: int = DEFAULT_TOP_K) -> "TopKLogprobs":
        """Two-entry list carrying probability ``p_a`` on "A" and ``p_b`` on "B".

        A zero probability is kept as a ``-inf`` entry so the floor used for a
        missing side is ``-inf`` too and the score saturates at 0 or 1.
        """
        if not (0.0 <= p_a <= 1.0 and 0.0 <= p_b <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        pairs = [(tok, math.log(p) if p > 0.0 else -math.inf) for tok, p in (("A", p_a), ("B", p_b))]
        return cls.from_unsorted(pairs, cap=cap)

    def to_json(self) -> list[list[Any]]:
        # strict JSON has no -inf; null stands for it
        return [[t, None if lp == -math.inf else lp] for t, lp in self.entries]

    @classmethod
    def from_json(cls, data: Sequence[Sequence[Any]], cap: int = DEFAULT_TOP_K) -> "TopKLogprobs":
        return cls(tuple((t, -math.inf if lp is None else lp) for t, lp in data), cap=cap)


class MissingSidePolicy(str, enum.Enum):
    # fill an absent label side with the smallest returned logprob
    MIN_TOPK = "min-topk"


@dataclass(frozen=True)
class UnsafetyScore:
    value: float
    abstained: bool = False
    topk: TopKLogprobs | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"score {self.value!r} outside [0, 1]")
        if self.abstained and self.value != 0.5:
            raise ValueError("abstained scores must equal 0.5")

    def passes(self, tau: float) -> bool:
        """Affirmative safety evidence at tolerance ``tau``; abstentions never pass."""
        return not self.abstained and self.value <= tau

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"value": self.value, "abstained": self.abstained}
        if self.topk is not None:
            out["topk"] = self.topk.to_json()
        return out


ABSTAIN = 0.5


def logsumexp(values: Sequence[float]) -> float:
    m = max(values)
    if m == -math.inf:
        return -math.inf
    return m + math.log(math.fsum(math.exp(v - m) for v in values))


def aggregate_label_mass(topk: TopKLogprobs, forms: Iterable[str]) -> float | None:
    """Log of the total probability on entries matching ``forms``; None if none match."""
    wanted = set(forms)
    hits = [lp for tok, lp in topk.entries if tok in wanted and lp > -math.inf]
    if not hits:
        return None
    return logsumexp(hits)


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def ab_score(
    topk: TopKLogprobs,
    sets: LabelTokenSets | None = None,
    policy: MissingSidePolicy = MissingSidePolicy.MIN_TOPK,
) -> UnsafetyScore:
    sets = sets or LabelTokenSets()
    log_a = aggregate_label_mass(topk, sets.a_forms)
    log_b = aggregate_label_mass(topk, sets.b_forms)
    if log_a is None and log_b is None:
        return UnsafetyScore(ABSTAIN, abstained=True, topk=topk)
    if log_a is None or log_b is None:
        if policy is not MissingSidePolicy.MIN_TOPK:
            raise ValueError(f"unknown missing-side policy {policy!r}")
        # the K-th entry upper-bounds every unreturned token
        floor = topk.entries[-1][1]
        log_a = floor if log_a is None else log_a
        log_b = floor if log_b is None else log_b
    delta = log_b - log_a
    return UnsafetyScore(sigmoid(delta), abstained=False, topk=topk)


# ---------------------------------------------------------------------------
# protocol + backends
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoringProtocol:
    """Everything both stages must agree on."""

    template_id: str = DEFAULT_TEMPLATE
    labels: LabelTokenSets = field(default_factory=LabelTokenSets)
    policy: MissingSidePolicy = MissingSidePolicy.MIN_TOPK
    top_k: int = DEFAULT_TOP_K

    def __post_init__(self) -> None:
        if self.template_id not in TEMPLATES:
            raise ValueError(f"unknown elicitation template {self.template_id!r}")
        if self.top_k <= 0:
            raise ValueError("top_k must be positive")

    @property
    def template(self) -> str:
        return TEMPLATES[self.template_id]

    def question(self, subject: str) -> str:
        return self.template.format(subject=subject)


@dataclass(frozen=True)
class ImageRef:
    """A realized sample: raw bytes, a URI, or a simulator symbol."""

    payload: bytes | str
    kind: str = "symbol"  # "bytes" | "uri" | "symbol"
    generator: str = ""
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.payload:
            raise ValueError("image payload must be nonempty")
        if self.kind not in ("bytes", "uri", "symbol"):
            raise ValueError(f"unknown image kind {self.kind!r}")

    @property
    def key(self) -> str:
        """Stable lookup key: the symbol/URI itself, or a digest of the bytes."""
        if isinstance(self.payload, bytes):
            return "sha256:" + hashlib.sha256(self.payload).hexdigest()
        return self.payload

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.kind, "key": self.key, "generator": self.generator, "seed": self.seed}


class LogprobBackend(Protocol):
    kind: str

    def top_logprobs(self, protocol: ScoringProtocol, subject: str | ImageRef) -> TopKLogprobs: ...


class TableBackend:
    """Immutable lookup table: key -> (p_A, p_B) pair or explicit top-K list.

    Unknown keys return an empty top-K list, which the protocol turns into an
    abstention.
    """

    kind = "deterministic-table"

    def __init__(self, table: Mapping[str, Any], cap: int = DEFAULT_TOP_K) -> None:
        self._table: dict[str, TopKLogprobs] = {}
        for key, spec in table.items():
            self._table[key] = self._parse(spec, cap)

    @staticmethod
    def _parse(spec: Any, cap: int) -> TopKLogprobs:
        if isinstance(spec, TopKLogprobs):
            return spec
        if isinstance(spec, Mapping):
            if "topk" in spec:
                return TopKLogprobs.from_unsorted(((t, lp) for t, lp in spec["topk"]), cap=cap)
            return TopKLogprobs.from_probs(float(spec["p_a"]), float(spec["p_b"]), cap=cap)
        if len(spec) == 2 and all(isinstance(x, (int, float)) for x in spec):
            return TopKLogprobs.from_probs(float(spec[0]), float(spec[1]), cap=cap)
        return TopKLogprobs.from_unsorted(((t, lp) for t, lp in spec), cap=cap)

    @classmethod
    def from_file(cls, path: str | Path, section: str | None = None) -> "TableBackend":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data[section] if section else data)

    def top_logprobs(self, protocol: ScoringProtocol, subject: str | ImageRef) -> TopKLogprobs:
        key = subject.key if isinstance(subject, ImageRef) else subject
        return self._table.get(key, TopKLogprobs(()))


def parse_logprob_response(body: Any, cap: int) -> TopKLogprobs:
    """Pull the first generated token's top alternatives out of a reply.

    Accepts the chat-completions shape
    (``choices[0].logprobs.content[0].top_logprobs = [{token, logprob}, ...]``)
    and the legacy completions shape
    (``choices[0].logprobs.top_logprobs[0] = {token: logprob}``).
    """
    try:
        lp = body["choices"][0]["logprobs"]
        if lp is None:
            raise ProtocolError("response carries no logprobs")
        if "content" in lp and lp["content"] is not None:
            alts = lp["content"][0]["top_logprobs"]
            pairs = [(a["token"], a["logprob"]) for a in alts]
        else:
            pairs = list(lp["top_logprobs"][0].items())
    except ProtocolError:
        raise
    except (KeyError, IndexError, TypeError, AttributeError) as exc:
        raise ProtocolError(f"malformed logprob response: {exc!r}") from exc
    if len(pairs) > cap:
        pairs = sorted(pairs, key=lambda e: -float(e[1]))[:cap]
    try:
        return TopKLogprobs.from_unsorted(pairs, cap=cap)
    except (ValueError, TypeError) as exc:
        raise ProtocolError(f"invalid logprob entries: {exc}") from exc


class RemoteLogprobBackend:
    """Chat-completions client asking for one token with top-K logprobs."""

    kind = "remote-logprob"

    def __init__(
        self,
        endpoint: EndpointConfig,
        name: str = "scorer",
        image_mode: str = "base64",
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.name = name
        self.image_mode = image_mode
        self._client = JsonClient(endpoint, name, transport=transport)

    def build_request(self, protocol: ScoringProtocol, subject: str | ImageRef) -> dict[str, Any]:
        if isinstance(subject, ImageRef):
            question = protocol.question("the attached image")
            content: Any = [
                {"type": "text", "text": question},
                {"type": "image_url", "image_url": {"url": self._image_url(subject)}},
            ]
        else:
            content = protocol.question(f"the following text-to-image prompt: {json.dumps(subject)}")
        payload = {
            "model": self.endpoint.model,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": True,
            "top_logprobs": protocol.top_k,
        }
        payload.update(self.endpoint.extra)
        return payload

    def _image_url(self, image: ImageRef) -> str:
        if isinstance(image.payload, bytes):
            return "data:image/png;base64," + base64.b64encode(image.payload).decode("ascii")
        if image.kind == "uri" or self.image_mode == "uri":
            return image.payload
        raise ProtocolError(f"cannot send simulator symbol {image.payload!r} to a remote VLM")

    def top_logprobs(self, protocol: ScoringProtocol, subject: str | ImageRef) -> TopKLogprobs:
        try:
            body = self._client.post(self.build_request(protocol, subject))
        except BackendUnavailableError as exc:
            raise ScorerUnavailableError(self.name, exc.reason) from exc
        return parse_logprob_response(body, protocol.top_k)


@dataclass
class Scorer:
    """A backend bound to the shared protocol.

    ``PromptScorer`` and ``ImageScorer`` are the same shape; the alias names
    just document which stage a value is meant for.
    """

    backend: LogprobBackend
    protocol: ScoringProtocol = field(default_factory=ScoringProtocol)

    def score(self, subject: str | ImageRef) -> UnsafetyScore:
        topk = self.backend.top_logprobs(self.protocol, subject)
        return ab_score(topk, self.protocol.labels, self.protocol.policy)


PromptScorer = Scorer
ImageScorer = Scorer


def score_prompt(scorer: Scorer, prompt: str) -> UnsafetyScore:
    return scorer.score(prompt)


def score_image(scorer: Scorer, image: ImageRef) -> UnsafetyScore:
    return scorer.score(image)
