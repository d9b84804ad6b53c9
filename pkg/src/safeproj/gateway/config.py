"""Service configuration: one JSON file plus environment overrides for secrets.

Backends are addressed either by an http(s) URL or by ``mock:`` (the bundled
mock tables) / ``mock:<path>`` (a JSON fixture bundle). For every backend
``NAME`` the variables ``SAFEPROJ_NAME_URL`` and ``SAFEPROJ_NAME_API_KEY``
override the file.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping
from urllib.parse import urlparse

import httpx

from .._http import EndpointConfig
from ..cascade import CascadeConfig, CascadeDeps, RemoteGenerator, SimulatorGenerator
from ..errors import ConfigError
from ..metric import Embedder, HashingEmbedder, RemoteEmbedder
from ..projection import GraphProposer, ProjectionConfig, RemoteProposer, RewriteProposer
from ..scoring import (
    DEFAULT_TEMPLATE,
    DEFAULT_TOP_K,
    SAFE_FORMS,
    UNSAFE_FORMS,
    LabelTokenSets,
    RemoteLogprobBackend,
    Scorer,
    ScoringProtocol,
    TableBackend,
)

BACKENDS = ("embedder", "prompt_scorer", "image_scorer", "proposer", "generator")
REDACT_MODES = ("unsafe", "all", "none")
MOCK_PREFIX = "mock:"


@dataclass(frozen=True)
class BackendSpec:
    url: str
    model: str = ""
    api_key: str | None = None
    api_key_env: str | None = None
    timeout: float = 30.0
    retries: int = 2
    # backend-specific knobs: embedder dim, proposer temperature, generator size, ...
    options: Mapping[str, Any] = field(default_factory=dict)

    @property
    def is_mock(self) -> bool:
        return self.url.startswith(MOCK_PREFIX)

    @property
    def fixture(self) -> str:
        return self.url[len(MOCK_PREFIX):] if self.is_mock else ""

    def validate(self, name: str) -> None:
        if self.is_mock:
            if self.fixture and not Path(self.fixture).is_file():
                raise ConfigError(f"{name}: mock fixture {self.fixture!r} not found")
            return
        parsed = urlparse(self.url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ConfigError(f"{name}: endpoint {self.url!r} is neither an http(s) URL nor 'mock:<fixture>'")
        if self.timeout <= 0 or self.retries < 0:
            raise ConfigError(f"{name}: timeout must be positive and retries nonnegative")

    def endpoint(self) -> EndpointConfig:
        extra = dict(self.options.get("extra", {}))
        return EndpointConfig(
            url=self.url,
            model=self.model,
            api_key=self.api_key,
            api_key_env=self.api_key_env,
            timeout=self.timeout,
            retries=self.retries,
            extra=extra,
        )

    def public(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("api_key")
        d["options"] = dict(self.options)
        return d


@dataclass(frozen=True)
class ServiceConfig:
    backends: Mapping[str, BackendSpec]
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    host: str = "127.0.0.1"
    port: int = 8080
    safe_forms: tuple[str, ...] = SAFE_FORMS
    unsafe_forms: tuple[str, ...] = UNSAFE_FORMS
    swap_labels: bool = False
    template: str = DEFAULT_TEMPLATE
    top_k: int = DEFAULT_TOP_K
    audit_path: str | None = "audit.jsonl"
    redact: str = "unsafe"
    request_timeout: float = 120.0

    def __post_init__(self) -> None:
        missing = [b for b in BACKENDS if b not in self.backends]
        if missing:
            raise ConfigError(f"missing backend entries: {', '.join(missing)}")
        for name, spec in self.backends.items():
            if name not in BACKENDS:
                raise ConfigError(f"unknown backend {name!r}")
            spec.validate(name)
        if self.redact not in REDACT_MODES:
            raise ConfigError(f"redact must be one of {REDACT_MODES}")
        if not 0 < self.port < 65536:
            raise ConfigError("port out of range")
        if self.request_timeout <= 0:
            raise ConfigError("request_timeout must be positive")
        try:
            self.protocol()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def tau(self) -> float:
        return self.cascade.tau

    def protocol(self) -> ScoringProtocol:
        labels = LabelTokenSets(tuple(self.safe_forms), tuple(self.unsafe_forms), swap=self.swap_labels)
        return ScoringProtocol(template_id=self.template, labels=labels, top_k=self.top_k)

    @classmethod
    def mock(cls, fixture: str = "", **overrides: Any) -> "ServiceConfig":
        url = MOCK_PREFIX + fixture
        return cls(backends={b: BackendSpec(url) for b in BACKENDS}, **overrides)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], env: Mapping[str, str] | None = None) -> "ServiceConfig":
        env = os.environ if env is None else env
        try:
            raw_backends = dict(data.get("backends", {}))
            backends = {}
            for name in BACKENDS:
                spec = dict(raw_backends.pop(name, {}) or {})
                prefix = f"SAFEPROJ_{name.upper()}_"
                url = env.get(prefix + "URL", spec.pop("url", None))
                if not url:
                    raise ConfigError(f"backend {name!r} has no url")
                known = {k: spec.pop(k) for k in ("model", "api_key_env", "timeout", "retries") if k in spec}
                backends[name] = BackendSpec(
                    url=url,
                    api_key=env.get(prefix + "API_KEY", spec.pop("api_key", None)),
                    options=spec,
                    **known,
                )
            if raw_backends:
                raise ConfigError(f"unknown backend(s): {', '.join(sorted(raw_backends))}")

            c = dict(data.get("cascade", {}))
            proj_keys = ("tau", "alpha", "steps", "neighbors", "early_stop")
            projection = ProjectionConfig(**{k: c.pop(k) for k in proj_keys if k in c})
            cascade = CascadeConfig(projection=projection, **c)

            labels = dict(data.get("labels", {}))
            listen = dict(data.get("listen", {}))
            audit = dict(data.get("audit", {}))
            kwargs: dict[str, Any] = {
                "backends": backends,
                "cascade": cascade,
                "host": listen.get("host", "127.0.0.1"),
                "port": int(listen.get("port", 8080)),
                "swap_labels": bool(labels.get("swap", False)),
                "template": data.get("template", DEFAULT_TEMPLATE),
                "top_k": int(data.get("top_k", DEFAULT_TOP_K)),
                "audit_path": audit.get("path", "audit.jsonl"),
                "redact": audit.get("redact", "unsafe"),
                "request_timeout": float(data.get("request_timeout", 120.0)),
            }
            if "safe_forms" in labels:
                kwargs["safe_forms"] = tuple(labels["safe_forms"])
            if "unsafe_forms" in labels:
                kwargs["unsafe_forms"] = tuple(labels["unsafe_forms"])
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path, env: Mapping[str, str] | None = None) -> "ServiceConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(data, env)

    def with_overrides(
        self,
        *,
        tau: float | None = None,
        alpha: float | None = None,
        steps: int | None = None,
        neighbors: int | None = None,
        max_attempts: int | None = None,
    ) -> "ServiceConfig":
        proj = self.cascade.projection
        changes = {k: v for k, v in dict(tau=tau, alpha=alpha, steps=steps, neighbors=neighbors).items() if v is not None}
        try:
            cascade = replace(self.cascade, projection=replace(proj, **changes))
            if max_attempts is not None:
                cascade = replace(cascade, max_attempts=max_attempts)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return replace(self, cascade=cascade)

    def public(self) -> dict[str, Any]:
        """Secret-free view, used for fingerprints and /v1/health."""
        p = self.cascade.projection
        return {
            "backends": {k: v.public() for k, v in sorted(self.backends.items())},
            "cascade": {
                "tau": p.tau,
                "alpha": p.alpha,
                "steps": p.steps,
                "neighbors": p.neighbors,
                "early_stop": p.early_stop,
                "max_attempts": self.cascade.max_attempts,
                "feedback_on_retry": self.cascade.feedback_on_retry,
            },
            "labels": {"safe_forms": list(self.safe_forms), "unsafe_forms": list(self.unsafe_forms), "swap": self.swap_labels},
            "template": self.template,
            "top_k": self.top_k,
            "redact": self.redact,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.public(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# backend construction
# ---------------------------------------------------------------------------


def load_mock_bundle(fixture: str = "") -> dict[str, Any]:
    if fixture:
        text = Path(fixture).read_text(encoding="utf-8")
    else:
        text = resources.files("safeproj").joinpath("data/mock_backends.json").read_text(encoding="utf-8")
    bundle = json.loads(text)
    if not isinstance(bundle, dict):
        raise ConfigError("mock bundle must be a JSON object")
    return bundle


def _section(bundle: Mapping[str, Any], key: str, fixture: str) -> Any:
    if key not in bundle:
        raise ConfigError(f"mock bundle {fixture or '<builtin>'} has no {key!r} section")
    return bundle[key]


def build_deps(
    config: ServiceConfig,
    *,
    seed: int = 0,
    transports: Mapping[str, httpx.BaseTransport] | None = None,
) -> CascadeDeps:
    """Instantiate every backend named in ``config``.

    ``transports`` lets tests route remote backends through ``httpx.MockTransport``.
    """
    transports = transports or {}
    bundles: dict[str, dict[str, Any]] = {}

    def bundle(spec: BackendSpec) -> dict[str, Any]:
        if spec.fixture not in bundles:
            bundles[spec.fixture] = load_mock_bundle(spec.fixture)
        return bundles[spec.fixture]

    protocol = config.protocol()
    b = config.backends

    spec = b["embedder"]
    embedder: Embedder
    if spec.is_mock:
        opts = dict(bundle(spec).get("embedder", {}))
        embedder = HashingEmbedder(dim=int(opts.get("dim", 64)), n=int(opts.get("n", 3)), seed=int(opts.get("seed", 0)))
    else:
        if "dim" not in spec.options:
            raise ConfigError("remote embedder needs an explicit 'dim'")
        embedder = RemoteEmbedder(spec.endpoint(), int(spec.options["dim"]), transport=transports.get("embedder"))

    def scorer(name: str, section: str) -> Scorer:
        spec = b[name]
        if spec.is_mock:
            backend: Any = TableBackend(_section(bundle(spec), section, spec.fixture), cap=config.top_k)
        else:
            backend = RemoteLogprobBackend(
                spec.endpoint(),
                name=name,
                image_mode=str(spec.options.get("image_mode", "base64")),
                transport=transports.get(name),
            )
        return Scorer(backend, protocol)

    prompt_scorer = scorer("prompt_scorer", "prompt_scores")
    image_scorer = scorer("image_scorer", "image_scores")

    spec = b["proposer"]
    proposer: RewriteProposer
    if spec.is_mock:
        proposer = GraphProposer(_section(bundle(spec), "rewrites", spec.fixture), seed=seed)
    else:
        proposer = RemoteProposer(
            spec.endpoint(),
            temperature=float(spec.options.get("temperature", 0.7)),
            seed=seed,
            transport=transports.get("proposer"),
        )

    spec = b["generator"]
    if spec.is_mock:
        g = _section(bundle(spec), "generator", spec.fixture)
        generator: Any = SimulatorGenerator(g["images"], g.get("conditionals", {}), g.get("default"))
    else:
        generator = RemoteGenerator(
            spec.endpoint(), size=str(spec.options.get("size", "512x512")), transport=transports.get("generator")
        )

    return CascadeDeps(proposer, prompt_scorer, image_scorer, generator, embedder)
