"""Finite-space realization of the TV safety/alignment theory.

Prompts and images are finite sets, conditionals are row-stochastic matrices,
and every quantity (TV, unsafety functionals, tau-safe sets, nearest-safe
projection sets, projection kernels) is computed exactly. The ``check_*``
functions return residuals that the theory says are nonnegative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InfeasibleProjectionError, InvalidEmbeddingError
from .metric import normalize, pairwise_angular

STOCHASTIC_TOL = 1e-12
# slack for treating two angular distances as tied
ARGMIN_SLACK = 1e-9

FloatArray = NDArray[np.float64]


def _prob_vector(p: ArrayLike, what: str) -> FloatArray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{what} must be a nonempty 1-D vector")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} must be finite and nonnegative")
    if abs(arr.sum() - 1.0) > STOCHASTIC_TOL:
        raise ValueError(f"{what} sums to {arr.sum()!r}, not 1")
    return arr


def _stochastic(m: ArrayLike, what: str) -> FloatArray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or 0 in arr.shape:
        raise ValueError(f"{what} must be a nonempty 2-D matrix")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} must be finite and nonnegative")
    dev = np.abs(arr.sum(axis=1) - 1.0)
    if np.any(dev > STOCHASTIC_TOL):
        raise ValueError(f"{what} row {int(np.argmax(dev))} sums to {arr.sum(axis=1)[np.argmax(dev)]!r}")
    return arr


@dataclass(frozen=True)
class DiscretePromptSpace:
    ids: tuple[str, ...]
    texts: tuple[str, ...]
    embeddings: FloatArray
    mu: FloatArray

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings, dtype=np.float64)
        n = len(self.ids)
        if emb.ndim != 2 or emb.shape[0] != n or len(self.texts) != n:
            raise ValueError("ids, texts and embedding rows must align")
        if len(set(self.ids)) != n:
            raise ValueError("prompt ids must be unique")
        if np.any(np.linalg.norm(emb, axis=1) <= 0):
            raise InvalidEmbeddingError("zero embedding in prompt space")
        object.__setattr__(self, "embeddings", emb)
        mu = _prob_vector(self.mu, "mu")
        if mu.shape[0] != n:
            raise ValueError("mu length must match number of prompts")
        object.__setattr__(self, "mu", mu)

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, prompt_id: str | int) -> int:
        if isinstance(prompt_id, (int, np.integer)):
            if not 0 <= prompt_id < len(self.ids):
                raise KeyError(f"unknown prompt index {prompt_id}")
            return int(prompt_id)
        try:
            return self.ids.index(prompt_id)
        except ValueError:
            raise KeyError(f"unknown prompt id {prompt_id!r}") from None

    def distances(self) -> FloatArray:
        return pairwise_angular(self.embeddings)


@dataclass(frozen=True)
class DiscreteGenerator:
    """Conditionals G(.|c) as a |prompts| x |images| row-stochastic matrix."""

    matrix: FloatArray

    def __post_init__(self) -> None:
        object.__setattr__(self, "matrix", _stochastic(self.matrix, "generator"))

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape  # type: ignore[return-value]

    def row(self, c: int) -> FloatArray:
        if not 0 <= c < self.matrix.shape[0]:
            raise KeyError(f"unknown prompt index {c}")
        return self.matrix[c]


@dataclass(frozen=True)
class UnsafetyFunction:
    values: FloatArray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
            raise ValueError("unsafety values must be a 1-D vector in [0, 1]")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class ProjectionKernel:
    matrix: FloatArray
    safe: NDArray[np.bool_]

    def __post_init__(self) -> None:
        m = _stochastic(self.matrix, "kernel")
        safe = np.asarray(self.safe, dtype=bool)
        if m.shape[0] != m.shape[1] or safe.shape != (m.shape[0],):
            raise ValueError("kernel must be square with a matching safe mask")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "safe", safe)


# ---------------------------------------------------------------------------
# functionals
# ---------------------------------------------------------------------------


def prompt_unsafety(G: DiscreteGenerator, U: UnsafetyFunction, c: int) -> float:
    """Expected unsafety of images drawn for prompt ``c``."""
    row = G.row(c)
    if row.shape != U.values.shape:
        raise ValueError("generator and unsafety function disagree on the image space")
    return float(row @ U.values)


def prompt_unsafety_all(G: DiscreteGenerator, U: UnsafetyFunction) -> FloatArray:
    if G.matrix.shape[1] != U.values.shape[0]:
        raise ValueError("generator and unsafety function disagree on the image space")
    return G.matrix @ U.values


def population_unsafety(G: DiscreteGenerator, U: UnsafetyFunction, mu: ArrayLike) -> float:
    mu = _prob_vector(mu, "mu")
    if mu.shape[0] != G.matrix.shape[0]:
        raise ValueError("mu length must match the number of prompts")
    return float(mu @ prompt_unsafety_all(G, U))


def tv_discrete(p: ArrayLike, q: ArrayLike) -> float:
    """Total variation between two distributions on the same finite set."""
    p = _prob_vector(p, "p")
    q = _prob_vector(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape[0]} vs {q.shape[0]}")
    return float(min(1.0, 0.5 * np.abs(p - q).sum()))


def _row_tv(A: FloatArray, B: FloatArray) -> FloatArray:
    return np.minimum(1.0, 0.5 * np.abs(A - B).sum(axis=1))


def alignment_tv(G: DiscreteGenerator, G_ref: DiscreteGenerator, mu: ArrayLike) -> float:
    """Mu-average of per-prompt TV between ``G`` and the reference."""
    if G.matrix.shape != G_ref.matrix.shape:
        raise ValueError("generators must share shape")
    mu = _prob_vector(mu, "mu")
    return float(mu @ _row_tv(G.matrix, G_ref.matrix))


def safe_set(G_ref: DiscreteGenerator, U: UnsafetyFunction, tau: float) -> frozenset[int]:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    u = prompt_unsafety_all(G_ref, U)
    return frozenset(int(i) for i in np.nonzero(u <= tau)[0])


def _mask(safe: Iterable[int], n: int) -> NDArray[np.bool_]:
    m = np.zeros(n, dtype=bool)
    for i in safe:
        if not 0 <= i < n:
            raise KeyError(f"safe index {i} out of range")
        m[i] = True
    return m


def brute_force_projection(
    c: int,
    safe: Iterable[int],
    space: DiscretePromptSpace,
    dist: FloatArray | None = None,
) -> frozenset[int]:
    """All safe prompts within ARGMIN_SLACK of the minimal angular distance to ``c``."""
    c = space.index(c)
    safe_idx = np.array(sorted(set(safe)), dtype=int)
    if safe_idx.size == 0:
        raise InfeasibleProjectionError("tau-safe set is empty; nothing to project onto")
    if dist is None:
        d = pairwise_angular(space.embeddings[c : c + 1], space.embeddings[safe_idx])[0]
    else:
        d = dist[c, safe_idx]
    best = d.min()
    return frozenset(int(i) for i in safe_idx[d <= best + ARGMIN_SLACK])


def nearest_sets(space: DiscretePromptSpace, safe: Iterable[int]) -> list[frozenset[int]]:
    safe = frozenset(safe)
    dist = space.distances()
    return [brute_force_projection(c, safe, space, dist) for c in range(len(space))]


def build_projection_kernel(
    space: DiscretePromptSpace,
    safe: Iterable[int],
    nearest: Sequence[frozenset[int]] | None = None,
    policy: str = "uniform-fiber",
) -> ProjectionKernel:
    """Dirac rows on safe prompts; uniform mass over the nearest safe set otherwise."""
    if policy != "uniform-fiber":
        raise ValueError(f"unknown fiber policy {policy!r}")
    n = len(space)
    safe = frozenset(safe)
    if not safe:
        raise InfeasibleProjectionError("tau-safe set is empty; no projection kernel exists")
    if nearest is None:
        nearest = nearest_sets(space, safe)
    K = np.zeros((n, n), dtype=np.float64)
    for c in range(n):
        if c in safe:
            K[c, c] = 1.0
            continue
        targets = sorted(nearest[c])
        if not targets or not set(targets) <= safe:
            raise ValueError(f"nearest set for prompt {c} must be a nonempty subset of the safe set")
        K[c, targets] = 1.0 / len(targets)
    return ProjectionKernel(K, _mask(safe, n))


def project_conditionals(G: DiscreteGenerator, kernel: ProjectionKernel) -> DiscreteGenerator:
    """Kernel mixture of conditionals: row c becomes sum_c' K[c, c'] G(.|c')."""
    if kernel.matrix.shape[1] != G.matrix.shape[0]:
        raise ValueError("kernel columns must match generator rows")
    return DiscreteGenerator(kernel.matrix @ G.matrix)


def kernel_violations(
    kernel: ProjectionKernel, nearest: Sequence[frozenset[int]] | None = None, tol: float = STOCHASTIC_TOL
) -> list[str]:
    """Human-readable list of broken kernel invariants (empty when valid)."""
    K, safe = kernel.matrix, kernel.safe
    out: list[str] = []
    off = K[:, ~safe]
    if off.size and off.max() > tol:
        out.append("mass on unsafe columns")
    for c in np.nonzero(safe)[0]:
        expect = np.zeros(K.shape[1])
        expect[c] = 1.0
        if np.abs(K[c] - expect).max() > tol:
            out.append(f"safe row {c} is not Dirac")
    if nearest is not None:
        for c in np.nonzero(~safe)[0]:
            outside = [j for j in np.nonzero(K[c] > tol)[0] if j not in nearest[c]]
            if outside:
                out.append(f"row {c} puts mass outside its nearest set: {outside}")
    return out


def check_idempotence(kernel: ProjectionKernel | ArrayLike) -> float:
    """Max-norm of K @ K - K."""
    K = kernel.matrix if isinstance(kernel, ProjectionKernel) else np.asarray(kernel, dtype=np.float64)
    return float(np.abs(K @ K - K).max())


def check_pointwise_spat(
    G: DiscreteGenerator, G_ref: DiscreteGenerator, U: UnsafetyFunction, c: int
) -> float:
    """u(G|c) - u(G*|c) + TV(rows); also asserts the two-sided bound |du| <= TV."""
    u = prompt_unsafety(G, U, c)
    u_ref = prompt_unsafety(G_ref, U, c)
    tv = tv_discrete(G.row(c), G_ref.row(c))
    if abs(u - u_ref) > tv + STOCHASTIC_TOL:
        raise AssertionError(f"|u - u*| = {abs(u - u_ref)!r} exceeds TV = {tv!r} at prompt {c}")
    return u - u_ref + tv


def check_spat(G: DiscreteGenerator, G_ref: DiscreteGenerator, U: UnsafetyFunction, mu: ArrayLike) -> float:
    """Population residual U(G) + A_TV(G) - U(G*)."""
    return population_unsafety(G, U, mu) + alignment_tv(G, G_ref, mu) - population_unsafety(G_ref, U, mu)


@dataclass(frozen=True)
class KernelSpatResult:
    residual: float
    floor_gap: float
    projected_unsafety: float
    reference_unsafety: float
    alignment: float


def check_kernel_spat(
    G: DiscreteGenerator,
    G_ref: DiscreteGenerator,
    U: UnsafetyFunction,
    mu: ArrayLike,
    kernel: ProjectionKernel,
    tau: float,
) -> KernelSpatResult:
    """Kernelized residual and the tau-floor gap for the projected reference."""
    G_t = project_conditionals(G, kernel)
    G_r = project_conditionals(G_ref, kernel)
    u_t = population_unsafety(G_t, U, mu)
    u_r = population_unsafety(G_r, U, mu)
    a = alignment_tv(G_t, G_r, mu)
    return KernelSpatResult(u_t + a - u_r, tau - u_r, u_t, u_r, a)


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------


@dataclass
class Instance:
    space: DiscretePromptSpace
    G: DiscreteGenerator
    G_ref: DiscreteGenerator
    U: UnsafetyFunction
    tau: float = 0.05
    seed: int | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        n, m = self.G_ref.shape
        if self.G.shape != (n, m) or len(self.space) != n or self.U.values.shape[0] != m:
            raise ValueError("instance components have inconsistent sizes")

    def to_json(self) -> dict[str, Any]:
        return {
            "prompts": [
                {"id": i, "text": t, "embedding": e.tolist()}
                for i, t, e in zip(self.space.ids, self.space.texts, self.space.embeddings)
            ],
            "mu": self.space.mu.tolist(),
            "G": self.G.matrix.tolist(),
            "Gstar": self.G_ref.matrix.tolist(),
            "U": self.U.values.tolist(),
            "tau": self.tau,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "Instance":
        prompts = data["prompts"]
        space = DiscretePromptSpace(
            ids=tuple(str(p["id"]) for p in prompts),
            texts=tuple(str(p.get("text", "")) for p in prompts),
            embeddings=np.array([p["embedding"] for p in prompts], dtype=np.float64),
            mu=np.array(data["mu"], dtype=np.float64),
        )
        return cls(
            space,
            DiscreteGenerator(np.array(data["G"], dtype=np.float64)),
            DiscreteGenerator(np.array(data["Gstar"], dtype=np.float64)),
            UnsafetyFunction(np.array(data["U"], dtype=np.float64)),
            float(data.get("tau", 0.05)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Instance":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _simplex_rows(rng: np.random.Generator, n: int, m: int) -> FloatArray:
    # flat Dirichlet; exact unit row sums via renormalization of float64 draws
    rows = rng.dirichlet(np.ones(m), size=n)
    return rows / rows.sum(axis=1, keepdims=True)


def random_instance(
    seed: int,
    sizes: tuple[int, int] | None = None,
    tau: float = 0.05,
    dim: int = 8,
    max_prompts: int = 20,
    max_images: int = 20,
    duplicate_rate: float = 0.15,
) -> Instance:
    """Seeded random instance for property sweeps.

    ``sizes`` is ``(n_prompts, n_images)``; when omitted both are drawn from
    [2, max]. Some prompts reuse a positively rescaled embedding of an earlier
    prompt so zero-distance fibers show up. The deployed generator ``G`` is a
    random mixture of the reference rows with fresh simplex rows; image
    unsafety values are skewed toward zero so tau-safe sets are often
    nonempty at small tau.
    """
    rng = np.random.default_rng(seed)
    if sizes is None:
        n = int(rng.integers(2, max_prompts + 1))
        m = int(rng.integers(2, max_images + 1))
    else:
        n, m = sizes
    if n < 1 or m < 1:
        raise ValueError("sizes must be positive")

    emb = np.stack([normalize(rng.normal(size=dim)) for _ in range(n)])
    for i in range(1, n):
        if rng.random() < duplicate_rate:
            j = int(rng.integers(0, i))
            emb[i] = emb[j] * rng.uniform(0.5, 2.0)

    mu = rng.dirichlet(np.ones(n))
    mu = mu / mu.sum()
    G_ref = _simplex_rows(rng, n, m)
    lam = rng.uniform(0.0, 1.0, size=(n, 1))
    G = (1.0 - lam) * G_ref + lam * _simplex_rows(rng, n, m)
    G = G / G.sum(axis=1, keepdims=True)
    U = rng.uniform(size=m) ** 3

    space = DiscretePromptSpace(
        ids=tuple(f"c{i}" for i in range(n)),
        texts=tuple(f"prompt {i}" for i in range(n)),
        embeddings=emb,
        mu=mu,
    )
    return Instance(space, DiscreteGenerator(G), DiscreteGenerator(G_ref), UnsafetyFunction(U), tau, seed)


# ---------------------------------------------------------------------------
# independent TV route and the full property suite
# ---------------------------------------------------------------------------

SUBSET_TV_MAX = 16


def tv_subset_sup(p: ArrayLike, q: ArrayLike) -> float:
    """TV as the largest event-probability gap, by enumerating all 2^n events."""
    p = _prob_vector(p, "p")
    q = _prob_vector(q, "q")
    n = p.shape[0]
    if q.shape[0] != n:
        raise ValueError("dimension mismatch")
    if n > SUBSET_TV_MAX:
        raise ValueError(f"subset enumeration limited to {SUBSET_TV_MAX} outcomes")
    events = (np.arange(1 << n)[:, None] >> np.arange(n)) & 1
    return float(np.abs(events @ (p - q)).max())


def expectation_gap(p: ArrayLike, q: ArrayLike, f: ArrayLike) -> float:
    """|E_p f - E_q f| for a test function f with values in [0, 1]."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0) or np.any(f > 1):
        raise ValueError("test function must take values in [0, 1]")
    return float(abs(_prob_vector(p, "p") @ f - _prob_vector(q, "q") @ f))


SWEEP_TAUS = (0.05, 0.1, 0.3, 0.5)


@dataclass
class SuiteReport:
    instances: int
    first_seed: int
    taus: tuple[float, ...]
    min_spat_residual: float = np.inf
    min_pointwise_residual: float = np.inf
    min_kernel_residual: float = np.inf
    min_floor_gap: float = np.inf
    max_idempotence_error: float = 0.0
    max_tv_route_gap: float = 0.0
    feasible: dict[str, int] = field(default_factory=dict)
    infeasible: dict[str, int] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> dict[str, Any]:
        def num(v: float) -> float | None:
            return None if not np.isfinite(v) else float(v)

        return {
            "ok": self.ok,
            "instances": self.instances,
            "first_seed": self.first_seed,
            "taus": list(self.taus),
            "min_spat_residual": num(self.min_spat_residual),
            "min_pointwise_residual": num(self.min_pointwise_residual),
            "min_kernel_residual": num(self.min_kernel_residual),
            "min_floor_gap": num(self.min_floor_gap),
            "max_idempotence_error": self.max_idempotence_error,
            "max_tv_route_gap": self.max_tv_route_gap,
            "feasible": self.feasible,
            "infeasible": self.infeasible,
            "violations": self.violations,
        }

    def table(self) -> str:
        rows = [
            ("SPAT residual (min)", self.min_spat_residual, ">= -1e-12"),
            ("pointwise residual (min)", self.min_pointwise_residual, ">= -1e-12"),
            ("kernel residual (min)", self.min_kernel_residual, ">= -1e-12"),
            ("tau - U(G_ref) (min)", self.min_floor_gap, ">= -1e-12"),
            ("|K^2 - K| (max)", self.max_idempotence_error, "<= 1e-12"),
            ("|TV - subset TV| (max)", self.max_tv_route_gap, "<= 1e-12"),
        ]
        lines = [f"{'quantity':<28}{'value':>14}  bound"]
        lines += [f"{name:<28}{v:>14.3e}  {bound}" for name, v, bound in rows]
        for t in self.taus:
            key = str(t)
            lines.append(f"tau={key:<5} feasible={self.feasible.get(key, 0):<6} infeasible={self.infeasible.get(key, 0)}")
        lines.append("violations: " + (str(len(self.violations)) if self.violations else "none"))
        return "\n".join(lines)


def run_property_suite(
    first_seed: int = 1,
    instances: int = 1000,
    taus: Sequence[float] = SWEEP_TAUS,
    tol: float = STOCHASTIC_TOL,
    **instance_kwargs: Any,
) -> SuiteReport:
    """SPAT, pointwise SPAT, kernelized SPAT, tau-floor and idempotence over seeded instances."""
    rep = SuiteReport(instances, first_seed, tuple(taus))
    for t in taus:
        rep.feasible[str(t)] = rep.infeasible[str(t)] = 0

    for seed in range(first_seed, first_seed + instances):
        inst = random_instance(seed, **instance_kwargs)
        G, G_ref, U, mu = inst.G, inst.G_ref, inst.U, inst.space.mu

        r = check_spat(G, G_ref, U, mu)
        rep.min_spat_residual = min(rep.min_spat_residual, r)
        if r < -tol:
            rep.violations.append(f"seed {seed}: SPAT residual {r!r}")
        for c in range(len(inst.space)):
            try:
                r = check_pointwise_spat(G, G_ref, U, c)
            except AssertionError as exc:
                rep.violations.append(f"seed {seed}: {exc}")
                continue
            rep.min_pointwise_residual = min(rep.min_pointwise_residual, r)
            if r < -tol:
                rep.violations.append(f"seed {seed}, prompt {c}: pointwise residual {r!r}")
            if G.shape[1] <= 12:
                gap = abs(tv_discrete(G.row(c), G_ref.row(c)) - tv_subset_sup(G.row(c), G_ref.row(c)))
                rep.max_tv_route_gap = max(rep.max_tv_route_gap, gap)
                if gap > tol:
                    rep.violations.append(f"seed {seed}, prompt {c}: TV routes differ by {gap!r}")

        dist = inst.space.distances()
        for t in taus:
            safe = safe_set(G_ref, U, t)
            if not safe:
                rep.infeasible[str(t)] += 1
                try:
                    build_projection_kernel(inst.space, safe)
                except InfeasibleProjectionError:
                    continue
                rep.violations.append(f"seed {seed}, tau {t}: empty safe set did not raise")
                continue
            rep.feasible[str(t)] += 1
            nearest = [brute_force_projection(c, safe, inst.space, dist) for c in range(len(inst.space))]
            K = build_projection_kernel(inst.space, safe, nearest)
            res = check_kernel_spat(G, G_ref, U, mu, K, t)
            idem = check_idempotence(K)
            rep.min_kernel_residual = min(rep.min_kernel_residual, res.residual)
            rep.min_floor_gap = min(rep.min_floor_gap, res.floor_gap)
            rep.max_idempotence_error = max(rep.max_idempotence_error, idem)
            if res.residual < -tol:
                rep.violations.append(f"seed {seed}, tau {t}: kernel residual {res.residual!r}")
            if res.floor_gap < -tol:
                rep.violations.append(f"seed {seed}, tau {t}: U(G_ref) exceeds tau by {-res.floor_gap!r}")
            if idem > tol:
                rep.violations.append(f"seed {seed}, tau {t}: idempotence error {idem!r}")
            for v in kernel_violations(K, nearest, tol):
                rep.violations.append(f"seed {seed}, tau {t}: {v}")
    return rep
