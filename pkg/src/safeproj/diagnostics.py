"""Operational diagnostics: routing enrichment, agreement, IP rates, drift.

All functions are pure. Undefined quantities (zero baselines, zero variance)
come back as ``None`` rather than inf/nan so reports serialize cleanly.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.stats import rankdata

from .metric import centroid

DEFAULT_FRACTIONS = (0.01, 0.02, 0.05, 0.10, 0.20)


@dataclass(frozen=True)
class PairedScores:
    """Stage-1 prompt score P and Stage-2 image score Q per sample."""

    P: tuple[float, ...]
    Q: tuple[float, ...]
    ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.P) != len(self.Q):
            raise ValueError("P and Q must have equal length")
        for v in (*self.P, *self.Q):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"score {v!r} outside [0, 1]")
        if self.ids and len(self.ids) != len(self.P):
            raise ValueError("ids must align with scores")

    def __len__(self) -> int:
        return len(self.P)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[float, float]]) -> "PairedScores":
        pairs = list(pairs)
        return cls(tuple(float(p) for p, _ in pairs), tuple(float(q) for _, q in pairs))

    @classmethod
    def from_records(cls, records: Iterable[dict[str, Any]]) -> "PairedScores":
        """Accepts ``{prompt_id, P, Q}`` score records or gateway audit records."""
        P: list[float] = []
        Q: list[float] = []
        ids: list[str] = []
        for i, rec in enumerate(records):
            if "P" in rec and "Q" in rec:
                p, q = rec["P"], rec["Q"]
            elif rec.get("kind") == "generate" and rec.get("attempts"):
                last = rec["attempts"][-1]
                p = last["stage1"]["value"]
                q = last["stage2"]["value"]
            else:
                continue
            P.append(float(p))
            Q.append(float(q))
            ids.append(str(rec.get("prompt_id", rec.get("request_id", i))))
        return cls(tuple(P), tuple(Q), tuple(ids))

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "PairedScores":
        with open(path, encoding="utf-8") as fh:
            return cls.from_records(json.loads(line) for line in fh if line.strip())


@dataclass(frozen=True)
class EnrichmentRow:
    f: float
    k: int
    pass_rate: float
    enrichment: float | None
    accepted: int
    recall: float | None


def enrichment_curve(
    pairs: PairedScores, tau: float, fractions: Sequence[float] = DEFAULT_FRACTIONS
) -> list[EnrichmentRow]:
    """Stage-2 pass rate among the lowest-P fraction ``f`` of samples.

    Samples are sorted by P ascending (stable, so ties keep input order) and
    the first ``k = ceil(f n)`` are forwarded. ``recall`` is the share of all
    passes (Q <= tau over every pair) found in the forwarded prefix.
    """
    n = len(pairs)
    if n == 0:
        raise ValueError("enrichment needs at least one pair")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    order = sorted(range(n), key=lambda i: pairs.P[i])
    passed = [pairs.Q[i] <= tau for i in order]
    total = sum(passed)
    baseline = total / n
    prefix = np.concatenate([[0], np.cumsum(passed)])
    rows = []
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fraction {f} outside (0, 1]")
        # guard against f*n landing one ulp above an integer
        k = min(n, max(1, math.ceil(f * n - 1e-9)))
        accepted = int(prefix[k])
        rate = accepted / k
        rows.append(
            EnrichmentRow(
                f=f,
                k=k,
                pass_rate=rate,
                enrichment=rate / baseline if baseline > 0 else None,
                accepted=accepted,
                recall=accepted / total if total > 0 else None,
            )
        )
    return rows


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return None
    return max(-1.0, min(1.0, float(dx @ dy) / denom))


def correlation(pairs: PairedScores) -> tuple[float | None, float | None]:
    """(Pearson, Spearman) between P and Q; Spearman uses average ranks for ties."""
    if len(pairs) < 2:
        raise ValueError("correlation needs at least two pairs")
    x = np.asarray(pairs.P, dtype=np.float64)
    y = np.asarray(pairs.Q, dtype=np.float64)
    return _pearson(x, y), _pearson(rankdata(x), rankdata(y))


def ip_rate(scores: Sequence[float], threshold: float = 0.5) -> float:
    """Fraction of scores strictly above ``threshold``."""
    if len(scores) == 0:
        raise ValueError("ip_rate of an empty list")
    return sum(1 for s in scores if s > threshold) / len(scores)


def ip_rate_multi(heads: Sequence[Sequence[float]], threshold: float = 0.5) -> float:
    """IP over several detector heads, flagging on the per-sample max."""
    return ip_rate([max(col) for col in zip(*heads)], threshold)


_WS = re.compile(r"\s+")


def canonicalize(text: str) -> str:
    return _WS.sub(" ", text.lower()).strip()


def fixed_point_ratio(before: Sequence[str], after: Sequence[str]) -> float:
    """Share of positions unchanged after lowercase/whitespace canonicalization."""
    if len(before) != len(after):
        raise ValueError("before and after must align")
    if not before:
        raise ValueError("fixed_point_ratio of empty lists")
    same = sum(canonicalize(a) == canonicalize(b) for a, b in zip(before, after))
    return same / len(before)


unchanged_ratio = fixed_point_ratio


def centroid_drift(orig: Sequence[ArrayLike], proj: Sequence[ArrayLike]) -> float:
    """Euclidean distance between centroids of the normalized embeddings."""
    return float(np.linalg.norm(centroid(orig) - centroid(proj)))


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def _fmt(v: float | None, spec: str) -> str:
    return "n/a" if v is None else format(v, spec)


def enrichment_table(rows: Sequence[EnrichmentRow]) -> str:
    head = f"{'f':>6} {'k':>6} {'pass_rate':>10} {'enrich':>8} {'accepted':>9} {'recall':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.f:>6.2f} {r.k:>6d} {r.pass_rate:>10.3f} {_fmt(r.enrichment, '.2f'):>8} "
            f"{r.accepted:>9d} {_fmt(r.recall, '.3f'):>7}"
        )
    return "\n".join(lines)


def enrichment_csv(rows: Sequence[EnrichmentRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["f", "k", "pass_rate", "enrichment", "accepted", "recall"])
    w.writeheader()
    for r in rows:
        w.writerow(asdict(r))
    return buf.getvalue()


def enrichment_report(pairs: PairedScores, tau: float, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> dict[str, Any]:
    rows = enrichment_curve(pairs, tau, fractions)
    passes = sum(q <= tau for q in pairs.Q)
    pearson, spearman = correlation(pairs) if len(pairs) >= 2 else (None, None)
    return {
        "n": len(pairs),
        "tau": tau,
        "baseline": passes / len(pairs),
        "total_passes": passes,
        "pearson": pearson,
        "spearman": spearman,
        "rows": [asdict(r) for r in rows],
    }
