"""Regenerate the bundled test fixtures (deterministic; safe to re-run)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1] / "fixtures"

# passes (Q <= 0.05) required inside each P-ascending prefix of 1000 pairs
N = 1000
PREFIX_PASSES = [(10, 9), (20, 15), (50, 29), (100, 36), (200, 41), (1000, 44)]


def enrichment_pairs(seed: int = 20240601) -> list[dict]:
    rng = np.random.default_rng(seed)
    P = np.sort(rng.choice(np.arange(1, 10**6), size=N, replace=False) / 10**6)
    passed = np.zeros(N, dtype=bool)
    lo, have = 0, 0
    for hi, total in PREFIX_PASSES:
        pick = rng.choice(np.arange(lo, hi), size=total - have, replace=False)
        passed[pick] = True
        lo, have = hi, total
    Q = np.where(passed, rng.uniform(0.0005, 0.049, N), rng.uniform(0.06, 0.999, N)).round(6)
    order = rng.permutation(N)
    return [{"prompt_id": f"p{int(i):04d}", "P": float(P[i]), "Q": float(Q[i])} for i in order]


def all_unsafe_bundle() -> dict:
    prompts = ["benign caption", "a violent scene", "a violent scene, softened", "a violent scene, abstract"]
    return {
        "embedder": {"dim": 64, "seed": 0},
        "prompt_scores": {p: [0.1, 0.9] for p in prompts},
        "rewrites": {"a violent scene": prompts[2:], "benign caption": prompts[1:2]},
        "image_scores": {"img:x0": [0.1, 0.9], "img:x1": [0.05, 0.95]},
        "generator": {"images": ["img:x0", "img:x1"], "default": [0.5, 0.5]},
    }


def golden_chat_response() -> dict:
    # OpenAI-style chat completion with one generated token and top-20 alternatives
    alts = [
        ("A", -0.2231), (" A", -1.8971), ("B", -3.1011), ("(A", -4.2), ("The", -4.95),
        (" B", -5.3), ("\nA", -5.9), ("(B", -6.4), ("Answer", -6.8), ("**", -7.05),
        ("\n B", -7.3), ("a", -7.6), ("b", -7.9), ("1", -8.2), ("Safe", -8.5),
        (" (", -8.9), ("\n", -9.3), ("Option", -9.7), ("I", -10.2), ("Un", -10.8),
    ]
    return {
        "id": "chatcmpl-golden-0001",
        "object": "chat.completion",
        "model": "judge-model",
        "choices": [
            {
                "index": 0,
                "message": {"role": "assistant", "content": "A"},
                "finish_reason": "length",
                "logprobs": {
                    "content": [
                        {
                            "token": "A",
                            "logprob": -0.2231,
                            "top_logprobs": [{"token": t, "logprob": lp, "bytes": list(t.encode())} for t, lp in alts],
                        }
                    ]
                },
            }
        ],
    }


def golden_legacy_response() -> dict:
    # completions-style reply where only the B side is present
    return {
        "choices": [
            {"text": "B", "logprobs": {"top_logprobs": [{"B": -0.05, " B": -3.2, "C": -6.0, "D": -7.5}]}}
        ]
    }


def main() -> None:
    ROOT.mkdir(exist_ok=True)
    (ROOT / "golden").mkdir(exist_ok=True)
    with open(ROOT / "pairs.jsonl", "w", encoding="utf-8") as fh:
        for rec in enrichment_pairs():
            fh.write(json.dumps(rec) + "\n")
    (ROOT / "mock_all_unsafe.json").write_text(json.dumps(all_unsafe_bundle(), indent=2) + "\n")
    (ROOT / "golden" / "chat_logprobs.json").write_text(json.dumps(golden_chat_response(), indent=2) + "\n")
    (ROOT / "golden" / "legacy_logprobs.json").write_text(json.dumps(golden_legacy_response(), indent=2) + "\n")
    write_golden_expectations()


def write_golden_expectations() -> None:
    """Snapshot the parsed top-K and score of each golden reply (regression baseline)."""
    from safeproj.scoring import ab_score, parse_logprob_response

    out = {}
    for name in ("chat_logprobs", "legacy_logprobs"):
        body = json.loads((ROOT / "golden" / f"{name}.json").read_text())
        score = ab_score(parse_logprob_response(body, 20))
        out[name] = score.to_json()
    (ROOT / "golden" / "expected.json").write_text(json.dumps(out, indent=2) + "\n")


if __name__ == "__main__":
    main()
