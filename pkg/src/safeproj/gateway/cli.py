"""Command-line entry point.

Exit codes: 0 success, 1 failure or property violation, 2 usage or
configuration error, 3 the run completed but produced no tau-safe result.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from .. import diagnostics, theory
from ..cascade import projected_reference_sample
from ..errors import CascadeError, ConfigError, ProjectionUnavailableError, SafeProjError
from ..projection import local_search_project
from ..scoring import ImageRef
from .config import ServiceConfig, build_deps

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_UNSAFE = 3


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("overrides")
    g.add_argument("--config", help="JSON service config")
    g.add_argument("--mock", action="store_true", help="use the bundled mock backends")
    g.add_argument("--tau", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--steps", type=int)
    g.add_argument("--neighbors", type=int)
    g.add_argument("--max-attempts", type=int, dest="max_attempts")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--json", action="store_true", help="machine-readable output")
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safeproj", description="Safety projection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", help="project one prompt with Stage-1 local search")
    p.add_argument("prompt")
    _common(p)

    p = sub.add_parser("score-prompt", help="Stage-1 A/B score of a prompt")
    p.add_argument("prompt")
    _common(p)

    p = sub.add_parser("score-image", help="Stage-2 A/B score of an image path, URI or simulator symbol")
    p.add_argument("image")
    _common(p)

    p = sub.add_parser("cascade", help="project, generate, verify with retries")
    p.add_argument("prompt")
    _common(p)

    p = sub.add_parser("simulate", help="evaluate seeded discrete instances (or one instance file)")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--prompts", type=int, help="fix the number of prompts")
    p.add_argument("--images", type=int, help="fix the number of images")
    p.add_argument("--instance", help="evaluate this instance JSON instead of generating")
    p.add_argument("--out", help="directory to write generated instance JSON files")
    p.add_argument("--taus", type=float, nargs="+", default=list(theory.SWEEP_TAUS))
    _common(p)

    p = sub.add_parser("verify-theory", help="run the full property suites")
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--taus", type=float, nargs="+", default=list(theory.SWEEP_TAUS))
    _common(p)

    p = sub.add_parser("enrich", help="routing enrichment table from paired scores or audit logs")
    p.add_argument("file")
    p.add_argument("--fractions", type=float, nargs="+", default=list(diagnostics.DEFAULT_FRACTIONS))
    p.add_argument("--csv", nargs="?", const="-", help="write CSV (to PATH, or stdout)")
    _common(p)

    p = sub.add_parser("diagnose", help="unchanged / fixed-point ratios and centroid drift")
    p.add_argument("before", help="original prompts, one per line")
    p.add_argument("after", help="projected prompts, aligned line by line")
    p.add_argument("--reproject", action="store_true", help="re-project AFTER and report the fixed-point ratio")
    _common(p)

    p = sub.add_parser("serve", help="run the HTTP gateway")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    _common(p)
    return parser


def _service_config(args: argparse.Namespace) -> ServiceConfig:
    if args.config:
        cfg = ServiceConfig.load(args.config)
    elif args.mock:
        cfg = ServiceConfig.mock(audit_path=None)
    else:
        raise ConfigError("no backends configured; pass --config PATH or --mock")
    return cfg.with_overrides(
        tau=args.tau, alpha=args.alpha, steps=args.steps, neighbors=args.neighbors, max_attempts=args.max_attempts
    )


def _emit(obj: Any) -> None:
    print(json.dumps(obj, indent=2, ensure_ascii=False))


def _read_lines(path: str) -> list[str]:
    return [line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def _image_ref(arg: str) -> ImageRef:
    path = Path(arg)
    if path.is_file():
        return ImageRef(path.read_bytes(), kind="bytes", generator="file")
    if arg.startswith(("http://", "https://", "data:")):
        return ImageRef(arg, kind="uri")
    return ImageRef(arg, kind="symbol")


def cmd_project(args: argparse.Namespace) -> int:
    cfg = _service_config(args)
    deps = build_deps(cfg, seed=args.seed or 0)
    projected, trace = local_search_project(
        args.prompt, deps.proposer, deps.prompt_scorer, deps.embedder, cfg.cascade.projection
    )
    final = trace.final
    if args.json:
        _emit({"prompt": projected, "unchanged": projected == args.prompt, "trace": trace.to_json()})
    else:
        print(projected)
        for s in trace.steps:
            print(
                f"step {s.step}: {len(s.candidates)} candidates, J={s.chosen.objective:.4f}, chosen={s.chosen.text!r}",
                file=sys.stderr,
            )
        print(f"stop: {trace.stop_reason}; u={final.score.value:.4f}; d={final.distance:.4f}", file=sys.stderr)
    return EXIT_OK if final.score.passes(cfg.tau) else EXIT_UNSAFE


def cmd_score(args: argparse.Namespace) -> int:
    cfg = _service_config(args)
    deps = build_deps(cfg)
    if args.command == "score-prompt":
        score = deps.prompt_scorer.score(args.prompt)
    else:
        score = deps.image_scorer.score(_image_ref(args.image))
    out = score.to_json()
    out["passes"] = score.passes(cfg.tau)
    out["tau"] = cfg.tau
    _emit(out)
    return EXIT_OK


def cmd_cascade(args: argparse.Namespace) -> int:
    cfg = _service_config(args)
    deps = build_deps(cfg, seed=args.seed or 0)
    outcome = projected_reference_sample(args.prompt, deps, cfg.cascade, seed=args.seed or 0)
    if args.json:
        _emit(outcome.to_json())
    else:
        print(outcome.prompt)
        v = outcome.verification
        print(
            f"accepted={outcome.accepted} attempts={outcome.attempts_used} image={outcome.image.key} "
            f"u_verify={v.value:.4f}{' (abstained)' if v.abstained else ''}",
            file=sys.stderr,
        )
    return EXIT_OK if outcome.accepted else EXIT_UNSAFE


def _summarize(inst: theory.Instance, taus: Sequence[float]) -> dict[str, Any]:
    G, G_ref, U, mu = inst.G, inst.G_ref, inst.U, inst.space.mu
    out: dict[str, Any] = {
        "seed": inst.seed,
        "prompts": len(inst.space),
        "images": G.shape[1],
        "unsafety": theory.population_unsafety(G, U, mu),
        "reference_unsafety": theory.population_unsafety(G_ref, U, mu),
        "alignment_tv": theory.alignment_tv(G, G_ref, mu),
        "spat_residual": theory.check_spat(G, G_ref, U, mu),
        "sweep": [],
    }
    for t in taus:
        safe = theory.safe_set(G_ref, U, t)
        row: dict[str, Any] = {"tau": t, "safe": len(safe)}
        if safe:
            K = theory.build_projection_kernel(inst.space, safe)
            res = theory.check_kernel_spat(G, G_ref, U, mu, K, t)
            row.update(
                projected_unsafety=res.projected_unsafety,
                projected_reference_unsafety=res.reference_unsafety,
                projected_alignment_tv=res.alignment,
                kernel_residual=res.residual,
            )
        else:
            row["infeasible"] = True
        out["sweep"].append(row)
    return out


def cmd_simulate(args: argparse.Namespace) -> int:
    if args.instance:
        insts = [theory.Instance.load(args.instance)]
    else:
        sizes = None
        if args.prompts or args.images:
            sizes = (args.prompts or 10, args.images or 10)
        first = 1 if args.seed is None else args.seed
        tau = 0.05 if args.tau is None else args.tau
        insts = [theory.random_instance(s, sizes=sizes, tau=tau) for s in range(first, first + args.instances)]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for inst in insts:
            inst.save(out / f"instance_{inst.seed}.json")
    summaries = [_summarize(i, args.taus) for i in insts]
    if args.json:
        _emit(summaries)
    else:
        print(f"{'seed':>6} {'|C|':>4} {'|X|':>4} {'U(G)':>8} {'U(G*)':>8} {'A_TV':>8} {'resid':>9}  safe per tau")
        for s in summaries:
            safe = " ".join(f"{r['safe']:>3}" for r in s["sweep"])
            print(
                f"{s['seed']:>6} {s['prompts']:>4} {s['images']:>4} {s['unsafety']:>8.4f} "
                f"{s['reference_unsafety']:>8.4f} {s['alignment_tv']:>8.4f} {s['spat_residual']:>9.2e}  {safe}"
            )
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    first = 1 if args.seed is None else args.seed
    t0 = time.perf_counter()
    report = theory.run_property_suite(first, args.instances, tuple(args.taus))
    elapsed = time.perf_counter() - t0
    if args.json:
        out = report.to_json()
        out["seconds"] = elapsed
        _emit(out)
    else:
        print(report.table())
        print(f"{args.instances} instances in {elapsed:.2f}s")
    for v in report.violations[:20]:
        print(f"violation: {v}", file=sys.stderr)
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_enrich(args: argparse.Namespace) -> int:
    pairs = diagnostics.PairedScores.load_jsonl(args.file)
    tau = 0.05 if args.tau is None else args.tau
    report = diagnostics.enrichment_report(pairs, tau, tuple(args.fractions))
    rows = [diagnostics.EnrichmentRow(**r) for r in report["rows"]]
    if args.csv:
        text = diagnostics.enrichment_csv(rows)
        if args.csv == "-":
            sys.stdout.write(text)
            return EXIT_OK
        Path(args.csv).write_text(text, encoding="utf-8")
    if args.json:
        _emit(report)
    else:
        print(f"n={report['n']} tau={tau} passes={report['total_passes']} baseline={report['baseline']:.4f}")
        print(diagnostics.enrichment_table(rows))
        if report["pearson"] is not None:
            print(f"pearson={report['pearson']:.4f} spearman={report['spearman']:.4f}")
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    before, after = _read_lines(args.before), _read_lines(args.after)
    cfg = _service_config(args)
    deps = build_deps(cfg, seed=args.seed or 0)
    out: dict[str, Any] = {
        "n": len(before),
        "unchanged_ratio": diagnostics.unchanged_ratio(before, after),
        "centroid_drift": diagnostics.centroid_drift(
            [deps.embedder.embed(t) for t in before], [deps.embedder.embed(t) for t in after]
        ),
    }
    if args.reproject:
        again = [
            local_search_project(t, deps.proposer, deps.prompt_scorer, deps.embedder, cfg.cascade.projection)[0]
            for t in after
        ]
        out["fixed_point_ratio"] = diagnostics.fixed_point_ratio(after, again)
    if args.json:
        _emit(out)
    else:
        for k, v in out.items():
            print(f"{k:<18} {v:.4f}" if isinstance(v, float) else f"{k:<18} {v}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:  # pragma: no cover - blocking
    from dataclasses import replace

    from .service import serve

    cfg = _service_config(args)
    if args.mock and not args.config:
        cfg = replace(cfg, audit_path="audit.jsonl")
    cfg = replace(cfg, host=args.host or cfg.host, port=args.port or cfg.port)
    serve(cfg)
    return EXIT_OK


COMMANDS = {
    "project": cmd_project,
    "score-prompt": cmd_score,
    "score-image": cmd_score,
    "cascade": cmd_cascade,
    "simulate": cmd_simulate,
    "verify-theory": cmd_verify,
    "enrich": cmd_enrich,
    "diagnose": cmd_diagnose,
    "serve": cmd_serve,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"safeproj {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProjectionUnavailableError, CascadeError, SafeProjError) as exc:
        print(f"safeproj {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
