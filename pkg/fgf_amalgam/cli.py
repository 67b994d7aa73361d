from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from .algebra import format_ratio
from .approx import describe_plan
from .engine import amalgamated_product, truncation_report
from .errors import AmalgamError, LedgerError, ValidationError
from .inclusion import (
    BratteliDiagram,
    bratteli_to_dot,
    compose_steps,
    connected_components,
    decompose_simple_steps,
    diagram_equivalent,
    graph_to_dot,
)
from .kernel import detect_stabilization, stage_plans, stage_sequence
from .logging_setup import setup_logging
from .problem_io import ProblemFile, dumps, load_problem, report_to_dict, stages_to_dict
from .storage import load_config, save_report
from .version import read_version

log = logging.getLogger("fgf_amalgam.cli")

DEBUG_ENV = "FGF_AMALGAM_DEBUG"


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fgf_amalgam", description="Amalgamated free products over abelian D")
    ap.add_argument("--debug", action="store_true", help="Enable DEBUG logging")
    ap.add_argument("--version", action="version", version=f"%(prog)s {read_version()}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fdim", help="Free dimensions of A, B and D")
    p.add_argument("file")

    p = sub.add_parser("amalgamate", help="Compute A *_D B")
    p.add_argument("file")
    p.add_argument("--per-component", action="store_true", default=None, help="Split a disconnected graph into components")
    p.add_argument("--stages-max", type=int, default=None, help="Finite stages used to cross-check the limit")
    p.add_argument("--report", choices=("json", "text"), default=None)
    p.add_argument("--truncate", type=int, default=None, help="Terms kept of each matrix_series tail")
    p.add_argument("--save", action="store_true", help="Also write the report under <home>/reports/")

    p = sub.add_parser("graph", help="The graph G_D^(A,B)")
    p.add_argument("file")
    p.add_argument("--dot", action="store_true", help="Emit DOT")

    p = sub.add_parser("decompose", help="Simple-step decomposition of a finite-dimensional inclusion")
    p.add_argument("file")
    p.add_argument("--dot", action="store_true", help="Emit the Bratteli diagrams as DOT")

    p = sub.add_parser("stages", help="Kernel results at consecutive finite stages")
    p.add_argument("file")
    p.add_argument("--max", type=int, default=None, dest="max_stages")
    p.add_argument("--plan", action="store_true", help="Only describe the stage algebras of A and B")
    p.add_argument("--report", choices=("json", "text"), default=None)
    return ap


def _option(value: Any, cfg: Dict[str, Any], key: str) -> Any:
    return cfg[key] if value is None else value


def _cmd_fdim(pf: ProblemFile) -> List[str]:
    fa, fb, fd = pf.fdims()
    return [f"fdim(A)={format_ratio(fa)} fdim(B)={format_ratio(fb)} fdim(D)={format_ratio(fd)}"]


def _cmd_amalgamate(pf: ProblemFile, args: argparse.Namespace, cfg: Dict[str, Any]) -> List[str]:
    truncate = int(_option(args.truncate, cfg, "truncate"))
    stages_max = int(_option(args.stages_max, cfg, "stages_max"))
    per_component = bool(_option(args.per_component, cfg, "per_component"))
    fmt = _option(args.report, cfg, "report")

    report = amalgamated_product(pf.problem(truncate=truncate), per_component=per_component, stages_max=stages_max)
    trunc = truncation_report(pf.series_problem(), truncate, stages_max=stages_max) if pf.has_tails else None

    if fmt == "json":
        data = report_to_dict(report)
        if trunc is not None:
            data["truncation"] = {
                "retained": trunc.n,
                "stable": [s.render() for s in trunc.stable],
                "matrixCounts": list(trunc.matrix_counts),
                "grows": trunc.grows,
            }
        lines = [dumps(data)]
    else:
        lines = [report.result.render(), report.fdim_line()]
        if trunc is not None:
            lines.extend(trunc.render())
    if args.save:
        out = save_report(f"{Path(args.file).stem}.{'json' if fmt == 'json' else 'txt'}", "\n".join(lines) + "\n")
        log.info("report saved to %s", out)
    return lines


def _cmd_graph(pf: ProblemFile, args: argparse.Namespace) -> List[str]:
    g = pf.problem(truncate=1).graph()
    if args.dot:
        return [graph_to_dot(g, pf.d).rstrip("\n")]
    comps = connected_components(g)
    lines = [f"vertices: {g.size}", f"edges: {len(g.edges)}"]
    lines.append("components: " + " | ".join("{" + ",".join(str(k + 1) for k in c) + "}" for c in comps))
    lines.append("connected: " + ("yes" if len(comps) == 1 else "no"))
    return lines


def _decompose_lines(title: str, diagram: BratteliDiagram, dot: bool = False) -> List[str]:
    steps = decompose_simple_steps(diagram.source, diagram.target, diagram)
    if not diagram_equivalent(compose_steps(diagram.source, steps), diagram):
        raise LedgerError(f"{title}: composed steps do not reproduce the inclusion")
    if dot:
        return [f"// {title}", bratteli_to_dot(diagram).rstrip("\n")]
    lines = [f"{title}: {diagram.source.render()} -> {diagram.target.render()}"]
    lines.extend(f"  {n + 1}. {s.render()}" for n, s in enumerate(steps))
    lines.append(f"  {len(steps)} step(s), composite OK")
    return lines


def _cmd_decompose(pf: ProblemFile, args: argparse.Namespace) -> List[str]:
    if pf.inclusion is not None:
        return _decompose_lines("inclusion", pf.inclusion, args.dot)
    lines: List[str] = []
    for name, alg, e in (("D -> A", pf.a, pf.ea), ("D -> B", pf.b, pf.eb)):
        if pf.has_tails or not alg.is_finite_dimensional:
            lines.append(("// " if args.dot else "") + f"{name}: not finite-dimensional, skipped")
            continue
        lines.extend(_decompose_lines(name, BratteliDiagram.from_embedding(pf.d, alg, e), args.dot))
    return lines


def _cmd_stages(pf: ProblemFile, args: argparse.Namespace, cfg: Dict[str, Any]) -> List[str]:
    count = int(_option(args.max_stages, cfg, "stages_max"))
    if count < 2:
        raise ValidationError(f"--max must be >= 2 to detect stabilization, got {count}")
    p = pf.problem(truncate=int(cfg["truncate"]))
    p.validate()
    if args.plan:
        lines = []
        for pa, pb in stage_plans(p.a, p.b, p.d, p.ea, p.eb, count):
            lines.append("A " + describe_plan(pa))
            lines.append("B " + describe_plan(pb))
        return lines
    results = stage_sequence(p.a, p.b, p.d, p.ea, p.eb, count)
    stable = detect_stabilization(results)
    if _option(args.report, cfg, "report") == "json":
        return [dumps(stages_to_dict(results, stable))]
    lines = []
    for r in results:
        params = ", ".join(format_ratio(s) for s in r.params)
        lines.append(f"M({r.stage}): {r.algebra.render()}" + (f"  params: {params}" if params else ""))
    lines.append(f"stabilized at stage {stable}" if stable is not None else "no stabilization")
    return lines


def cli_main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _parser().parse_args(argv)

    if args.debug:
        os.environ[DEBUG_ENV] = "1"

    log_level = logging.DEBUG if (args.debug or os.environ.get(DEBUG_ENV) == "1") else logging.INFO
    log_path = setup_logging(level=log_level)
    log.info("fgf_amalgam %s, logging to %s", read_version(), log_path)
    cfg = load_config()

    try:
        pf = load_problem(args.file)
        if args.command == "fdim":
            lines = _cmd_fdim(pf)
        elif args.command == "amalgamate":
            lines = _cmd_amalgamate(pf, args, cfg)
        elif args.command == "graph":
            lines = _cmd_graph(pf, args)
        elif args.command == "decompose":
            lines = _cmd_decompose(pf, args)
        else:
            lines = _cmd_stages(pf, args, cfg)
    except AmalgamError as exc:
        log.info("%s failed: %s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, LedgerError) and exc.dump is not None:
            print("ledger dump:\n" + dumps(exc.dump), file=sys.stderr)
        return exc.exit_code

    for line in lines:
        print(line)
    return 0
