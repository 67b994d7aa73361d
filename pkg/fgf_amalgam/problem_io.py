from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .algebra import (
    DIFFUSE_TYPE_I,
    FGF,
    HYPERFINITE_II1,
    MATRIX,
    ZERO,
    Algebra,
    Summand,
    format_ratio,
    ratio,
)
from .engine import AmalgamProblem, MatrixSeries, ProductReport, SeriesProblem, truncate_series
from .errors import NonAbelianAmalgamError, ValidationError
from .inclusion import AbelianD, BratteliDiagram, EmbeddingSpec
from .kernel import StageResult

log = logging.getLogger("fgf_amalgam.problem_io")

MATRIX_SERIES = "matrix_series"

TOP_KEYS = {"A", "B", "D", "embedA", "embedB", "inclusion"}
REQUIRED_KEYS = ("A", "B", "D", "embedA", "embedB")
SUMMAND_KEYS = {
    MATRIX: {"size", "min_trace"},
    DIFFUSE_TYPE_I: {"size", "central_trace"},
    HYPERFINITE_II1: {"central_trace"},
    FGF: {"param", "central_trace"},
    MATRIX_SERIES: {"size", "first_min_trace", "ratio", "atom"},
}
# redundant keys a full summand record may carry; their values must agree with the required ones
OPTIONAL_KEYS = {
    MATRIX: {"central_trace"},
    HYPERFINITE_II1: {"size"},
    FGF: {"size"},
}


def _rational(value: Any, where: str) -> Fraction:
    # JSON numbers other than integers would already have been rounded by the parser.
    if isinstance(value, float):
        raise ValidationError(f"{where}: rationals are written as \"p/q\" strings, got the float {value!r}")
    try:
        return ratio(value)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def _integer(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{where}: expected an integer, got {value!r}")
    return value


def _object(value: Any, where: str, allowed: set, required: Sequence[str] = ()) -> Mapping[str, Any]:
    if not isinstance(value, dict):
        raise ValidationError(f"{where}: expected an object")
    unknown = sorted(set(value) - allowed)
    if unknown:
        raise ValidationError(f"{where}: unknown key(s) {', '.join(repr(k) for k in unknown)}")
    missing = [k for k in required if k not in value]
    if missing:
        raise ValidationError(f"{where}: missing key(s) {', '.join(repr(k) for k in missing)}")
    return value


def summand_from_json(rec: Any, where: str) -> Union[Summand, MatrixSeries]:
    if not isinstance(rec, dict) or "kind" not in rec:
        raise ValidationError(f"{where}: summand records need a 'kind'")
    kind = rec["kind"]
    if kind not in SUMMAND_KEYS:
        raise ValidationError(f"{where}: unknown summand kind {kind!r}")
    keys = SUMMAND_KEYS[kind]
    rec = _object(rec, where, keys | OPTIONAL_KEYS.get(kind, set()) | {"kind"}, sorted(keys))
    try:
        if kind == MATRIX:
            s = Summand.matrix(_integer(rec["size"], f"{where}.size"), _rational(rec["min_trace"], f"{where}.min_trace"))
        elif kind == DIFFUSE_TYPE_I:
            s = Summand.diffuse(_integer(rec["size"], f"{where}.size"), _rational(rec["central_trace"], f"{where}.central_trace"))
        elif kind == HYPERFINITE_II1:
            s = Summand.hyperfinite(_rational(rec["central_trace"], f"{where}.central_trace"))
        elif kind == FGF:
            s = Summand.fgf(_rational(rec["param"], f"{where}.param"), _rational(rec["central_trace"], f"{where}.central_trace"))
        else:
            return MatrixSeries(
                size=_integer(rec["size"], f"{where}.size"),
                first_min_trace=_rational(rec["first_min_trace"], f"{where}.first_min_trace"),
                ratio=_rational(rec["ratio"], f"{where}.ratio"),
                atom=_integer(rec["atom"], f"{where}.atom"),
            )
    except ValidationError as exc:
        if str(exc).startswith(where):
            raise
        raise ValidationError(f"{where}: {exc}") from None
    if "central_trace" in rec and kind == MATRIX:
        ct = _rational(rec["central_trace"], f"{where}.central_trace")
        if ct != s.central_trace:
            raise ValidationError(
                f"{where}: central_trace {format_ratio(ct)} disagrees with size x min_trace = {format_ratio(s.central_trace)}"
            )
    if "size" in rec and kind in (HYPERFINITE_II1, FGF):
        if _integer(rec["size"], f"{where}.size") != 1:
            raise ValidationError(f"{where}: {kind} summands have size 1, got {rec['size']}")
    return s


def summand_to_json(s: Union[Summand, MatrixSeries]) -> Dict[str, Any]:
    if isinstance(s, MatrixSeries):
        return {
            "kind": MATRIX_SERIES,
            "size": s.size,
            "first_min_trace": format_ratio(s.first_min_trace),
            "ratio": format_ratio(s.ratio),
            "atom": s.atom,
        }
    if s.kind == MATRIX:
        assert s.min_trace is not None
        return {"kind": MATRIX, "size": s.size, "min_trace": format_ratio(s.min_trace)}
    if s.kind == DIFFUSE_TYPE_I:
        return {"kind": DIFFUSE_TYPE_I, "size": s.size, "central_trace": format_ratio(s.central_trace)}
    if s.kind == HYPERFINITE_II1:
        return {"kind": HYPERFINITE_II1, "central_trace": format_ratio(s.central_trace)}
    assert s.param is not None
    return {"kind": FGF, "param": format_ratio(s.param), "central_trace": format_ratio(s.central_trace)}


def algebra_from_json(records: Any, where: str) -> Algebra:
    if not isinstance(records, list):
        raise ValidationError(f"{where}: expected an array of summand records")
    out = []
    for n, rec in enumerate(records):
        s = summand_from_json(rec, f"{where}[{n}]")
        if isinstance(s, MatrixSeries):
            raise ValidationError(f"{where}[{n}]: matrix_series is only allowed in problem algebras")
        out.append(s)
    return Algebra(tuple(out))


def algebra_to_json(a: Algebra) -> List[Dict[str, Any]]:
    return [summand_to_json(s) for s in a]


def _side_from_json(
    records: Any, embed: Any, d: AbelianD, name: str
) -> Tuple[Algebra, EmbeddingSpec, Tuple[MatrixSeries, ...]]:
    if not isinstance(records, list) or not records:
        raise ValidationError(f"{name}: expected a non-empty array of summand records")
    parsed = [summand_from_json(rec, f"{name}[{n}]") for n, rec in enumerate(records)]
    finite = [n for n, s in enumerate(parsed) if isinstance(s, Summand)]
    if not finite:
        raise ValidationError(f"{name}: needs at least one summand besides matrix series")
    position = {n: j for j, n in enumerate(finite)}
    tails = tuple(s for s in parsed if isinstance(s, MatrixSeries))
    for n, s in enumerate(parsed):
        if isinstance(s, MatrixSeries) and not 0 <= s.atom < len(d):
            raise ValidationError(f"{name}[{n}].atom: no atom {s.atom} in D")

    key = "embed" + name
    if not isinstance(embed, list):
        raise ValidationError(f"{key}: expected an array of embedding records")
    lambdas: Dict[Tuple[int, int], int] = {}
    alphas: Dict[Tuple[int, int], Fraction] = {}
    for n, rec in enumerate(embed):
        where = f"{key}[{n}]"
        if not isinstance(rec, dict):
            raise ValidationError(f"{where}: expected an object")
        value_key = "lambda" if "lambda" in rec else "alpha"
        rec = _object(rec, where, {"atom", "summand", value_key}, ("atom", "summand", value_key))
        k = _integer(rec["atom"], f"{where}.atom")
        i = _integer(rec["summand"], f"{where}.summand")
        if not 0 <= k < len(d):
            raise ValidationError(f"{where}.atom: no atom {k} in D")
        if not 0 <= i < len(parsed):
            raise ValidationError(f"{where}.summand: no summand {i} in {name}")
        if i not in position:
            raise ValidationError(f"{where}.summand: summand {i} is a matrix_series; its atom is part of the record")
        j = position[i]
        s = parsed[i]
        assert isinstance(s, Summand)
        if (k, j) in lambdas or (k, j) in alphas:
            raise ValidationError(f"{where}: duplicate entry for atom {k}, summand {i}")
        if value_key == "lambda":
            if s.kind != MATRIX:
                raise ValidationError(f"{where}: lambda given for a {s.kind} summand; use alpha")
            lambdas[(k, j)] = _integer(rec["lambda"], f"{where}.lambda")
            if lambdas[(k, j)] < 0:
                raise ValidationError(f"{where}.lambda: must be >= 0")
        else:
            if s.kind == MATRIX:
                raise ValidationError(f"{where}: alpha given for a matrix summand; use lambda")
            alphas[(k, j)] = _rational(rec["alpha"], f"{where}.alpha")
    algebra = Algebra(tuple(parsed[n] for n in finite))  # type: ignore[misc]
    return algebra, EmbeddingSpec(lambdas=lambdas, alphas=alphas), tails


def _d_from_json(value: Any) -> AbelianD:
    rec = _object(value, "D", {"atoms", "sizes"}, ("atoms",))
    if "sizes" in rec:
        sizes = rec["sizes"]
        if not isinstance(sizes, list):
            raise ValidationError("D.sizes: expected an array of integers")
        sizes = [_integer(n, f"D.sizes[{k}]") for k, n in enumerate(sizes)]
        if any(n != 1 for n in sizes):
            raise NonAbelianAmalgamError(sizes)
    atoms = rec["atoms"]
    if not isinstance(atoms, list):
        raise ValidationError("D.atoms: expected an array of \"p/q\" traces")
    return AbelianD(tuple(_rational(t, f"D.atoms[{k}]") for k, t in enumerate(atoms)))


def _inclusion_from_json(value: Any) -> BratteliDiagram:
    rec = _object(value, "inclusion", {"source", "target", "multiplicities"}, ("source", "target", "multiplicities"))
    src = algebra_from_json(rec["source"], "inclusion.source")
    dst = algebra_from_json(rec["target"], "inclusion.target")
    mult: Dict[Tuple[int, int], int] = {}
    if not isinstance(rec["multiplicities"], list):
        raise ValidationError("inclusion.multiplicities: expected an array")
    for n, m in enumerate(rec["multiplicities"]):
        where = f"inclusion.multiplicities[{n}]"
        m = _object(m, where, {"source", "target", "mult"}, ("source", "target", "mult"))
        mult[(_integer(m["source"], f"{where}.source"), _integer(m["target"], f"{where}.target"))] = _integer(
            m["mult"], f"{where}.mult"
        )
    return BratteliDiagram(source=src, target=dst, multiplicities=mult)


@dataclass(frozen=True)
class ProblemFile:
    a: Algebra
    b: Algebra
    d: AbelianD
    ea: EmbeddingSpec
    eb: EmbeddingSpec
    tails_a: Tuple[MatrixSeries, ...] = ()
    tails_b: Tuple[MatrixSeries, ...] = ()
    inclusion: Optional[BratteliDiagram] = None

    @property
    def has_tails(self) -> bool:
        return bool(self.tails_a or self.tails_b)

    def series_problem(self) -> SeriesProblem:
        return SeriesProblem(a=self.a, b=self.b, d=self.d, ea=self.ea, eb=self.eb, tails_a=self.tails_a, tails_b=self.tails_b)

    def problem(self, truncate: Optional[int] = None) -> AmalgamProblem:
        if self.has_tails:
            if truncate is None:
                raise ValidationError("problem has infinite matrix tails; give a truncation depth")
            return truncate_series(self.series_problem(), truncate)
        return AmalgamProblem(a=self.a, b=self.b, d=self.d, ea=self.ea, eb=self.eb)

    def fdims(self) -> Tuple[Fraction, Fraction, Fraction]:
        """Exact fdim of A, B and D, tails summed in closed form."""

        def side(alg: Algebra, tails: Tuple[MatrixSeries, ...], name: str) -> Fraction:
            total = alg.total_trace + sum((t.total for t in tails), ZERO)
            if total != 1:
                raise ValidationError(f"{name} is not normalized: total trace {format_ratio(total)} != 1")
            w = sum((s.weight for s in alg), ZERO)
            w -= sum((t.first_min_trace**2 / (1 - t.ratio**2) for t in tails), ZERO)
            return 1 + w

        fd = 1 - sum((t * t for t in self.d.atoms), ZERO)
        return side(self.a, self.tails_a, "A"), side(self.b, self.tails_b, "B"), fd


def problem_from_json(data: Any) -> ProblemFile:
    top = _object(data, "problem", TOP_KEYS, REQUIRED_KEYS)
    d = _d_from_json(top["D"])
    a, ea, tails_a = _side_from_json(top["A"], top["embedA"], d, "A")
    b, eb, tails_b = _side_from_json(top["B"], top["embedB"], d, "B")
    inclusion = _inclusion_from_json(top["inclusion"]) if "inclusion" in top else None
    return ProblemFile(a=a, b=b, d=d, ea=ea, eb=eb, tails_a=tails_a, tails_b=tails_b, inclusion=inclusion)


def load_problem(path: Union[str, Path]) -> ProblemFile:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"{p}: cannot read problem file ({exc.strerror})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: not valid JSON (line {exc.lineno}, column {exc.colno}: {exc.msg})") from None
    pf = problem_from_json(data)
    log.debug("loaded %s: A=%s B=%s D=%d atoms", p, pf.a.render(), pf.b.render(), len(pf.d))
    return pf


def _embedding_to_json(e: EmbeddingSpec) -> List[Dict[str, Any]]:
    out: List[Dict[str, Any]] = []
    for (k, i), lam in sorted(e.lambdas.items()):
        out.append({"atom": k, "summand": i, "lambda": lam})
    for (k, i), alpha in sorted(e.alphas.items()):
        out.append({"atom": k, "summand": i, "alpha": format_ratio(alpha)})
    return out


def problem_to_json(pf: ProblemFile) -> Dict[str, Any]:
    """Tails are written after the finite summands, so embedding indices stay valid."""
    out: Dict[str, Any] = {
        "A": algebra_to_json(pf.a) + [summand_to_json(t) for t in pf.tails_a],
        "B": algebra_to_json(pf.b) + [summand_to_json(t) for t in pf.tails_b],
        "D": {"atoms": [format_ratio(t) for t in pf.d.atoms]},
        "embedA": _embedding_to_json(pf.ea),
        "embedB": _embedding_to_json(pf.eb),
    }
    if pf.inclusion is not None:
        g = pf.inclusion
        out["inclusion"] = {
            "source": algebra_to_json(g.source),
            "target": algebra_to_json(g.target),
            "multiplicities": [{"source": i, "target": j, "mult": m} for (i, j), m in sorted(g.multiplicities.items())],
        }
    return out


def report_to_dict(report: ProductReport) -> Dict[str, Any]:
    fa, fb, fd = report.fdim_terms
    return {
        "result": algebra_to_json(report.result),
        "rendered": report.result.render(),
        "ledger": report.ledger.to_dict(),
        "graph": {
            "vertices": report.graph.size,
            "edgesA": [[x + 1, y + 1] for x, y in sorted(report.graph.edges_a)],
            "edgesB": [[x + 1, y + 1] for x, y in sorted(report.graph.edges_b)],
        },
        "stageUsed": report.stage_used,
        "fdimCheck": {
            "lhs": format_ratio(report.fdim_check[0]),
            "rhs": format_ratio(report.fdim_check[1]),
            "ok": report.ok,
        },
        "fdimTerms": {"A": format_ratio(fa), "B": format_ratio(fb), "D": format_ratio(fd)},
    }


def stages_to_dict(results: Sequence[StageResult], stable: Optional[int]) -> Dict[str, Any]:
    return {
        "stages": [
            {
                "stage": r.stage,
                "result": algebra_to_json(r.algebra),
                "rendered": r.algebra.render(),
                "params": [format_ratio(s) for s in r.params],
            }
            for r in results
        ],
        "stabilizedAt": stable,
    }


def dumps(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=False)
