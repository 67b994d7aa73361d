from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .algebra import (
    DIFFUSE_TYPE_I,
    MATRIX,
    ZERO,
    Algebra,
    RatioLike,
    Summand,
    format_ratio,
    ratio,
    require_normalized,
)
from .errors import ValidationError

log = logging.getLogger("fgf_amalgam.inclusion")

Edge = Tuple[int, int]


@dataclass(frozen=True)
class AbelianD:
    """Traces t_k of the minimal projections p_k of D; atoms are indexed from 0."""

    atoms: Tuple[Fraction, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "atoms", tuple(ratio(t) for t in self.atoms))
        if not self.atoms:
            raise ValidationError("D needs at least one atom")
        bad = [f"t_{k + 1} = {format_ratio(t)} is not > 0" for k, t in enumerate(self.atoms) if t <= 0]
        if bad:
            raise ValidationError("invalid atoms of D", bad)
        total = sum(self.atoms, ZERO)
        if total != 1:
            raise ValidationError(f"atoms of D sum to {format_ratio(total)}, expected 1")

    @classmethod
    def of(cls, *atoms: RatioLike) -> "AbelianD":
        return cls(tuple(ratio(t) for t in atoms))

    @classmethod
    def scalars(cls) -> "AbelianD":
        return cls((Fraction(1),))

    def __len__(self) -> int:
        return len(self.atoms)

    def trace(self, k: int) -> Fraction:
        return self.atoms[k]

    def as_algebra(self) -> Algebra:
        return Algebra(tuple(Summand.matrix(1, t) for t in self.atoms))


@dataclass(frozen=True)
class EmbeddingSpec:
    """
    Trace data of a unital trace-preserving inclusion D -> A.

    Keys are (atom k, summand i). Matrix summands carry an integer partial
    multiplicity lambda, every other summand a compression trace alpha.
    Missing keys read as zero.
    """

    lambdas: Mapping[Tuple[int, int], int] = field(default_factory=dict)
    alphas: Mapping[Tuple[int, int], Fraction] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "lambdas", {key: int(v) for key, v in self.lambdas.items() if v})
        object.__setattr__(
            self, "alphas", {key: ratio(v) for key, v in self.alphas.items() if ratio(v) != 0}
        )

    def lam(self, k: int, i: int) -> int:
        return self.lambdas.get((k, i), 0)

    def alpha(self, k: int, i: int) -> Fraction:
        return self.alphas.get((k, i), ZERO)

    def mass(self, a: Algebra, k: int, i: int) -> Fraction:
        """tau(p_k z_i): the trace of p_k inside summand i."""
        s = a[i]
        if s.kind == MATRIX:
            assert s.min_trace is not None
            return self.lam(k, i) * s.min_trace
        return self.alpha(k, i)

    def atoms_of(self, a: Algebra, i: int, d: "AbelianD") -> List[int]:
        return [k for k in range(len(d)) if self.mass(a, k, i) > 0]

    @classmethod
    def from_rows(cls, a: Algebra, rows: Sequence[Sequence[Union[int, RatioLike]]]) -> "EmbeddingSpec":
        """
        rows[k][i] is lambda_{k,i} for matrix summands and alpha_{k,i} otherwise.
        Convenient for tests and hand-written problems.
        """
        lambdas: Dict[Tuple[int, int], int] = {}
        alphas: Dict[Tuple[int, int], Fraction] = {}
        for k, row in enumerate(rows):
            if len(row) != len(a):
                raise ValidationError(f"embedding row {k + 1} has {len(row)} entries, algebra has {len(a)} summands")
            for i, v in enumerate(row):
                if a[i].kind == MATRIX:
                    if isinstance(v, str) or isinstance(v, Fraction) and v.denominator != 1:
                        raise ValidationError(f"lambda at (atom {k + 1}, summand {i + 1}) must be an integer")
                    lambdas[(k, i)] = int(v)
                else:
                    alphas[(k, i)] = ratio(v)
        return cls(lambdas=lambdas, alphas=alphas)

    @classmethod
    def identity(cls, d: "AbelianD") -> "EmbeddingSpec":
        return cls(lambdas={(k, k): 1 for k in range(len(d))})


def validate_embedding(a: Algebra, d: AbelianD, e: EmbeddingSpec) -> List[str]:
    """Returns the list of violations; an empty list means the embedding is valid."""
    out: List[str] = []
    n_atoms, n_summands = len(d), len(a)

    for (k, i), v in e.lambdas.items():
        if not (0 <= k < n_atoms and 0 <= i < n_summands):
            out.append(f"lambda refers to missing (atom {k + 1}, summand {i + 1})")
        elif a[i].kind != MATRIX:
            out.append(f"lambda given for non-matrix summand {i + 1} ({a[i].kind}); use alpha")
        elif v < 0:
            out.append(f"lambda_({k + 1},{i + 1}) = {v} is negative")
    for (k, i), v in e.alphas.items():
        if not (0 <= k < n_atoms and 0 <= i < n_summands):
            out.append(f"alpha refers to missing (atom {k + 1}, summand {i + 1})")
        elif a[i].kind == MATRIX:
            out.append(f"alpha given for matrix summand {i + 1}; use lambda")
        elif v < 0:
            out.append(f"alpha_({k + 1},{i + 1}) = {format_ratio(v)} is negative")
    if out:
        return out

    for i, s in enumerate(a):
        if s.kind == MATRIX:
            total = sum(e.lam(k, i) for k in range(n_atoms))
            if total != s.size:
                out.append(f"unitality at summand {i + 1}: sum_k lambda = {total} != size {s.size}")
        else:
            total_a = sum((e.alpha(k, i) for k in range(n_atoms)), ZERO)
            if total_a != s.central_trace:
                out.append(
                    f"central trace at summand {i + 1}: sum_k alpha = {format_ratio(total_a)} "
                    f"!= centralTrace {format_ratio(s.central_trace)}"
                )
    for k in range(n_atoms):
        total_k = sum((e.mass(a, k, i) for i in range(n_summands)), ZERO)
        if total_k != d.trace(k):
            out.append(
                f"trace compatibility at atom {k + 1}: sum_i mass = {format_ratio(total_k)} "
                f"!= t_{k + 1} = {format_ratio(d.trace(k))}"
            )
    return out


def require_valid_embedding(a: Algebra, d: AbelianD, e: EmbeddingSpec, name: str = "A") -> None:
    require_normalized(a, name)
    violations = validate_embedding(a, d, e)
    if violations:
        raise ValidationError(f"embedding D -> {name} is invalid", violations)


class UnionFind:
    """Disjoint sets with path compression and union by rank."""

    def __init__(self, items: Iterable[object] = ()) -> None:
        self.parent: Dict[object, object] = {}
        self.rank: Counter = Counter()
        for x in items:
            self.find(x)

    def find(self, x: object) -> object:
        if x not in self.parent:
            self.parent[x] = x
            return x
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, x: object, y: object) -> object:
        px, py = self.find(x), self.find(y)
        if px == py:
            return px
        if self.rank[px] < self.rank[py]:
            px, py = py, px
        self.parent[py] = px
        if self.rank[px] == self.rank[py]:
            self.rank[px] += 1
        return px

    def groups(self) -> List[List[object]]:
        by_root: Dict[object, List[object]] = {}
        for x in self.parent:
            by_root.setdefault(self.find(x), []).append(x)
        return list(by_root.values())


@dataclass(frozen=True)
class InclusionGraph:
    """G_D^{A,B}: vertices are the atoms of D; edges are kept per side for drawing."""

    size: int
    edges_a: FrozenSet[Edge]
    edges_b: FrozenSet[Edge]

    @property
    def edges(self) -> FrozenSet[Edge]:
        return self.edges_a | self.edges_b


def _side_edges(a: Algebra, d: AbelianD, e: EmbeddingSpec) -> FrozenSet[Edge]:
    out = set()
    for i, s in enumerate(a):
        # An abelian summand commutes with D, so p_j z p_k = 0 for j != k inside it.
        if s.kind == DIFFUSE_TYPE_I and s.size == 1:
            continue
        ks = e.atoms_of(a, i, d)
        for x in range(len(ks)):
            for y in range(x + 1, len(ks)):
                out.add((ks[x], ks[y]))
    return frozenset(out)


def build_graph(a: Algebra, b: Algebra, d: AbelianD, ea: EmbeddingSpec, eb: EmbeddingSpec) -> InclusionGraph:
    require_valid_embedding(a, d, ea, "A")
    require_valid_embedding(b, d, eb, "B")
    g = InclusionGraph(size=len(d), edges_a=_side_edges(a, d, ea), edges_b=_side_edges(b, d, eb))
    log.debug("graph: %d vertices, A edges %s, B edges %s", g.size, sorted(g.edges_a), sorted(g.edges_b))
    return g


def connected_components(g: InclusionGraph) -> List[List[int]]:
    uf = UnionFind(range(g.size))
    for x, y in sorted(g.edges):
        uf.union(x, y)
    comps = [sorted(c) for c in uf.groups()]  # type: ignore[type-var]
    return sorted(comps)


def is_connected(g: InclusionGraph) -> bool:
    return len(connected_components(g)) == 1


def graph_to_dot(g: InclusionGraph, d: AbelianD) -> str:
    lines = ["graph G_D {"]
    for k in range(g.size):
        lines.append(f'  p{k + 1} [label="{k + 1}:{format_ratio(d.trace(k))}"];')
    for x, y in sorted(g.edges_a):
        lines.append(f"  p{x + 1} -- p{y + 1};")
    for x, y in sorted(g.edges_b):
        lines.append(f"  p{x + 1} -- p{y + 1} [style=dashed];")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Bratteli diagrams and simple steps


@dataclass(frozen=True)
class BratteliDiagram:
    """
    Inclusion of finite-dimensional algebras src -> dst.
    multiplicities[(i, j)] = a_{i,j}, the partial multiplicity of source summand i in target summand j.
    """

    source: Algebra
    target: Algebra
    multiplicities: Mapping[Tuple[int, int], int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "multiplicities", {key: int(v) for key, v in self.multiplicities.items() if v})

    def a(self, i: int, j: int) -> int:
        return self.multiplicities.get((i, j), 0)

    def trace_weight(self, i: int, j: int) -> Fraction:
        """alpha_{i,j} = tau(p_i q_j)."""
        t = self.target[j].min_trace
        assert t is not None
        return self.a(i, j) * self.source[i].size * t

    def column(self, j: int) -> Tuple[Tuple[int, int], ...]:
        return tuple(sorted((i, a) for (i, jj), a in self.multiplicities.items() if jj == j))

    def check(self) -> List[str]:
        out: List[str] = []
        for name, alg in (("source", self.source), ("target", self.target)):
            if not alg.is_finite_dimensional:
                out.append(f"{name} is not finite-dimensional")
            elif not alg.is_normalized:
                out.append(f"{name} total trace {format_ratio(alg.total_trace)} != 1")
        if out:
            return out
        for (i, j), v in self.multiplicities.items():
            if not (0 <= i < len(self.source) and 0 <= j < len(self.target)) or v < 0:
                out.append(f"bad edge ({i + 1},{j + 1}) with multiplicity {v}")
        if out:
            return out
        for j, q in enumerate(self.target):
            rank = sum(self.a(i, j) * p.size for i, p in enumerate(self.source))
            if rank != q.size:
                out.append(f"multiplicity mismatch at target {j + 1}: sum_i a_ij n_i = {rank} != {q.size}")
        for i, p in enumerate(self.source):
            tr = sum((self.a(i, j) * q.min_trace for j, q in enumerate(self.target)), ZERO)  # type: ignore[operator]
            if tr != p.min_trace:
                out.append(
                    f"trace mismatch at source {i + 1}: sum_j a_ij t_j = {format_ratio(tr)} "
                    f"!= {format_ratio(p.min_trace)}"  # type: ignore[arg-type]
                )
        return out

    @classmethod
    def from_embedding(cls, d: AbelianD, a: Algebra, e: EmbeddingSpec) -> "BratteliDiagram":
        return cls(source=d.as_algebra(), target=a, multiplicities=dict(e.lambdas))


@dataclass(frozen=True)
class SimpleStep:
    """
    kind "copy": summand `index` is replaced by two copies with central traces `traces`
    (first stays at `index`, second is inserted right after it).
    kind "join": summands `index` < `other` of equal minTrace become one M_{n+m} at `index`.
    """

    kind: str
    index: int
    other: Optional[int] = None
    traces: Optional[Tuple[Fraction, Fraction]] = None

    @classmethod
    def copy(cls, index: int, first: Fraction, second: Fraction) -> "SimpleStep":
        if first <= 0 or second <= 0:
            raise ValidationError("copy step needs two positive traces")
        return cls(kind="copy", index=index, traces=(first, second))

    @classmethod
    def join(cls, index: int, other: int) -> "SimpleStep":
        if index >= other:
            raise ValidationError("join step needs index < other")
        return cls(kind="join", index=index, other=other)

    def render(self) -> str:
        if self.kind == "copy":
            assert self.traces is not None
            p2, p3 = self.traces
            return f"copy #{self.index + 1} -> {format_ratio(p2)} + {format_ratio(p3)}"
        assert self.other is not None
        return f"join #{self.index + 1} + #{self.other + 1}"


def apply_step(summands: List[Summand], step: SimpleStep) -> List[Summand]:
    out = list(summands)
    s = out[step.index]
    if step.kind == "copy":
        assert step.traces is not None
        p2, p3 = step.traces
        if p2 + p3 != s.central_trace:
            raise ValidationError(f"copy of #{step.index + 1}: {format_ratio(p2)} + {format_ratio(p3)} != centralTrace")
        out[step.index : step.index + 1] = [Summand.matrix(s.size, p2 / s.size), Summand.matrix(s.size, p3 / s.size)]
        return out
    assert step.other is not None
    t = out[step.other]
    if s.min_trace != t.min_trace:
        raise ValidationError(f"join of #{step.index + 1} and #{step.other + 1}: minTraces differ")
    assert s.min_trace is not None
    out[step.index] = Summand.matrix(s.size + t.size, s.min_trace)
    del out[step.other]
    return out


def decompose_simple_steps(src: Algebra, dst: Algebra, diagram: BratteliDiagram) -> List[SimpleStep]:
    """
    Copies first (source summands in order, one copy per unit of multiplicity),
    then joins grouped by target summand.
    """
    if diagram.source != src or diagram.target != dst:
        raise ValidationError("diagram does not describe the given algebras")
    violations = diagram.check()
    if violations:
        raise ValidationError("inconsistent Bratteli diagram", violations)

    steps: List[SimpleStep] = []
    current: List[Summand] = list(src.summands)
    labels: List[int] = []
    pos = 0
    for i, p in enumerate(src.summands):
        wanted = [j for j in range(len(dst)) for _ in range(diagram.a(i, j))]
        remaining = p.central_trace
        for n, j in enumerate(wanted[:-1]):
            t = dst[j].min_trace
            assert t is not None
            piece = p.size * t
            remaining -= piece
            step = SimpleStep.copy(pos + n, piece, remaining)
            current = apply_step(current, step)
            steps.append(step)
        labels.extend(wanted)
        pos += len(wanted)

    for j in range(len(dst)):
        while True:
            idx = [n for n, lab in enumerate(labels) if lab == j]
            if len(idx) < 2:
                break
            step = SimpleStep.join(idx[0], idx[1])
            current = apply_step(current, step)
            del labels[idx[1]]
            steps.append(step)
    log.debug("decomposed %s -> %s into %d simple steps", src.render(), dst.render(), len(steps))
    return steps


def compose_steps(src: Algebra, steps: Sequence[SimpleStep]) -> BratteliDiagram:
    """Runs the steps and returns the composite inclusion src -> (resulting algebra)."""
    current: List[Summand] = list(src.summands)
    origin: List[Counter] = [Counter({i: 1}) for i in range(len(src))]
    for step in steps:
        current = apply_step(current, step)
        if step.kind == "copy":
            origin[step.index : step.index + 1] = [Counter(origin[step.index]), Counter(origin[step.index])]
        else:
            assert step.other is not None
            origin[step.index] = origin[step.index] + origin[step.other]
            del origin[step.other]
    mult = {(i, j): a for j, c in enumerate(origin) for i, a in c.items()}
    return BratteliDiagram(source=src, target=Algebra(tuple(current)), multiplicities=mult)


def diagram_equivalent(x: BratteliDiagram, y: BratteliDiagram) -> bool:
    """Same source, and the same multiset of (target summand, column of multiplicities)."""
    if x.source != y.source:
        return False

    def signature(g: BratteliDiagram) -> List[Tuple[int, Fraction, Tuple[Tuple[int, int], ...]]]:
        return sorted((q.size, q.min_trace, g.column(j)) for j, q in enumerate(g.target))  # type: ignore[misc]

    return signature(x) == signature(y)


def bratteli_to_dot(g: BratteliDiagram) -> str:
    lines = ["digraph Bratteli {", "  rankdir=LR;"]
    for i, p in enumerate(g.source):
        lines.append(f'  s{i + 1} [label="{p.render()}"];')
    for j, q in enumerate(g.target):
        lines.append(f'  t{j + 1} [label="{q.render()}"];')
    for (i, j), a in sorted(g.multiplicities.items()):
        lines.append(f'  s{i + 1} -> t{j + 1} [label="{a} ({format_ratio(g.trace_weight(i, j))})"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
