from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Dict, FrozenSet, List, Sequence, Set, Tuple

from .algebra import (
    DIFFUSE_TYPE_I,
    FGF,
    MATRIX,
    ZERO,
    Algebra,
    Summand,
    canonicalize,
    fdim,
    format_ratio,
    ratio,
    require_normalized,
)
from .errors import AmalgamError, DisconnectedGraphError, LedgerError, ValidationError
from .inclusion import (
    AbelianD,
    EmbeddingSpec,
    InclusionGraph,
    build_graph,
    connected_components,
    require_valid_embedding,
)
from .kernel import (
    FACTOR,
    SIDE_A,
    SIDE_B,
    UNASSIGNED,
    ComponentLedger,
    KernelResult,
    LedgerEntry,
    detect_stabilization,
    extract_limit,
    run_limit,
    stage_sequence,
)

log = logging.getLogger("fgf_amalgam.engine")

DEFAULT_STAGES_MAX = 6


@dataclass(frozen=True)
class AmalgamProblem:
    a: Algebra
    b: Algebra
    d: AbelianD
    ea: EmbeddingSpec
    eb: EmbeddingSpec

    def validate(self) -> None:
        require_normalized(self.a, "A")
        require_normalized(self.b, "B")
        require_valid_embedding(self.a, self.d, self.ea, "A")
        require_valid_embedding(self.b, self.d, self.eb, "B")

    @property
    def fgf_count(self) -> int:
        return self.a.fgf_count + self.b.fgf_count

    @property
    def expected_fdim(self) -> Fraction:
        return fdim(self.a) + fdim(self.b) - fdim(self.d.as_algebra())

    def swapped(self) -> "AmalgamProblem":
        return AmalgamProblem(a=self.b, b=self.a, d=self.d, ea=self.eb, eb=self.ea)

    def graph(self) -> InclusionGraph:
        return build_graph(self.a, self.b, self.d, self.ea, self.eb)


@dataclass(frozen=True)
class ProductReport:
    result: Algebra
    ledger: ComponentLedger
    graph: InclusionGraph
    stage_used: int
    # free dimension of a generating set, in the shorthand fdim(M)
    fdim_check: Tuple[Fraction, Fraction]
    fdim_terms: Tuple[Fraction, Fraction, Fraction]

    @property
    def ok(self) -> bool:
        return self.fdim_check[0] == self.fdim_check[1]

    def fdim_line(self) -> str:
        fa, fb, fd = self.fdim_terms
        return (
            f"fdim: {format_ratio(fa)} + {format_ratio(fb)} - {format_ratio(fd)} = "
            f"{format_ratio(self.fdim_check[0])} {'OK' if self.ok else 'MISMATCH'}"
        )


def _swap_sides(res: KernelResult) -> KernelResult:
    flip = {SIDE_A: SIDE_B, SIDE_B: SIDE_A}
    return replace(res, touched={(flip[side], i): v for (side, i), v in res.touched.items()})


# ---------------------------------------------------------------------------
# peeling free group factor summands


@dataclass(frozen=True)
class PeelRecipe:
    """How to rebuild A *_D B from the inner product with one free group factor summand of A removed."""

    summand: int
    central_trace: Fraction
    param: Fraction
    alphas: Tuple[Tuple[int, Fraction], ...]
    # inner summand index -> original summand index of A, -1 for the atoms standing in for the factor
    a_index: Tuple[int, ...]

    @property
    def atom_summands(self) -> List[int]:
        return [j for j, i in enumerate(self.a_index) if i < 0]

    def reassemble(self, inner: KernelResult) -> KernelResult:
        """
        The components of the inner product meeting pD fuse with pA into one free group factor
        z M; the rest of the inner product is kept as (1 - z) M.
        """
        hit: Set[int] = set()
        for j in self.atom_summands:
            hit |= inner.touched.get((SIDE_A, j), frozenset())
        if not hit:
            raise LedgerError(f"peeled summand {self.summand + 1} touches no component of the inner product")
        merged = [inner.ledger.entries[n] for n in sorted(hit)]
        c = self.central_trace
        w = c * c * (self.param - 1) + sum((x.weight for x in merged), ZERO) + sum((t * t for _, t in self.alphas), ZERO)
        tau = sum((x.central_trace for x in merged), ZERO)
        if w <= 0:
            raise LedgerError(f"peeled factor over {len(merged)} components has weight {format_ratio(w)}")
        z = LedgerEntry(
            classification=FACTOR,
            weight=w,
            central_trace=tau,
            atoms=frozenset().union(*(x.atoms for x in merged)),
            q_atoms=frozenset().union(*(x.q_atoms for x in merged)),
            summands=(Summand.fgf(1 + w / (tau * tau), tau),),
        )

        first = min(hit)
        entries: List[LedgerEntry] = []
        new_index: Dict[int, int] = {}
        for n, x in enumerate(inner.ledger.entries):
            if n in hit:
                if n == first:
                    new_index[n] = len(entries)
                    entries.append(z)
                else:
                    new_index[n] = new_index[first]
                continue
            new_index[n] = len(entries)
            entries.append(x)

        touched: Dict[Tuple[str, int], FrozenSet[int]] = {(SIDE_A, self.summand): frozenset([new_index[first]])}
        for (side, j), idx in inner.touched.items():
            if side == SIDE_A:
                orig = self.a_index[j]
                if orig < 0:
                    continue
                key = (SIDE_A, orig)
            else:
                key = (side, j)
            touched[key] = frozenset(new_index[n] for n in idx)

        algebra = canonicalize(Algebra(tuple(s for x in entries for s in x.summands)))
        log.info(
            "peeled summand %d of A: %d component(s) fuse into %s",
            self.summand + 1,
            len(merged),
            z.render(),
        )
        return KernelResult(
            algebra=algebra,
            ledger=ComponentLedger(entries=tuple(entries), methods=inner.ledger.methods),
            touched=touched,
            steps=inner.steps,
        )


def peel_fgf(p: AmalgamProblem) -> Tuple[AmalgamProblem, PeelRecipe]:
    """(pD + (1 - p)A) *_D B, where p is the central support of the first free group factor summand of A."""
    fgf = [i for i, s in enumerate(p.a) if s.kind == FGF]
    if not fgf:
        raise ValidationError("peel_fgf needs a free group factor summand in A; swap A and B first")
    f = fgf[0]
    s = p.a[f]
    assert s.param is not None

    kept = [i for i in range(len(p.a)) if i != f]
    alphas = [(k, p.ea.alpha(k, f)) for k in range(len(p.d)) if p.ea.alpha(k, f) > 0]
    summands = [p.a[i] for i in kept] + [Summand.matrix(1, t) for _, t in alphas]
    a_index = tuple(kept) + tuple(-1 for _ in alphas)

    lambdas: Dict[Tuple[int, int], int] = {}
    alpha_map: Dict[Tuple[int, int], Fraction] = {}
    for j, i in enumerate(kept):
        for k in range(len(p.d)):
            if p.a[i].kind == MATRIX:
                if p.ea.lam(k, i):
                    lambdas[(k, j)] = p.ea.lam(k, i)
            elif p.ea.alpha(k, i):
                alpha_map[(k, j)] = p.ea.alpha(k, i)
    for n, (k, _) in enumerate(alphas):
        lambdas[(k, len(kept) + n)] = 1

    inner = AmalgamProblem(
        a=Algebra(tuple(summands)),
        b=p.b,
        d=p.d,
        ea=EmbeddingSpec(lambdas=lambdas, alphas=alpha_map),
        eb=p.eb,
    )
    recipe = PeelRecipe(
        summand=f,
        central_trace=s.central_trace,
        param=s.param,
        alphas=tuple(alphas),
        a_index=a_index,
    )
    log.debug("peel summand %d (%s) over atoms %s", f + 1, s.render(), [k + 1 for k, _ in alphas])
    return inner, recipe


# ---------------------------------------------------------------------------
# connected components


def _restrict_side(
    alg: Algebra, e: EmbeddingSpec, d: AbelianD, atoms: Sequence[int], tau: Fraction, name: str
) -> Tuple[Algebra, EmbeddingSpec, Tuple[int, ...]]:
    summands: List[Summand] = []
    index: List[int] = []
    lambdas: Dict[Tuple[int, int], int] = {}
    alphas: Dict[Tuple[int, int], Fraction] = {}
    for i, s in enumerate(alg):
        masses = {n: e.mass(alg, k, i) for n, k in enumerate(atoms) if e.mass(alg, k, i) > 0}
        if not masses:
            continue
        total = sum(masses.values(), ZERO)
        if s.kind == DIFFUSE_TYPE_I and s.size == 1:
            sub = Summand.diffuse(1, total / tau)
        elif total != s.central_trace:
            raise LedgerError(f"summand {i + 1} of {name} spans more than one connected component")
        else:
            sub = s.scaled(1 / tau)
        j = len(summands)
        summands.append(sub)
        index.append(i)
        for n in masses:
            if s.kind == MATRIX:
                lambdas[(n, j)] = e.lam(atoms[n], i)
            else:
                alphas[(n, j)] = masses[n] / tau
    return Algebra(tuple(summands)), EmbeddingSpec(lambdas=lambdas, alphas=alphas), tuple(index)


def _solve_per_component(p: AmalgamProblem, components: Sequence[Sequence[int]]) -> KernelResult:
    """
    Cuts the problem by z_S = sum of p_k over each component S, solves every piece renormalized
    by tau(z_S) and direct-sums the rescaled results.
    """
    entries: List[LedgerEntry] = []
    touched: Dict[Tuple[str, int], Set[int]] = {}
    methods = [UNASSIGNED] * len(p.d)
    steps = []
    for atoms in components:
        tau = sum((p.d.trace(k) for k in atoms), ZERO)
        d = AbelianD(tuple(p.d.trace(k) / tau for k in atoms))
        a, ea, a_index = _restrict_side(p.a, p.ea, p.d, atoms, tau, "A")
        b, eb, b_index = _restrict_side(p.b, p.eb, p.d, atoms, tau, "B")
        log.info("component {%s}: trace %s", ",".join(str(k + 1) for k in atoms), format_ratio(tau))
        res = _solve(AmalgamProblem(a=a, b=b, d=d, ea=ea, eb=eb))

        base = len(entries)
        for x in res.ledger.entries:
            entries.append(
                replace(
                    x,
                    weight=x.weight * tau * tau,
                    central_trace=x.central_trace * tau,
                    atoms=frozenset(atoms[k] for k in x.atoms),
                    q_atoms=frozenset(atoms[k] for k in x.q_atoms),
                    summands=tuple(s.scaled(tau) for s in x.summands),
                )
            )
        for (side, j), idx in res.touched.items():
            orig = (a_index if side == SIDE_A else b_index)[j]
            touched.setdefault((side, orig), set()).update(base + n for n in idx)
        for k, method in enumerate(res.ledger.methods):
            methods[atoms[k]] = method
        steps.extend(res.steps)

    return KernelResult(
        algebra=canonicalize(Algebra(tuple(s for x in entries for s in x.summands))),
        ledger=ComponentLedger(entries=tuple(entries), methods=tuple(methods)),
        touched={key: frozenset(v) for key, v in touched.items()},
        steps=tuple(steps),
    )


def _solve(p: AmalgamProblem) -> KernelResult:
    if p.a.fgf_count:
        inner, recipe = peel_fgf(p)
        return recipe.reassemble(_solve(inner))
    if p.b.fgf_count:
        return _swap_sides(_solve(p.swapped()))
    components = connected_components(p.graph())
    if len(components) > 1:
        return _solve_per_component(p, components)
    return run_limit(p.a, p.b, p.d, p.ea, p.eb)


def _solve_hyperfinite(p: AmalgamProblem, stages_max: int) -> Tuple[KernelResult, int]:
    """Limit computation, cross-checked against the finite stages when there is a diffuse summand."""
    if (p.a.is_finite_dimensional and p.b.is_finite_dimensional) or stages_max < 2:
        return run_limit(p.a, p.b, p.d, p.ea, p.eb), 0
    try:
        results = stage_sequence(p.a, p.b, p.d, p.ea, p.eb, stages_max)
        stable = detect_stabilization(results)
    except AmalgamError as exc:
        log.warning("finite stages unavailable, using the limit computation only: %s", exc)
        return run_limit(p.a, p.b, p.d, p.ea, p.eb), 0
    if stable is None:
        return run_limit(p.a, p.b, p.d, p.ea, p.eb), 0
    # a LedgerError here means the stages contradict the limit
    extract_limit(next(r for r in results if r.stage == stable), p.a, p.b, p.d, p.ea, p.eb)
    return run_limit(p.a, p.b, p.d, p.ea, p.eb), stable


def amalgamated_product(
    p: AmalgamProblem, per_component: bool = False, stages_max: int = DEFAULT_STAGES_MAX
) -> ProductReport:
    """A *_D B for A, B in the class R_2 and abelian finite-dimensional D."""
    p.validate()
    graph = p.graph()
    components = connected_components(graph)
    stage_used = 0
    if len(components) > 1:
        if not per_component:
            raise DisconnectedGraphError(components)
        res = _solve_per_component(p, components)
    elif p.fgf_count:
        log.info("%d free group factor summand(s) to peel", p.fgf_count)
        res = _solve(p)
    else:
        res, stage_used = _solve_hyperfinite(p, stages_max)

    fa, fb, fd = fdim(p.a), fdim(p.b), fdim(p.d.as_algebra())
    got = fdim(res.algebra)
    if got != fa + fb - fd:
        raise LedgerError(
            f"fdim of the product {format_ratio(got)} != {format_ratio(fa + fb - fd)}",
            dump=res.ledger.to_dict(),
        )
    log.info("result %s, fdim %s", res.algebra.render(), format_ratio(got))
    return ProductReport(
        result=res.algebra,
        ledger=res.ledger,
        graph=graph,
        stage_used=stage_used,
        fdim_check=(got, fa + fb - fd),
        fdim_terms=(fa, fb, fd),
    )


# ---------------------------------------------------------------------------
# geometric matrix tails


@dataclass(frozen=True)
class MatrixSeries:
    """M_size with minimal traces first * ratio^(i-1), i >= 1, each under `atom` with multiplicity size."""

    size: int
    first_min_trace: Fraction
    ratio: Fraction
    atom: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "first_min_trace", ratio(self.first_min_trace))
        object.__setattr__(self, "ratio", ratio(self.ratio))
        if self.size < 1:
            raise ValidationError(f"matrix series needs size >= 1, got {self.size}")
        if self.first_min_trace <= 0:
            raise ValidationError("matrix series needs first_min_trace > 0")
        if not 0 < self.ratio < 1:
            raise ValidationError(f"matrix series ratio must lie in (0, 1), got {format_ratio(self.ratio)}")

    def term(self, i: int) -> Summand:
        return Summand.matrix(self.size, self.first_min_trace * self.ratio ** (i - 1))

    @property
    def total(self) -> Fraction:
        return self.size * self.first_min_trace / (1 - self.ratio)

    def tail(self, n: int) -> Fraction:
        """Trace of the terms past the first n."""
        return self.total * self.ratio**n


@dataclass(frozen=True)
class SeriesProblem:
    """A problem whose algebras carry geometric matrix tails beyond their finite summands."""

    a: Algebra
    b: Algebra
    d: AbelianD
    ea: EmbeddingSpec
    eb: EmbeddingSpec
    tails_a: Tuple[MatrixSeries, ...] = ()
    tails_b: Tuple[MatrixSeries, ...] = ()


def _truncate_side(alg: Algebra, e: EmbeddingSpec, tails: Sequence[MatrixSeries], n: int) -> Tuple[Algebra, EmbeddingSpec]:
    summands = list(alg)
    lambdas = dict(e.lambdas)
    for series in tails:
        for i in range(1, n + 1):
            lambdas[(series.atom, len(summands))] = series.size
            summands.append(series.term(i))
        lambdas[(series.atom, len(summands))] = 1
        summands.append(Summand.matrix(1, series.tail(n)))
    return Algebra(tuple(summands)), EmbeddingSpec(lambdas=lambdas, alphas=e.alphas)


def truncate_series(sp: SeriesProblem, n: int) -> AmalgamProblem:
    """Keeps n terms of every tail; the rest of each tail becomes one abelian atom."""
    if n < 1:
        raise ValidationError(f"truncation needs at least one retained term, got {n}")
    a, ea = _truncate_side(sp.a, sp.ea, sp.tails_a, n)
    b, eb = _truncate_side(sp.b, sp.eb, sp.tails_b, n)
    return AmalgamProblem(a=a, b=b, d=sp.d, ea=ea, eb=eb)


@dataclass(frozen=True)
class TruncationReport:
    n: int
    result: Algebra
    next_result: Algebra
    stable: Tuple[Summand, ...]

    @property
    def matrix_counts(self) -> Tuple[int, int]:
        def count(a: Algebra) -> int:
            return sum(1 for s in a if s.kind == MATRIX)

        return count(self.result), count(self.next_result)

    @property
    def grows(self) -> bool:
        lo, hi = self.matrix_counts
        return hi > lo

    def render(self) -> List[str]:
        lo, hi = self.matrix_counts
        lines = [
            f"N={self.n}: {self.result.render()}",
            f"N={self.n + 1}: {self.next_result.render()}",
            "stable: " + (" (+) ".join(s.render() for s in self.stable) or "none"),
        ]
        if self.grows:
            lines.append(f"matrix summands grow with N ({lo} -> {hi}); the exact product has infinitely many")
        return lines


def truncation_report(sp: SeriesProblem, n: int, stages_max: int = DEFAULT_STAGES_MAX) -> TruncationReport:
    here = amalgamated_product(truncate_series(sp, n), stages_max=stages_max).result
    there = amalgamated_product(truncate_series(sp, n + 1), stages_max=stages_max).result
    common = Counter(here.summands) & Counter(there.summands)
    stable: List[Summand] = []
    for s in canonicalize(here).summands:
        if common[s] > 0:
            common[s] -= 1
            stable.append(s)
    return TruncationReport(n=n, result=here, next_result=there, stable=tuple(stable))
