from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from .algebra import (
    DIFFUSE_TYPE_I,
    HYPERFINITE_II1,
    MATRIX,
    ZERO,
    Algebra,
    Summand,
    format_ratio,
)
from .errors import ValidationError
from .inclusion import (
    AbelianD,
    BratteliDiagram,
    EmbeddingSpec,
    SimpleStep,
    decompose_simple_steps,
    require_valid_embedding,
)

log = logging.getLogger("fgf_amalgam.approx")

MAX_OFFSET = 64


@dataclass(frozen=True)
class StageBlock:
    """One finite-dimensional block of a stage algebra, with its atom multiplicities."""

    summand: Summand
    lambdas: Tuple[Tuple[int, int], ...]
    origin: int
    key: Tuple[object, ...]


@dataclass(frozen=True)
class StagePlan:
    stage: int
    offset: int
    algebra: Algebra
    embedding: EmbeddingSpec
    origin: Tuple[int, ...]
    staged: FrozenSet[int]
    keys: Tuple[Tuple[object, ...], ...]

    def replacement(self, summand: int) -> List[Summand]:
        """Blocks standing in for original summand `summand` at this stage."""
        return [s for s, o in zip(self.algebra, self.origin) if o == summand]

    def max_min_trace(self, summand: int) -> Fraction:
        blocks = self.replacement(summand)
        return max((s.min_trace for s in blocks), default=ZERO)  # type: ignore[type-var]

    @property
    def vanishing(self) -> FrozenSet[int]:
        """Remainder blocks of hyperfinite summands; their trace goes to 0 along the chain."""
        return frozenset(j for j, key in enumerate(self.keys) if key[1:2] == ("rest",))


def is_minimal_in(other: Algebra, eo: EmbeddingSpec, d: AbelianD, k: int) -> bool:
    """p_k is a minimal projection of `other`."""
    t = d.trace(k)
    for i, s in enumerate(other):
        if s.kind == MATRIX and eo.lam(k, i) == 1 and s.min_trace == t:
            return True
    return False


def minimal_central_atoms(other: Algebra, eo: EmbeddingSpec, d: AbelianD) -> FrozenSet[int]:
    """Atoms k with p_k a minimal central projection of `other` (a summand C of trace t_k)."""
    out = set()
    for k in range(len(d)):
        t = d.trace(k)
        if any(s.kind == MATRIX and s.size == 1 and eo.lam(k, i) == 1 and s.min_trace == t for i, s in enumerate(other)):
            out.add(k)
    return frozenset(out)


def max_minimal_under(other: Algebra, eo: EmbeddingSpec, k: int) -> Fraction:
    best = ZERO
    for i, s in enumerate(other):
        if s.kind == MATRIX and eo.lam(k, i) > 0:
            assert s.min_trace is not None
            best = max(best, s.min_trace)
    return best


def _bounds(d: AbelianD, other: Algebra, eo: EmbeddingSpec) -> List[Tuple[Fraction, bool]]:
    # (bound, inclusive) per atom
    out = []
    for k in range(len(d)):
        t = d.trace(k)
        if is_minimal_in(other, eo, d, k):
            out.append((t / 4, True))
        else:
            out.append((t - max_minimal_under(other, eo, k), False))
    return out


def _ok(x: Fraction, bound: Tuple[Fraction, bool]) -> bool:
    b, inclusive = bound
    return x <= b if inclusive else x < b


def _intervals(a: Algebra, ea: EmbeddingSpec, d: AbelianD, i: int) -> List[Tuple[Fraction, Fraction]]:
    """Atom intervals [s_k, s_k + alpha_k) laid out along [0, c) in atom order."""
    out = []
    pos = ZERO
    for k in range(len(d)):
        alpha = ea.alpha(k, i)
        out.append((pos, pos + alpha))
        pos += alpha
    return out


def _type_i_blocks(s: Summand, intervals: List[Tuple[Fraction, Fraction]], stage: int) -> List[Tuple[Fraction, Fraction, Dict[int, int]]]:
    """
    Sequential-fill picture of L-infinity[0, L) tensor M_n: row r covers [rL, (r+1)L) of the
    laid-out atom intervals. Returns (x0, x1, lambda per atom) on a dyadic grid refined by the
    atom boundaries.
    """
    n = s.size
    row = s.central_trace / n
    cuts = {row * j / (2 ** stage) for j in range(2 ** stage + 1)}
    for lo, hi in intervals:
        for y in (lo, hi):
            cuts.add(y - row * int(y // row))
    cuts.add(row)
    xs = sorted(x for x in cuts if 0 <= x <= row)
    blocks = []
    for x0, x1 in zip(xs, xs[1:]):
        if x1 <= x0:
            continue
        mid = (x0 + x1) / 2
        lam: Dict[int, int] = {}
        for r in range(n):
            y = r * row + mid
            for k, (lo, hi) in enumerate(intervals):
                if lo <= y < hi:
                    lam[k] = lam.get(k, 0) + 1
                    break
        blocks.append((x0, x1, lam))
    return blocks


def _type_ii_blocks(s: Summand, alphas: Sequence[Fraction], stage: int) -> Tuple[Fraction, Dict[int, int], Dict[int, Fraction]]:
    u = s.central_trace / (2 ** stage)
    q = {k: int(a // u) for k, a in enumerate(alphas) if a > 0}
    rem = {k: alphas[k] - q[k] * u for k in q if alphas[k] - q[k] * u > 0}
    return u, {k: v for k, v in q.items() if v}, rem


def _blocks(a: Algebra, ea: EmbeddingSpec, d: AbelianD, stage: int) -> List[StageBlock]:
    out: List[StageBlock] = []
    for i, s in enumerate(a):
        if s.kind == MATRIX:
            lam = tuple(sorted((k, ea.lam(k, i)) for k in range(len(d)) if ea.lam(k, i)))
            out.append(StageBlock(summand=s, lambdas=lam, origin=i, key=(i,)))
        elif s.kind == DIFFUSE_TYPE_I:
            intervals = _intervals(a, ea, d, i)
            for x0, x1, lam in _type_i_blocks(s, intervals, stage):
                out.append(
                    StageBlock(
                        summand=Summand.matrix(s.size, x1 - x0),
                        lambdas=tuple(sorted(lam.items())),
                        origin=i,
                        key=(i, "cell", x0, x1),
                    )
                )
        elif s.kind == HYPERFINITE_II1:
            alphas = [ea.alpha(k, i) for k in range(len(d))]
            u, q, rem = _type_ii_blocks(s, alphas, stage)
            if q:
                out.append(
                    StageBlock(
                        summand=Summand.matrix(sum(q.values()), u),
                        lambdas=tuple(sorted(q.items())),
                        origin=i,
                        key=(i, "tower"),
                    )
                )
            for k, r in sorted(rem.items()):
                out.append(StageBlock(summand=Summand.matrix(1, r), lambdas=((k, 1),), origin=i, key=(i, "rest", k)))
        else:
            raise ValidationError(f"summand {i + 1} is a free group factor; stages exist only for hyperfinite algebras")
    return out


def _fits(a: Algebra, ea: EmbeddingSpec, d: AbelianD, bounds: List[Tuple[Fraction, bool]], stage: int) -> bool:
    for i, s in enumerate(a):
        if s.kind == MATRIX:
            continue
        alphas = [ea.alpha(k, i) for k in range(len(d))]
        if s.kind == DIFFUSE_TYPE_I:
            # longest cell is at most one grid step; also never longer than the atom's own mass
            step = s.central_trace / s.size / (2 ** stage)
            for k, alpha in enumerate(alphas):
                if alpha > 0 and not _ok(min(step, alpha), bounds[k]):
                    return False
        elif s.kind == HYPERFINITE_II1:
            u, q, rem = _type_ii_blocks(s, alphas, stage)
            if any(not _ok(u, bounds[k]) for k in q):
                return False
            if any(not _ok(r, bounds[k]) for k, r in rem.items()):
                return False
    return True


def start_offset(a: Algebra, d: AbelianD, ea: EmbeddingSpec, other: Algebra, eo: EmbeddingSpec) -> int:
    """Smallest stage index at which every replacement block satisfies the trace bounds."""
    bounds = _bounds(d, other, eo)
    for stage in range(1, MAX_OFFSET + 1):
        if _fits(a, ea, d, bounds, stage):
            return stage
    raise ValidationError(f"no stage up to {MAX_OFFSET} satisfies the trace bounds")


def _plan(a: Algebra, ea: EmbeddingSpec, d: AbelianD, stage: int, offset: int) -> StagePlan:
    blocks = _blocks(a, ea, d, stage)
    lambdas = {(k, j): lam for j, b in enumerate(blocks) for k, lam in b.lambdas}
    algebra = Algebra(tuple(b.summand for b in blocks))
    staged = frozenset(j for j, b in enumerate(blocks) if a[b.origin].kind != MATRIX)
    return StagePlan(
        stage=stage,
        offset=offset,
        algebra=algebra,
        embedding=EmbeddingSpec(lambdas=lambdas),
        origin=tuple(b.origin for b in blocks),
        staged=staged,
        keys=tuple(b.key for b in blocks),
    )


def build_stage(
    a: Algebra,
    d: AbelianD,
    ea: EmbeddingSpec,
    other: Algebra,
    eo: EmbeddingSpec,
    i: int,
    offset: Optional[int] = None,
) -> StagePlan:
    """
    Stage i of the approximation chain. Stage numbering starts at the offset i0 where the
    trace bounds first hold: build_stage(..., i) is the chain's stage i0 + i - 1.
    """
    if i < 1:
        raise ValidationError(f"stage index must be >= 1, got {i}")
    require_valid_embedding(a, d, ea, "A")
    if offset is None:
        offset = start_offset(a, d, ea, other, eo)
    stage = offset + i - 1
    plan = _plan(a, ea, d, stage, offset)
    log.debug("stage %d (offset %d): %d blocks", stage, offset, len(plan.algebra))
    return plan


def stage_diagram(lower: StagePlan, upper: StagePlan, a: Algebra) -> BratteliDiagram:
    """Inclusion of consecutive stage algebras of the same chain."""
    if upper.stage != lower.stage + 1:
        raise ValidationError("stage plans are not consecutive")
    mult: Dict[Tuple[int, int], int] = {}
    for i, key in enumerate(lower.keys):
        orig = key[0]
        s = a[orig]  # type: ignore[index]
        if s.kind == MATRIX:
            mult[(i, upper.keys.index(key))] = 1
        elif s.kind == DIFFUSE_TYPE_I:
            x0, x1 = key[2], key[3]
            for j, other in enumerate(upper.keys):
                if other[0] == orig and x0 <= other[2] and other[3] <= x1:  # type: ignore[operator]
                    mult[(i, j)] = 1
        elif key[1] == "tower":
            mult[(i, upper.keys.index((orig, "tower")))] = 2
        else:
            k = key[2]
            tower = upper.keys.index((orig, "tower")) if (orig, "tower") in upper.keys else None
            u_next = upper.algebra[tower].min_trace if tower is not None else None
            rest_here = lower.algebra[i].central_trace
            rest_next = (orig, "rest", k)
            nxt = upper.algebra[upper.keys.index(rest_next)].central_trace if rest_next in upper.keys else ZERO
            if nxt:
                mult[(i, upper.keys.index(rest_next))] = 1
            if rest_here != nxt:
                assert tower is not None and u_next is not None
                mult[(i, tower)] = int((rest_here - nxt) / u_next)
    return BratteliDiagram(source=lower.algebra, target=upper.algebra, multiplicities=mult)


def stage_steps(lower: StagePlan, upper: StagePlan, a: Algebra) -> List[SimpleStep]:
    diagram = stage_diagram(lower, upper, a)
    return decompose_simple_steps(lower.algebra, upper.algebra, diagram)


def describe_plan(plan: StagePlan) -> str:
    parts = [f"stage {plan.stage}: {plan.algebra.render()}"]
    staged = [plan.algebra[j] for j in sorted(plan.staged)]
    if staged:
        worst = max(s.min_trace for s in staged)  # type: ignore[type-var]
        parts.append(f"max replacement min trace {format_ratio(worst)}")  # type: ignore[arg-type]
    return "; ".join(parts)

def type_i_patterns(a: Algebra, ea: EmbeddingSpec, d: AbelianD, i: int) -> List[Tuple[Fraction, Dict[int, int]]]:
    """(base length, rows per atom) over the pieces of [0, L) cut at the atom boundaries."""
    s = a[i]
    if s.kind != DIFFUSE_TYPE_I:
        raise ValidationError(f"summand {i + 1} is not type I")
    intervals = _intervals(a, ea, d, i)
    row = s.central_trace / s.size
    cuts = {ZERO, row}
    for lo, hi in intervals:
        for y in (lo, hi):
            cuts.add(y - row * int(y // row))
    xs = sorted(x for x in cuts if 0 <= x <= row)
    out = []
    for x0, x1 in zip(xs, xs[1:]):
        mid = (x0 + x1) / 2
        lam: Dict[int, int] = {}
        for r in range(s.size):
            y = r * row + mid
            for k, (lo, hi) in enumerate(intervals):
                if lo <= y < hi:
                    lam[k] = lam.get(k, 0) + 1
                    break
        out.append((x1 - x0, lam))
    return out


def _is_held(lam: Dict[int, int], central: FrozenSet[int]) -> bool:
    return bool(lam) and set(lam) <= central


def type_i_profile(
    a: Algebra,
    ea: EmbeddingSpec,
    d: AbelianD,
    i: int,
    atoms: FrozenSet[int],
    central: FrozenSet[int] = frozenset(),
) -> Tuple[Tuple[int, Fraction], ...]:
    """
    Compression of the type I summand i by the sum of p_k, k in `atoms`, as homogeneous
    parts (rank, central trace), in the same sequential-fill picture as the stage blocks.
    Base points whose rows all lie under `central` atoms are left out (see held_profiles).
    """
    measure: Dict[int, Fraction] = {}
    for length, lam in type_i_patterns(a, ea, d, i):
        if _is_held(lam, central):
            continue
        rank = sum(n for k, n in lam.items() if k in atoms)
        if rank:
            measure[rank] = measure.get(rank, ZERO) + length
    return tuple(sorted((rank, rank * m) for rank, m in measure.items()))


def held_profiles(
    a: Algebra, ea: EmbeddingSpec, d: AbelianD, i: int, k: int, central: FrozenSet[int]
) -> Dict[FrozenSet[int], Tuple[Tuple[int, Fraction], ...]]:
    """
    Compression by p_k of the base points whose rows all lie under `central` atoms, grouped
    by the atoms those rows meet. When every such atom is a minimal central projection of
    the other algebra, each group is a central L-infinity tensor M_n of the product.
    """
    measure: Dict[FrozenSet[int], Dict[int, Fraction]] = {}
    for length, lam in type_i_patterns(a, ea, d, i):
        if k in lam and _is_held(lam, central):
            acc = measure.setdefault(frozenset(lam), {})
            acc[lam[k]] = acc.get(lam[k], ZERO) + length
    return {key: tuple(sorted((rank, rank * m) for rank, m in acc.items())) for key, acc in measure.items()}
