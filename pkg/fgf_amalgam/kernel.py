from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

from .algebra import (
    DIFFUSE_TYPE_I,
    FGF,
    HYPERFINITE_II1,
    MATRIX,
    ZERO,
    Algebra,
    Summand,
    canonicalize,
    fdim,
    format_ratio,
)
from .approx import StagePlan, build_stage, held_profiles, is_minimal_in, minimal_central_atoms, start_offset, type_i_profile
from .errors import DisconnectedGraphError, LedgerError, ValidationError
from .inclusion import (
    AbelianD,
    EmbeddingSpec,
    build_graph,
    connected_components,
    require_valid_embedding,
)

log = logging.getLogger("fgf_amalgam.kernel")

SIDE_A = "A"
SIDE_B = "B"

FACTOR = "Factor"
HYPERFINITE = "Hyperfinite"
MATRIX_ONLY = "MatrixOnly"

METHOD_I = "MethodI"
METHOD_II = "MethodII"
UNASSIGNED = "Unassigned"

Profile = Tuple[Tuple[int, Fraction], ...]


def _fuse(parts: Iterable[Tuple[int, Fraction]]) -> Profile:
    acc: Dict[int, Fraction] = {}
    for rank, trace in parts:
        if trace > 0:
            acc[rank] = acc.get(rank, ZERO) + trace
    return tuple(sorted(acc.items()))


def _integral(x: Fraction, what: str) -> int:
    if x.denominator != 1:
        raise LedgerError(f"{what} is not integral: {format_ratio(x)}")
    return int(x)


@dataclass(frozen=True)
class Piece:
    """
    One central summand of the algebra under construction.
    Weights are in absolute trace units: matrix -minTrace^2, diffuse 0, factor c^2 (s - 1).
    """

    kind: str
    central_trace: Fraction
    weight: Fraction = ZERO
    size: int = 1
    min_trace: Optional[Fraction] = None
    profile: Profile = ()
    atoms: FrozenSet[int] = frozenset()
    origin: Optional[Tuple[str, int, FrozenSet[int]]] = None
    staged: bool = False

    @classmethod
    def matrix(cls, size: int, min_trace: Fraction, **kw: Any) -> "Piece":
        return cls(kind=MATRIX, central_trace=size * min_trace, weight=-(min_trace * min_trace), size=size, min_trace=min_trace, **kw)

    @classmethod
    def type_i(cls, profile: Iterable[Tuple[int, Fraction]], **kw: Any) -> "Piece":
        prof = _fuse(profile)
        return cls(kind=DIFFUSE_TYPE_I, central_trace=sum((t for _, t in prof), ZERO), profile=prof, **kw)

    @classmethod
    def type_ii(cls, central_trace: Fraction, **kw: Any) -> "Piece":
        return cls(kind=HYPERFINITE_II1, central_trace=central_trace, **kw)

    @classmethod
    def factor(cls, central_trace: Fraction, weight: Fraction, **kw: Any) -> "Piece":
        return cls(kind=FGF, central_trace=central_trace, weight=weight, **kw)

    @property
    def classification(self) -> str:
        if self.kind == MATRIX:
            return MATRIX_ONLY
        if self.kind == FGF:
            return FACTOR
        return HYPERFINITE

    @property
    def subtype(self) -> Optional[str]:
        if self.kind == DIFFUSE_TYPE_I:
            return "typeI"
        if self.kind == HYPERFINITE_II1:
            return "typeII"
        return None

    @property
    def param(self) -> Optional[Fraction]:
        if self.kind != FGF:
            return None
        return 1 + self.weight / (self.central_trace * self.central_trace)

    def summands(self) -> List[Summand]:
        if self.kind == MATRIX:
            assert self.min_trace is not None
            return [Summand.matrix(self.size, self.min_trace)]
        if self.kind == DIFFUSE_TYPE_I:
            return [Summand.diffuse(rank, trace) for rank, trace in self.profile]
        if self.kind == HYPERFINITE_II1:
            return [Summand.hyperfinite(self.central_trace)]
        param = self.param
        if param is None or param <= 1:
            raise LedgerError(f"factor piece with non-positive weight {format_ratio(self.weight)}")
        return [Summand.fgf(param, self.central_trace)]

    def render(self) -> str:
        return " (+) ".join(s.render() for s in self.summands())


# ---------------------------------------------------------------------------
# per-atom block products


@dataclass(frozen=True)
class BlockEntry:
    """One summand of a compressed corner: a matrix entry M_rank with minimal trace, or a diffuse mass."""

    origin: int
    kind: str
    mass: Fraction
    rank: int = 1
    min_trace: Optional[Fraction] = None
    weight: Fraction = ZERO
    profile: Profile = ()
    # atoms of a type I part that no connector reaches; empty for everything else
    held: FrozenSet[int] = frozenset()

    @classmethod
    def matrix(cls, origin: int, rank: int, min_trace: Fraction) -> "BlockEntry":
        return cls(origin=origin, kind=MATRIX, mass=rank * min_trace, rank=rank, min_trace=min_trace)

    @classmethod
    def diffuse(
        cls, origin: int, kind: str, mass: Fraction, weight: Fraction = ZERO, profile: Profile = (), held: FrozenSet[int] = frozenset()
    ) -> "BlockEntry":
        return cls(origin=origin, kind=kind, mass=mass, weight=weight, profile=profile, held=held)

    @property
    def entry_weight(self) -> Fraction:
        if self.kind == MATRIX:
            assert self.min_trace is not None
            return -(self.min_trace * self.min_trace)
        return self.weight

    def as_piece(self) -> Piece:
        if self.kind == MATRIX:
            assert self.min_trace is not None
            return Piece.matrix(self.rank, self.min_trace)
        if self.kind == DIFFUSE_TYPE_I:
            return Piece.type_i(self.profile or ((1, self.mass),))
        if self.kind == HYPERFINITE_II1:
            return Piece.type_ii(self.mass)
        return Piece.factor(self.mass, self.weight)


@dataclass(frozen=True)
class CompressedBlock:
    atom: int
    side: str
    entries: Tuple[BlockEntry, ...]

    @property
    def total(self) -> Fraction:
        return sum((x.mass for x in self.entries), ZERO)

    @property
    def weight(self) -> Fraction:
        return sum((x.entry_weight for x in self.entries), ZERO)

    @property
    def is_scalar(self) -> bool:
        return len(self.entries) == 1 and self.entries[0].kind == MATRIX and self.entries[0].rank == 1

    @property
    def is_two_scalars(self) -> bool:
        return len(self.entries) == 2 and all(x.kind == MATRIX and x.rank == 1 for x in self.entries)


def _profile_mass(profile: Profile) -> Fraction:
    return sum((t for _, t in profile), ZERO)


def compress(
    a: Algebra, d: AbelianD, e: EmbeddingSpec, side: str, k: int, central: FrozenSet[int] = frozenset()
) -> CompressedBlock:
    """
    p_k A p_k as a list of entries, one per summand of A that p_k meets. `central` holds the
    atoms that are minimal central projections of the other algebra; the part of a type I
    summand lying wholly under them becomes held entries, one per set of atoms its rows meet.
    """
    entries: List[BlockEntry] = []
    for i, s in enumerate(a):
        if s.kind == MATRIX:
            lam = e.lam(k, i)
            if lam:
                assert s.min_trace is not None
                entries.append(BlockEntry.matrix(i, lam, s.min_trace))
            continue
        alpha = e.alpha(k, i)
        if not alpha:
            continue
        if s.kind == DIFFUSE_TYPE_I:
            at = frozenset([k])
            rest = type_i_profile(a, e, d, i, at, central)
            held = held_profiles(a, e, d, i, k, central)
            if _profile_mass(rest) + sum((_profile_mass(p) for p in held.values()), ZERO) != alpha:
                raise LedgerError(f"side {side}: type I summand {i + 1} does not fill atom {k + 1}")
            if rest:
                entries.append(BlockEntry.diffuse(i, DIFFUSE_TYPE_I, _profile_mass(rest), profile=rest))
            for atoms, profile in sorted(held.items(), key=lambda kv: sorted(kv[0])):
                entries.append(BlockEntry.diffuse(i, DIFFUSE_TYPE_I, _profile_mass(profile), profile=profile, held=atoms))
        elif s.kind == HYPERFINITE_II1:
            entries.append(BlockEntry.diffuse(i, HYPERFINITE_II1, alpha))
        else:
            raise ValidationError(f"side {side}: summand {i + 1} is a free group factor; the kernel handles hyperfinite inputs only")
    return CompressedBlock(atom=k, side=side, entries=tuple(entries))


@dataclass(frozen=True)
class PairSummand:
    size: int
    min_trace: Fraction
    pair: Tuple[int, int]


@dataclass(frozen=True)
class BlockProduct:
    """
    N(k) = vN(p_k A p_k, p_k B p_k). Either one side passes through (the other is the scalars),
    or the result is the matrix summands of the pairs plus one diffuse remainder.
    """

    atom: int
    trace: Fraction
    ca: CompressedBlock
    cb: CompressedBlock
    passthrough: Optional[str] = None
    matrix_summands: Tuple[PairSummand, ...] = ()
    remainder: Optional[str] = None
    remainder_trace: Fraction = ZERO
    remainder_weight: Fraction = ZERO

    def _side(self, side: str) -> CompressedBlock:
        return self.ca if side == SIDE_A else self.cb

    def parts(self) -> List[Tuple[Piece, Tuple[Tuple[str, int], ...]]]:
        """Local summands with the (side, entry index) pairs that feed them."""
        if self.passthrough is not None:
            block = self._side(self.passthrough)
            return [(x.as_piece(), ((self.passthrough, n),)) for n, x in enumerate(block.entries)]
        out: List[Tuple[Piece, Tuple[Tuple[str, int], ...]]] = []
        for p in self.matrix_summands:
            out.append((Piece.matrix(p.size, p.min_trace), ((SIDE_A, p.pair[0]), (SIDE_B, p.pair[1]))))
        if self.remainder is not None:
            feeds = tuple((SIDE_A, n) for n in range(len(self.ca.entries))) + tuple(
                (SIDE_B, n) for n in range(len(self.cb.entries))
            )
            if self.remainder == HYPERFINITE:
                out.append((Piece.type_i(((2, self.remainder_trace),)), feeds))
            else:
                out.append((Piece.factor(self.remainder_trace, self.remainder_weight), feeds))
        return out

    @property
    def weight(self) -> Fraction:
        return sum((p.weight for p, _ in self.parts()), ZERO)

    def image(self, side: str, index: int) -> Dict[int, Fraction]:
        """
        Where a minimal projection of entry `index` lands (the whole entry for diffuse entries),
        as local part index -> trace.
        """
        block = self._side(side)
        x = block.entries[index]
        if self.passthrough is not None:
            if side == self.passthrough:
                return {index: x.min_trace if x.kind == MATRIX else x.mass}  # type: ignore[dict-item]
            return {n: piece.central_trace for n, (piece, _) in enumerate(self.parts())}
        rem_index = len(self.matrix_summands)
        if x.kind != MATRIX:
            return {rem_index: x.mass}
        out: Dict[int, Fraction] = {}
        used = ZERO
        other = self.cb if side == SIDE_A else self.ca
        for n, p in enumerate(self.matrix_summands):
            mine, theirs = (p.pair[0], p.pair[1]) if side == SIDE_A else (p.pair[1], p.pair[0])
            if mine == index:
                share = other.entries[theirs].rank * p.min_trace
                out[n] = share
                used += share
        assert x.min_trace is not None
        rest = x.min_trace - used
        if rest > 0:
            if self.remainder is None:
                raise LedgerError(f"atom {self.atom + 1}: entry {index + 1} of side {side} has mass left but no remainder")
            out[rem_index] = rest
        elif rest < 0:
            raise LedgerError(f"atom {self.atom + 1}: entry {index + 1} of side {side} is overdrawn by the pair summands")
        return out


def block_product(ca: CompressedBlock, cb: CompressedBlock, t_k: Fraction) -> BlockProduct:
    for block in (ca, cb):
        if block.total != t_k:
            raise ValidationError(
                f"atom {block.atom + 1}: side {block.side} masses sum to {format_ratio(block.total)}, expected {format_ratio(t_k)}"
            )
    if cb.is_scalar:
        return BlockProduct(atom=ca.atom, trace=t_k, ca=ca, cb=cb, passthrough=SIDE_A)
    if ca.is_scalar:
        return BlockProduct(atom=ca.atom, trace=t_k, ca=ca, cb=cb, passthrough=SIDE_B)

    pairs: List[PairSummand] = []
    for i, x in enumerate(ca.entries):
        if x.kind != MATRIX:
            continue
        for j, y in enumerate(cb.entries):
            if y.kind != MATRIX:
                continue
            assert x.min_trace is not None and y.min_trace is not None
            m = x.min_trace + y.min_trace - t_k
            if m > 0:
                pairs.append(PairSummand(size=x.rank * y.rank, min_trace=m, pair=(i, j)))

    rest = t_k - sum((p.size * p.min_trace for p in pairs), ZERO)
    weight = ca.weight + cb.weight + t_k * t_k + sum((p.min_trace * p.min_trace for p in pairs), ZERO)
    if rest < 0:
        raise LedgerError(f"atom {ca.atom + 1}: pair summands exceed the corner trace")
    if rest == 0:
        if weight != 0:
            raise LedgerError(f"atom {ca.atom + 1}: no diffuse remainder but weight {format_ratio(weight)} is left")
        kind = None
    elif ca.is_two_scalars and cb.is_two_scalars:
        if weight != 0:
            raise LedgerError(f"atom {ca.atom + 1}: two-projection remainder with weight {format_ratio(weight)}")
        kind = HYPERFINITE
    else:
        if weight <= 0:
            raise LedgerError(f"atom {ca.atom + 1}: free group factor remainder with weight {format_ratio(weight)}")
        kind = FGF
    return BlockProduct(
        atom=ca.atom,
        trace=t_k,
        ca=ca,
        cb=cb,
        matrix_summands=tuple(pairs),
        remainder=kind,
        remainder_trace=rest,
        remainder_weight=weight if kind == FGF else ZERO,
    )


# ---------------------------------------------------------------------------
# connectors and the gluing worklist


@dataclass(frozen=True)
class Connector:
    """
    Partial isometry of summand `summand` on `side` linking minimal projections under
    atoms[0] and atoms[1]. trace 0 marks the infinitesimal connectors of diffuse summands.
    """

    side: str
    summand: int
    atoms: Tuple[int, int]
    trace: Fraction

    def sort_key(self) -> Tuple[bool, str, int, Tuple[int, int]]:
        return (self.trace > 0, self.side, self.summand, self.atoms)

    def render(self) -> str:
        k, kk = self.atoms
        return f"{self.side}#{self.summand + 1}:{k + 1}-{kk + 1}@{format_ratio(self.trace)}"


def enumerate_connectors(a: Algebra, b: Algebra, d: AbelianD, ea: EmbeddingSpec, eb: EmbeddingSpec) -> List[Connector]:
    """
    A spanning path over the atoms each summand meets; abelian diffuse summands link nothing,
    and neither do the held parts of type I summands.
    """
    out: List[Connector] = []
    central = {SIDE_A: minimal_central_atoms(b, eb, d), SIDE_B: minimal_central_atoms(a, ea, d)}
    for side, alg, e in ((SIDE_A, a, ea), (SIDE_B, b, eb)):
        for i, s in enumerate(alg):
            ks = e.atoms_of(alg, i, d)
            if s.kind == DIFFUSE_TYPE_I:
                if s.size == 1:
                    continue
                ks = [k for k in ks if type_i_profile(alg, e, d, i, frozenset([k]), central[side])]
            if len(ks) < 2:
                continue
            if s.kind == MATRIX:
                assert s.min_trace is not None
                t = s.min_trace
            else:
                t = ZERO
            out.extend(Connector(side, i, (x, y), t) for x, y in zip(ks, ks[1:]))
    return sorted(out, key=Connector.sort_key)


@dataclass(frozen=True)
class GlueStep:
    connector: Connector
    rule: str
    scalar_end: Optional[int]
    weight_after: Fraction
    central_ends: Tuple[bool, bool] = (False, False)


class WorklistState:
    """
    Live pieces, the redirect table of retired pieces (old id -> new id -> share of a unit of
    old mass), the images of every input entry, and the pending connectors.
    """

    def __init__(self, target: Optional[Fraction] = None) -> None:
        self.pieces: Dict[int, Piece] = {}
        self.redirect: Dict[int, Dict[int, Fraction]] = {}
        self.images: Dict[Tuple[str, int, int], Dict[int, Fraction]] = {}
        self.units: Dict[int, Dict[int, Fraction]] = {}
        self.pending: List[Connector] = []
        self.steps: List[GlueStep] = []
        self.target = target
        self.sources: Dict[str, Tuple[Algebra, EmbeddingSpec]] = {}
        self.d: Optional[AbelianD] = None
        # per side: atoms that are minimal central projections of the other algebra
        self.central: Dict[str, FrozenSet[int]] = {}
        self.held: Dict[Tuple[str, int, int], Dict[int, Fraction]] = {}
        self._next = 0

    def add_piece(self, piece: Piece) -> int:
        pid = self._next
        self._next += 1
        self.pieces[pid] = piece
        return pid

    def bind(self, side: str, summand: int, atom: int, image: Dict[int, Fraction]) -> None:
        self.images[(side, summand, atom)] = dict(image)

    def retire(self, pid: int, shares: Dict[int, Fraction]) -> None:
        del self.pieces[pid]
        self.redirect[pid] = {n: s for n, s in shares.items() if s}

    def resolve(self, desc: Dict[int, Fraction]) -> Dict[int, Fraction]:
        out: Dict[int, Fraction] = {}
        stack = list(desc.items())
        while stack:
            pid, m = stack.pop()
            if not m:
                continue
            if pid in self.pieces:
                out[pid] = out.get(pid, ZERO) + m
            elif pid in self.redirect:
                stack.extend((n, m * s) for n, s in self.redirect[pid].items())
            else:
                raise LedgerError(f"dangling piece reference {pid}", dump=self.dump())
        return out

    def endpoint(self, v: Connector, end: int) -> Dict[int, Fraction]:
        key = (v.side, v.summand, v.atoms[end])
        if key not in self.images:
            raise LedgerError(f"dangling endpoint {v.render()} at atom {v.atoms[end] + 1}", dump=self.dump())
        return self.resolve(self.images[key])

    @property
    def weight(self) -> Fraction:
        return sum((p.weight for p in self.pieces.values()), ZERO)

    def check_conservation(self) -> None:
        if self.target is None:
            return
        have = self.weight + sum((v.trace * v.trace for v in self.pending), ZERO)
        if have != self.target:
            raise LedgerError(
                f"ledger conservation failed: weights {format_ratio(have)} != expected {format_ratio(self.target)}",
                dump=self.dump(),
            )

    def dump(self) -> Dict[str, Any]:
        return {
            "pieces": {str(pid): p.render() + f" W={format_ratio(p.weight)}" for pid, p in sorted(self.pieces.items())},
            "pending": [v.render() for v in self.pending],
            "target": None if self.target is None else format_ratio(self.target),
        }


def _is_minimal(state: WorklistState, desc: Dict[int, Fraction]) -> bool:
    if len(desc) != 1:
        return False
    ((pid, m),) = desc.items()
    p = state.pieces[pid]
    return p.kind == MATRIX and p.min_trace == m


def _is_minimal_central(state: WorklistState, desc: Dict[int, Fraction]) -> bool:
    if not _is_minimal(state, desc):
        return False
    return state.pieces[next(iter(desc))].size == 1


def _union_atoms(pieces: Iterable[Piece]) -> FrozenSet[int]:
    out: FrozenSet[int] = frozenset()
    for p in pieces:
        out |= p.atoms
    return out


def _amplified(q: Piece, n: int, m: Fraction) -> Piece:
    """Central summand of q after n copies of its sub-projection of trace m are added."""
    if q.kind == MATRIX:
        assert q.min_trace is not None
        r = _integral(m / q.min_trace, "rank of endpoint in matrix piece")
        return replace(q, size=q.size + n * r, central_trace=(q.size + n * r) * q.min_trace)
    if q.kind == DIFFUSE_TYPE_I:
        parts: List[Tuple[int, Fraction]] = []
        for rank, trace in q.profile:
            rho = trace / rank
            r = (m * trace / q.central_trace) / rho
            lo = r.numerator // r.denominator
            theta = r - lo
            if theta:
                parts.append((rank + n * (lo + 1), rho * theta * (rank + n * (lo + 1))))
            parts.append((rank + n * lo, rho * (1 - theta) * (rank + n * lo)))
        return Piece.type_i(parts, atoms=q.atoms, staged=q.staged)
    return replace(q, central_trace=q.central_trace + n * m, origin=None)


def _split_rows(tau: Fraction, rho: Fraction) -> Profile:
    """Homogeneous parts of total trace tau over a diffuse base of trace rho: r = tau / rho rows on average."""
    r = tau / rho
    lo = r.numerator // r.denominator
    theta = r - lo
    parts = [(lo, lo * (1 - theta) * rho)]
    if theta:
        parts.append((lo + 1, (lo + 1) * theta * rho))
    return _fuse(parts)


def _glue_amplify(state: WorklistState, pid: int, other: Dict[int, Fraction], t_e: Fraction) -> None:
    p = state.pieces[pid]
    shares: Dict[int, Fraction] = {}
    for qid, m in sorted(other.items()):
        q = state.pieces[qid]
        y = _amplified(q, p.size, m)
        y = replace(y, atoms=q.atoms | p.atoms, staged=q.staged or p.staged, origin=None)
        yid = state.add_piece(y)
        state.retire(qid, {yid: Fraction(1)})
        shares[yid] = m / t_e
    state.retire(pid, shares)


def _entry_for(piece: Piece, pid: int, mass: Fraction) -> BlockEntry:
    if piece.kind == MATRIX:
        assert piece.min_trace is not None
        return BlockEntry.matrix(pid, _integral(mass / piece.min_trace, "endpoint rank"), piece.min_trace)
    if piece.kind == FGF:
        return BlockEntry.diffuse(pid, FGF, mass, weight=piece.weight)
    return BlockEntry.diffuse(pid, piece.kind, mass)


def _glue_corner(state: WorklistState, e: Dict[int, Fraction], f: Dict[int, Fraction], t_e: Fraction) -> None:
    """Free product of the two endpoint corners inside a corner of trace t_e, amplified back."""
    ids = {SIDE_A: sorted(e), SIDE_B: sorted(f)}
    descs = {SIDE_A: e, SIDE_B: f}
    blocks = {
        side: CompressedBlock(
            atom=-1,
            side=side,
            entries=tuple(_entry_for(state.pieces[pid], pid, descs[side][pid]) for pid in ids[side]),
        )
        for side in (SIDE_A, SIDE_B)
    }
    bp = block_product(blocks[SIDE_A], blocks[SIDE_B], t_e)
    parts = bp.parts()
    fractions: Dict[int, Dict[int, Fraction]] = {}
    for side in (SIDE_A, SIDE_B):
        for n, pid in enumerate(ids[side]):
            p = state.pieces[pid]
            unit = p.min_trace if p.kind == MATRIX else descs[side][pid]
            assert unit is not None
            fractions[pid] = {z: m / unit for z, m in bp.image(side, n).items()}

    new_ids: Dict[int, int] = {}
    for z, (part, _) in enumerate(parts):
        contributors = [pid for pid, fr in fractions.items() if fr.get(z)]
        tau = sum((state.pieces[pid].central_trace * fractions[pid][z] for pid in contributors), ZERO)
        touched = [state.pieces[pid] for pid in contributors]
        kw: Dict[str, Any] = {"atoms": _union_atoms(touched), "staged": any(p.staged for p in touched)}
        if part.kind == MATRIX:
            assert part.min_trace is not None
            y = Piece.matrix(_integral(tau / part.min_trace, "amplified matrix size"), part.min_trace, **kw)
        elif part.kind == DIFFUSE_TYPE_I:
            y = Piece.type_i(_split_rows(tau, part.central_trace / 2), **kw)
        else:
            y = Piece.factor(tau, part.weight, **kw)
        new_ids[z] = state.add_piece(y)
    for pid, fr in fractions.items():
        state.retire(pid, {new_ids[z]: s for z, s in fr.items()})


def _merge(state: WorklistState, touched: Sequence[int], y: Piece) -> None:
    yid = state.add_piece(y)
    for pid in touched:
        state.retire(pid, {yid: Fraction(1)})


def _glue_haar(state: WorklistState, e: Dict[int, Fraction], f: Dict[int, Fraction], t_e: Fraction) -> None:
    touched = sorted(set(e) | set(f))
    pieces = [state.pieces[pid] for pid in touched]
    kw: Dict[str, Any] = {"atoms": _union_atoms(pieces), "staged": any(p.staged for p in pieces)}
    p = pieces[0]
    if len(pieces) == 1 and p.kind == MATRIX and e[touched[0]] == p.min_trace == f[touched[0]]:
        y = Piece.type_i(((p.size, p.central_trace),), **kw)
    else:
        w = sum((q.weight for q in pieces), ZERO) + t_e * t_e
        if w <= 0:
            raise LedgerError(f"Haar corner gives non-positive weight {format_ratio(w)}", dump=state.dump())
        y = Piece.factor(sum((q.central_trace for q in pieces), ZERO), w, **kw)
    _merge(state, touched, y)


def _glue_diffuse(state: WorklistState, e: Dict[int, Fraction], f: Dict[int, Fraction]) -> bool:
    touched = sorted(set(e) | set(f))
    if len(touched) < 2:
        return False
    pieces = [state.pieces[pid] for pid in touched]
    kw: Dict[str, Any] = {"atoms": _union_atoms(pieces), "staged": any(p.staged for p in pieces)}
    w = sum((p.weight for p in pieces), ZERO)
    c = sum((p.central_trace for p in pieces), ZERO)
    if w > 0:
        y = Piece.factor(c, w, **kw)
    elif w < 0 or any(p.kind == MATRIX for p in pieces):
        raise LedgerError(f"diffuse link over pieces with weight {format_ratio(w)}", dump=state.dump())
    elif any(p.kind == HYPERFINITE_II1 for p in pieces):
        y = Piece.type_ii(c, **kw)
    else:
        origins = {p.origin[:2] if p.origin else None for p in pieces}
        if len(origins) == 1 and None not in origins and state.d is not None:
            side, summand = next(iter(origins))  # type: ignore[misc]
            atoms = frozenset().union(*(p.origin[2] for p in pieces if p.origin))
            alg, emb = state.sources[side]
            profile = type_i_profile(alg, emb, state.d, summand, atoms, state.central.get(side, frozenset()))
            y = Piece.type_i(profile, origin=(side, summand, atoms), **kw)
        else:
            y = Piece.type_i([part for p in pieces for part in p.profile], **kw)
    _merge(state, touched, y)
    return True


def adjoin_connector(state: WorklistState, v: Connector) -> WorklistState:
    """Glues the two endpoints of v; updates `state` in place and returns it."""
    if v in state.pending:
        state.pending.remove(v)
    e = state.endpoint(v, 0)
    f = state.endpoint(v, 1)
    scalar_end: Optional[int] = None
    central = (_is_minimal_central(state, e), _is_minimal_central(state, f))
    if v.trace == 0:
        rule = "diffuse" if _glue_diffuse(state, e, f) else "noop"
    else:
        for end, desc in ((0, e), (1, f)):
            got = sum(desc.values(), ZERO)
            if got != v.trace:
                raise LedgerError(
                    f"endpoint trace mismatch on {v.render()} at atom {v.atoms[end] + 1}: {format_ratio(got)}",
                    dump=state.dump(),
                )
        if set(e) & set(f):
            rule = "haar"
            _glue_haar(state, e, f, v.trace)
        elif _is_minimal(state, e):
            rule, scalar_end = "amplify", 0
            _glue_amplify(state, next(iter(e)), f, v.trace)
        elif _is_minimal(state, f):
            rule, scalar_end = "amplify", 1
            _glue_amplify(state, next(iter(f)), e, v.trace)
        else:
            rule = "corner"
            _glue_corner(state, e, f, v.trace)
    state.steps.append(GlueStep(connector=v, rule=rule, scalar_end=scalar_end, weight_after=state.weight, central_ends=central))
    log.debug("connector %s: %s, ledger weight %s", v.render(), rule, format_ratio(state.weight))
    state.check_conservation()
    return state


# ---------------------------------------------------------------------------
# ledger, limit mode and stage mode


@dataclass(frozen=True)
class LedgerEntry:
    classification: str
    weight: Fraction
    central_trace: Fraction
    atoms: FrozenSet[int]
    q_atoms: FrozenSet[int] = frozenset()
    subtype: Optional[str] = None
    summands: Tuple[Summand, ...] = ()
    staged: bool = False

    @property
    def param(self) -> Optional[Fraction]:
        if self.classification != FACTOR:
            return None
        return 1 + self.weight / (self.central_trace * self.central_trace)

    def render(self) -> str:
        return " (+) ".join(s.render() for s in self.summands)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "classification": self.classification,
            "weight": format_ratio(self.weight),
            "centralTrace": format_ratio(self.central_trace),
            "atoms": [k + 1 for k in sorted(self.atoms)],
            "summands": [s.render() for s in self.summands],
        }
        if self.subtype is not None:
            out["subtype"] = self.subtype
        if self.classification == FACTOR:
            out["param"] = format_ratio(self.param)  # type: ignore[arg-type]
            out["qAtoms"] = [k + 1 for k in sorted(self.q_atoms)]
        return out


@dataclass(frozen=True)
class ComponentLedger:
    """One entry per central component of the result, plus the method that handled each atom."""

    entries: Tuple[LedgerEntry, ...]
    methods: Tuple[str, ...] = ()

    @property
    def total_weight(self) -> Fraction:
        return sum((x.weight for x in self.entries), ZERO)

    def factors(self) -> List[LedgerEntry]:
        return [x for x in self.entries if x.classification == FACTOR]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "components": [x.to_dict() for x in self.entries],
            "methods": {str(k + 1): m for k, m in enumerate(self.methods)},
            "totalWeight": format_ratio(self.total_weight),
        }


@dataclass(frozen=True)
class KernelResult:
    algebra: Algebra
    ledger: ComponentLedger
    # (side, summand) -> indices of the ledger entries its central support meets
    touched: Dict[Tuple[str, int], FrozenSet[int]] = field(default_factory=dict)
    steps: Tuple[GlueStep, ...] = ()


def _dominant_factor(state: WorklistState, desc: Dict[int, Fraction]) -> Optional[int]:
    best: Optional[Tuple[Fraction, int]] = None
    for pid, m in desc.items():
        if state.pieces[pid].kind != FGF:
            continue
        if best is None or m > best[0] or (m == best[0] and pid < best[1]):
            best = (m, pid)
    return None if best is None else best[1]


def classify_block_method(k: int, state: WorklistState) -> str:
    """
    MethodI when p_k is minimal on neither side. MethodII when p_k is minimal on some side,
    a connector of that minimal summand leaves atom k towards an endpoint that was not
    minimal and central at the time, and p_k ends up mostly inside a free group factor.
    """
    if state.d is None or k not in state.units:
        raise LedgerError(f"atom {k + 1} has no unit in the worklist state")
    d = state.d
    minimal = {side: is_minimal_in(alg, emb, d, k) for side, (alg, emb) in state.sources.items()}
    if not any(minimal.values()):
        return METHOD_I
    if _dominant_factor(state, state.resolve(state.units[k])) is None:
        return UNASSIGNED
    for side, (alg, emb) in sorted(state.sources.items()):
        if not minimal[side]:
            continue
        owners = {
            i
            for i, s in enumerate(alg)
            if s.kind == MATRIX and emb.lam(k, i) == 1 and s.min_trace == d.trace(k)
        }
        for step in state.steps:
            v = step.connector
            if v.side != side or v.summand not in owners or k not in v.atoms:
                continue
            opposite = 1 if v.atoms[0] == k else 0
            if not step.central_ends[opposite]:
                return METHOD_II
    return UNASSIGNED


def _finish(state: WorklistState) -> KernelResult:
    assert state.d is not None
    methods = tuple(classify_block_method(k, state) for k in range(len(state.d)))
    q: Dict[int, set] = {}
    for k, method in enumerate(methods):
        if method == UNASSIGNED:
            continue
        pid = _dominant_factor(state, state.resolve(state.units[k]))
        if pid is not None:
            q.setdefault(pid, set()).add(k)

    order = sorted(
        state.pieces,
        key=lambda pid: (min(state.pieces[pid].atoms, default=-1), state.pieces[pid].classification, pid),
    )
    entries: List[LedgerEntry] = []
    index_of: Dict[int, int] = {}
    for pid in order:
        p = state.pieces[pid]
        if p.classification == HYPERFINITE and p.weight != 0:
            raise LedgerError(
                f"hyperfinite component over atoms {sorted(k + 1 for k in p.atoms)} has weight {format_ratio(p.weight)}",
                dump=state.dump(),
            )
        if p.kind == FGF and pid not in q:
            log.warning("free group factor %s has no assigned atoms", p.render())
        index_of[pid] = len(entries)
        entries.append(
            LedgerEntry(
                classification=p.classification,
                weight=p.weight,
                central_trace=p.central_trace,
                atoms=p.atoms,
                q_atoms=frozenset(q.get(pid, ())),
                subtype=p.subtype,
                summands=tuple(p.summands()),
                staged=p.staged,
            )
        )

    touched: Dict[Tuple[str, int], set] = {}
    for (side, summand, _atom), image in list(state.images.items()) + list(state.held.items()):
        for pid in state.resolve(image):
            touched.setdefault((side, summand), set()).add(index_of[pid])

    algebra = canonicalize(Algebra(tuple(s for x in entries for s in x.summands)))
    return KernelResult(
        algebra=algebra,
        ledger=ComponentLedger(entries=tuple(entries), methods=methods),
        touched={key: frozenset(v) for key, v in touched.items()},
        steps=tuple(state.steps),
    )


def run_limit(
    a: Algebra,
    b: Algebra,
    d: AbelianD,
    ea: EmbeddingSpec,
    eb: EmbeddingSpec,
    staged_a: FrozenSet[int] = frozenset(),
    staged_b: FrozenSet[int] = frozenset(),
) -> KernelResult:
    """
    A *_D B for hyperfinite A and B: one block product per atom of D, then the connectors
    glued in order. The ledger is checked against fdim after every step.
    """
    require_valid_embedding(a, d, ea, "A")
    require_valid_embedding(b, d, eb, "B")
    state = WorklistState(target=fdim(a) + fdim(b) - fdim(d.as_algebra()) - 1)
    state.sources = {SIDE_A: (a, ea), SIDE_B: (b, eb)}
    state.d = d
    state.central = {SIDE_A: minimal_central_atoms(b, eb, d), SIDE_B: minimal_central_atoms(a, ea, d)}
    staged = {SIDE_A: staged_a, SIDE_B: staged_b}

    held_ids: Dict[Tuple[str, int, FrozenSet[int]], List[int]] = {}
    for k in range(len(d)):
        blocks = {side: compress(alg, d, e, side, k, state.central[side]) for side, (alg, e) in state.sources.items()}
        bp = block_product(blocks[SIDE_A], blocks[SIDE_B], d.trace(k))
        parts = bp.parts()
        ids: List[int] = []
        for piece, feeds in parts:
            origin = None
            held: Optional[Tuple[str, int, FrozenSet[int]]] = None
            if bp.passthrough is not None and piece.kind == DIFFUSE_TYPE_I:
                side, n = feeds[0]
                x = blocks[side].entries[n]
                if x.held:
                    held = (side, x.origin, x.held)
                else:
                    origin = (side, x.origin, frozenset([k]))
            flag = piece.kind == MATRIX and any(blocks[side].entries[n].origin in staged[side] for side, n in feeds)
            ids.append(state.add_piece(replace(piece, atoms=frozenset([k]), origin=origin, staged=flag)))
            if held is not None:
                held_ids.setdefault(held, []).append(ids[-1])
        state.units[k] = {ids[z]: piece.central_trace for z, (piece, _) in enumerate(parts)}
        for side, block in blocks.items():
            for n, x in enumerate(block.entries):
                image = {ids[z]: m for z, m in bp.image(side, n).items()}
                if x.held:
                    state.held.setdefault((side, x.origin, k), {}).update(image)
                else:
                    state.bind(side, x.origin, k, image)
        log.debug("atom %d: %s", k + 1, " (+) ".join(p.render() for p, _ in parts))

    # a held part spread over several atoms is one central L-infinity tensor M_n
    for (side, i, _atoms), pids in sorted(held_ids.items(), key=lambda kv: (kv[0][0], kv[0][1], sorted(kv[0][2]))):
        if len(pids) < 2:
            continue
        pieces = [state.pieces[pid] for pid in pids]
        total = sum((p.central_trace for p in pieces), ZERO)
        size = state.sources[side][0][i].size
        _merge(state, pids, Piece.type_i(((size, total),), atoms=_union_atoms(pieces)))

    state.pending = enumerate_connectors(a, b, d, ea, eb)
    state.check_conservation()
    while state.pending:
        adjoin_connector(state, state.pending[0])
    return _finish(state)


def run_stage(
    a_stage: Algebra,
    b_stage: Algebra,
    d: AbelianD,
    ea: EmbeddingSpec,
    eb: EmbeddingSpec,
    staged_a: FrozenSet[int] = frozenset(),
    staged_b: FrozenSet[int] = frozenset(),
    require_connected: bool = True,
) -> Tuple[Algebra, ComponentLedger]:
    res = _stage_kernel(a_stage, b_stage, d, ea, eb, staged_a, staged_b, require_connected)
    return res.algebra, res.ledger


def _stage_kernel(
    a_stage: Algebra,
    b_stage: Algebra,
    d: AbelianD,
    ea: EmbeddingSpec,
    eb: EmbeddingSpec,
    staged_a: FrozenSet[int],
    staged_b: FrozenSet[int],
    require_connected: bool,
) -> KernelResult:
    for name, alg in (("A", a_stage), ("B", b_stage)):
        if not alg.is_finite_dimensional:
            raise ValidationError(f"stage algebra {name} is not finite-dimensional: {alg.render()}")
    if require_connected:
        components = connected_components(build_graph(a_stage, b_stage, d, ea, eb))
        if len(components) > 1:
            raise DisconnectedGraphError(components)
    return run_limit(a_stage, b_stage, d, ea, eb, staged_a, staged_b)


def _vanishing_entries(res: KernelResult, plans: Dict[str, StagePlan]) -> FrozenSet[int]:
    """Matrix-only entries fed by remainder blocks and by no other staged block."""
    hit: Set[int] = set()
    kept: Set[int] = set()
    for (side, j), entries in res.touched.items():
        if j in plans[side].vanishing:
            hit |= entries
        elif j in plans[side].staged:
            kept |= entries
    return frozenset(n for n in hit - kept if res.ledger.entries[n].classification == MATRIX_ONLY)


@dataclass(frozen=True)
class StageResult:
    stage: int
    algebra: Algebra
    ledger: ComponentLedger
    # ledger entries that vanish in the limit
    vanishing: FrozenSet[int] = frozenset()

    @property
    def signature(self) -> Tuple[Tuple[Tuple[int, Fraction], ...], Tuple[Tuple[int, ...], ...]]:
        """Non-staged matrix summands plus the atom partition of the diffuse components."""
        matrix = []
        for x in self.ledger.entries:
            if x.classification == MATRIX_ONLY and not x.staged:
                s = x.summands[0]
                assert s.min_trace is not None
                matrix.append((s.size, s.min_trace))
        parts = sorted(tuple(sorted(x.atoms)) for x in self.ledger.entries if x.classification != MATRIX_ONLY)
        return (tuple(sorted(matrix)), tuple(parts))

    @property
    def params(self) -> Tuple[Fraction, ...]:
        return tuple(sorted(x.param for x in self.ledger.factors() if x.param is not None))


def stage_plans(
    a: Algebra, b: Algebra, d: AbelianD, ea: EmbeddingSpec, eb: EmbeddingSpec, count: int
) -> List[Tuple[StagePlan, StagePlan]]:
    """The first `count` stage pairs of A and B, started at the larger of the two offsets."""
    if count < 1:
        raise ValidationError(f"stage count must be >= 1, got {count}")
    offset = max(start_offset(a, d, ea, b, eb), start_offset(b, d, eb, a, ea))
    return [
        (build_stage(a, d, ea, b, eb, i, offset=offset), build_stage(b, d, eb, a, ea, i, offset=offset))
        for i in range(1, count + 1)
    ]


def stage_sequence(
    a: Algebra, b: Algebra, d: AbelianD, ea: EmbeddingSpec, eb: EmbeddingSpec, count: int
) -> List[StageResult]:
    """Runs the kernel on `count` consecutive stage pairs sharing one offset."""
    out: List[StageResult] = []
    for pa, pb in stage_plans(a, b, d, ea, eb, count):
        res = _stage_kernel(pa.algebra, pb.algebra, d, pa.embedding, pb.embedding, pa.staged, pb.staged, False)
        log.info("stage %d: %s", pa.stage, res.algebra.render())
        vanishing = _vanishing_entries(res, {SIDE_A: pa, SIDE_B: pb})
        out.append(StageResult(stage=pa.stage, algebra=res.algebra, ledger=res.ledger, vanishing=vanishing))
    return out


def detect_stabilization(results: Sequence[StageResult]) -> Optional[int]:
    """First stage whose signature equals the next one's, or None."""
    if len(results) < 2:
        raise ValidationError("stabilization needs at least two stage results")
    for x, y in zip(results, results[1:]):
        if x.signature == y.signature:
            log.info("stages stabilize from stage %d", x.stage)
            return x.stage
    log.warning("no stabilization within stages %d..%d", results[0].stage, results[-1].stage)
    return None


def _partition(ledger: ComponentLedger, skip: FrozenSet[int] = frozenset()) -> List[Tuple[int, ...]]:
    # staged matrix blocks stand in for diffuse components
    return sorted(
        {
            tuple(sorted(x.atoms))
            for n, x in enumerate(ledger.entries)
            if n not in skip and (x.classification != MATRIX_ONLY or x.staged)
        }
    )


def extract_limit(
    stabilized: StageResult, a: Algebra, b: Algebra, d: AbelianD, ea: EmbeddingSpec, eb: EmbeddingSpec
) -> Algebra:
    """The limit algebra for inputs whose stages have stabilized at `stabilized`."""
    res = run_limit(a, b, d, ea, eb)
    stage_parts = _partition(stabilized.ledger, stabilized.vanishing)
    limit_parts = _partition(res.ledger)
    if stage_parts != limit_parts:
        dump = {
            "stage": stabilized.stage,
            "stage_partition": [[k + 1 for k in part] for part in stage_parts],
            "limit_partition": [[k + 1 for k in part] for part in limit_parts],
        }
        raise LedgerError(f"stage {stabilized.stage} partition disagrees with the limit partition", dump=dump)
    stage_q = sorted(tuple(sorted(x.q_atoms)) for x in stabilized.ledger.factors())
    limit_q = sorted(tuple(sorted(x.q_atoms)) for x in res.ledger.factors())
    if stage_q != limit_q:
        log.warning("stage %d assigned atoms %s differ from the limit's %s", stabilized.stage, stage_q, limit_q)
    expected = fdim(a) + fdim(b) - fdim(d.as_algebra())
    got = fdim(res.algebra)
    if got != expected:
        raise LedgerError(f"limit fdim {format_ratio(got)} != expected {format_ratio(expected)}")
    return res.algebra
