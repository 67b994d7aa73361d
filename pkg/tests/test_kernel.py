from __future__ import annotations

import random
from fractions import Fraction as F

import pytest

from fgf_amalgam.algebra import Algebra, Summand, algebra_equal, fdim
from fgf_amalgam.errors import DisconnectedGraphError, LedgerError, ValidationError
from fgf_amalgam.inclusion import AbelianD, EmbeddingSpec
from fgf_amalgam.kernel import (
    FACTOR,
    FGF,
    HYPERFINITE,
    METHOD_I,
    METHOD_II,
    SIDE_A,
    SIDE_B,
    UNASSIGNED,
    BlockEntry,
    CompressedBlock,
    Connector,
    Piece,
    StageResult,
    WorklistState,
    adjoin_connector,
    block_product,
    compress,
    detect_stabilization,
    enumerate_connectors,
    extract_limit,
    run_limit,
    run_stage,
    stage_sequence,
)
from worked import central_linf, linf_m3, linf_r, r_with_m2, scalar_d, two_diffuse, two_factor_stage, two_factors


def _scalars(side, *traces):
    return CompressedBlock(
        atom=0, side=side, entries=tuple(BlockEntry.matrix(n, 1, t) for n, t in enumerate(traces))
    )


def _limit(p):
    return run_limit(p.a, p.b, p.d, p.ea, p.eb)


# ---------------------------------------------------------------------------
# block products


def test_two_equal_projections_give_linf_m2():
    bp = block_product(_scalars(SIDE_A, F(1, 2), F(1, 2)), _scalars(SIDE_B, F(1, 2), F(1, 2)), F(1))
    assert bp.matrix_summands == ()
    assert bp.remainder == HYPERFINITE
    ((piece, _),) = bp.parts()
    assert piece.render() == "LinfM_2[c=1]"
    assert bp.weight == 0


def test_two_projections_with_an_atom():
    bp = block_product(_scalars(SIDE_A, F(3, 4), F(1, 4)), _scalars(SIDE_B, F(3, 4), F(1, 4)), F(1))
    assert [(p.size, p.min_trace, p.pair) for p in bp.matrix_summands] == [(1, F(1, 2), (0, 0))]
    assert [piece.render() for piece, _ in bp.parts()] == ["M_1[t=1/2]", "LinfM_2[c=1/2]"]
    assert bp.image(SIDE_A, 0) == {0: F(1, 2), 1: F(1, 4)}
    assert bp.image(SIDE_A, 1) == {1: F(1, 4)}


def test_matrix_corners_give_a_factor():
    m2 = CompressedBlock(atom=0, side=SIDE_A, entries=(BlockEntry.matrix(0, 2, F(1, 2)),))
    bp = block_product(m2, CompressedBlock(atom=0, side=SIDE_B, entries=m2.entries), F(1))
    assert bp.remainder == FGF
    assert bp.remainder_weight == F(1, 2)
    ((piece, _),) = bp.parts()
    assert piece.param == F(3, 2)


def test_scalar_side_passes_the_other_through():
    ca = _scalars(SIDE_A, F(1, 3), F(1, 6))
    bp = block_product(ca, _scalars(SIDE_B, F(1, 2)), F(1, 2))
    assert bp.passthrough == SIDE_A
    assert [piece.render() for piece, _ in bp.parts()] == ["M_1[t=1/3]", "M_1[t=1/6]"]
    assert bp.image(SIDE_B, 0) == {0: F(1, 3), 1: F(1, 6)}
    assert bp.image(SIDE_A, 1) == {1: F(1, 6)}


def test_block_masses_must_match_the_atom():
    with pytest.raises(ValidationError):
        block_product(_scalars(SIDE_A, F(1, 2)), _scalars(SIDE_B, F(1, 3)), F(1, 2))


# ---------------------------------------------------------------------------
# gluing


def _glue(pieces, e, f, trace):
    """State holding `pieces`, with one connector whose endpoints resolve to e and f."""
    state = WorklistState()
    ids = [state.add_piece(p) for p in pieces]
    v = Connector(SIDE_A, 0, (0, 1), trace)
    state.bind(SIDE_A, 0, 0, {ids[n]: m for n, m in e.items()})
    state.bind(SIDE_A, 0, 1, {ids[n]: m for n, m in f.items()})
    state.pending = [v]
    adjoin_connector(state, v)
    assert not state.pending
    return state, list(state.pieces.values())


def test_minimal_endpoint_amplifies_the_other_piece():
    state, out = _glue([Piece.matrix(2, F(1, 4)), Piece.matrix(3, F(1, 4))], {0: F(1, 4)}, {1: F(1, 4)}, F(1, 4))
    assert [p.render() for p in out] == ["M_5[t=1/4]"]
    assert state.steps[-1].rule == "amplify"
    assert state.steps[-1].scalar_end == 0
    assert state.weight == -F(1, 16)


def test_haar_corner_inside_one_piece_gives_a_factor():
    _, out = _glue([Piece.matrix(2, F(1, 2))], {0: F(1)}, {0: F(1)}, F(1))
    (y,) = out
    assert y.kind == FGF
    assert (y.weight, y.central_trace, y.param) == (F(3, 4), F(1), F(7, 4))


def test_haar_link_between_minimal_projections_is_type_i():
    state, out = _glue([Piece.matrix(2, F(1, 2))], {0: F(1, 2)}, {0: F(1, 2)}, F(1, 2))
    assert [p.render() for p in out] == ["LinfM_2[c=1]"]
    assert state.steps[-1].rule == "haar"


def test_corner_of_two_factors():
    x = Piece.factor(F(1, 2), F(1, 32))
    assert x.param == F(9, 8)
    _, out = _glue([x, x], {0: F(1, 2)}, {1: F(1, 2)}, F(1, 2))
    (y,) = out
    assert (y.weight, y.central_trace, y.param) == (F(5, 16), F(1), F(21, 16))


def test_connector_inside_one_factor_compresses_it():
    state, out = _glue([Piece.factor(F(1), F(1, 2))], {0: F(1, 2)}, {0: F(1, 2)}, F(1, 2))
    (y,) = out
    assert state.steps[-1].rule == "haar"
    assert (y.kind, y.central_trace, y.param) == (FGF, F(1), F(7, 4))
    assert y.render() == "L(F(7/4))[c=1]"


def test_factor_merge_adds_the_connector_weight():
    x = Piece.factor(F(1, 2), F(1, 16))
    assert x.param == F(5, 4)
    _, out = _glue([x, x], {0: F(1, 4)}, {1: F(1, 4)}, F(1, 4))
    (y,) = out
    assert (y.weight, y.central_trace, y.param) == (F(3, 16), F(1), F(19, 16))


def test_corner_of_a_matrix_and_a_factor():
    state, out = _glue(
        [Piece.matrix(2, F(1, 4)), Piece.factor(F(1, 2), F(1, 2))], {0: F(1, 2)}, {1: F(1, 2)}, F(1, 2)
    )
    (y,) = out
    assert (y.weight, y.central_trace, y.param) == (F(11, 16), F(1), F(27, 16))
    assert state.steps[-1].rule == "corner"
    assert state.steps[-1].central_ends == (False, False)


def test_endpoint_trace_mismatch_is_a_ledger_error():
    with pytest.raises(LedgerError):
        _glue([Piece.matrix(1, F(1, 4)), Piece.matrix(1, F(1, 4))], {0: F(1, 4)}, {1: F(1, 4)}, F(1, 3))


def test_conservation_failure_carries_a_dump():
    state = WorklistState(target=F(1))
    state.add_piece(Piece.matrix(1, F(1, 2)))
    with pytest.raises(LedgerError) as info:
        state.check_conservation()
    assert info.value.dump["target"] == "1"


# ---------------------------------------------------------------------------
# limit mode


def test_connectors_run_diffuse_links_first():
    rendered = [v.render() for v in enumerate_connectors(*_args(two_diffuse(F(1, 3))))]
    assert rendered == ["A#1:1-2@0", "B#1:1-2@0"]
    rendered = [v.render() for v in enumerate_connectors(*_args(two_factors()))]
    assert rendered == ["A#2:2-3@1/8", "A#3:3-4@1/8", "B#2:1-2@1/8", "B#4:4-5@1/8"]


def _args(p):
    return p.a, p.b, p.d, p.ea, p.eb


@pytest.mark.parametrize("alpha", [F(1, 2), F(1, 3), F(2, 5), F(5, 16)])
def test_two_diffuse_inputs_give_one_factor(alpha):
    res = _limit(two_diffuse(alpha))
    expected = Algebra.of(Summand.fgf(1 + alpha**2 + (1 - alpha) ** 2, 1))
    assert algebra_equal(res.algebra, expected)
    assert [x.classification for x in res.ledger.entries] == [FACTOR]


def test_connected_graph_can_still_split_into_two_factors():
    res = _limit(two_factors())
    expected = Algebra.of(Summand.fgf(F(9, 8), F(1, 2)), Summand.fgf(F(9, 8), F(1, 2)))
    assert algebra_equal(res.algebra, expected)
    assert res.ledger.total_weight == F(1, 16)
    assert res.ledger.methods[0] == METHOD_I
    assert res.ledger.methods[1] == METHOD_II
    assert sorted(sorted(x.atoms) for x in res.ledger.entries) == [[0, 1, 2], [2, 3, 4]]


def test_linf_tensor_m3():
    res = _limit(linf_m3())
    assert res.algebra.render() == "LinfM_3[c=1]"
    assert res.ledger.methods[2] == UNASSIGNED
    assert res.ledger.entries[0].subtype == "typeI"


def test_rows_under_a_central_atom_stay_type_i():
    p = central_linf()
    block = compress(p.a, p.d, p.ea, SIDE_A, 1, frozenset([1]))
    assert [(x.profile, x.held) for x in block.entries] == [
        (((1, F(1, 5)),), frozenset()),
        (((2, F(3, 5)),), frozenset([1])),
    ]

    res = _limit(p)
    expected = Algebra.of(Summand.diffuse(2, F(3, 5)), Summand.fgf(F(307, 256), F(2, 5)))
    assert algebra_equal(res.algebra, expected)
    assert res.algebra.render() == "LinfM_2[c=3/5] (+) L(F(307/256))[c=2/5]"
    held = [x for x in res.ledger.entries if x.classification != FACTOR]
    assert [(x.atoms, x.weight, x.subtype) for x in held] == [(frozenset([1]), 0, "typeI")]
    assert res.ledger.total_weight == F(51, 1600)


@pytest.mark.parametrize("alpha", [F(1, 5), F(1, 3), F(2, 5)])
def test_held_part_scales_with_the_atom(alpha):
    res = _limit(central_linf(alpha))
    expected = Algebra.of(Summand.diffuse(2, 1 - 2 * alpha), Summand.fgf(F(307, 256), 2 * alpha))
    assert algebra_equal(res.algebra, expected)
    assert fdim(res.algebra) == 1 + 51 * alpha**2 / 64


def test_type_ii_product():
    res = _limit(linf_r())
    assert res.algebra.render() == "R[c=1]"
    assert res.ledger.entries[0].subtype == "typeII"


@pytest.mark.parametrize("alpha", [F(1, 2), F(1, 3), F(2, 5), F(2, 3)])
def test_r_with_m2(alpha):
    res = _limit(r_with_m2(alpha))
    assert algebra_equal(res.algebra, Algebra.of(Summand.fgf(1 + 3 * alpha**2 / 4, 1)))


def test_scalar_free_products():
    m2 = Algebra.of(Summand.matrix(2, F(1, 2)))
    assert _limit(scalar_d(m2, m2)).algebra.render() == "L(F(3/2))[c=1]"

    c = Algebra.of(Summand.matrix(1, F(3, 4)), Summand.matrix(1, F(1, 4)))
    res = _limit(scalar_d(c, c))
    assert res.algebra.render() == "M_1[t=1/2] (+) LinfM_2[c=1/2]"
    assert fdim(res.algebra) == F(3, 4)


def test_touched_entries_follow_the_summands():
    res = _limit(two_factors())
    left = {n for n, x in enumerate(res.ledger.entries) if 0 in x.atoms}
    assert res.touched[(SIDE_A, 0)] == frozenset(left)
    assert res.touched[(SIDE_A, 1)] == frozenset(left)
    # C(1/4) of B sits under the atom shared by both factors
    assert len(res.touched[(SIDE_B, 2)]) == 2


def test_ledger_to_dict_uses_one_based_atoms():
    data = _limit(two_factors()).ledger.to_dict()
    assert data["totalWeight"] == "1/16"
    assert data["components"][0]["atoms"] == [1, 2, 3]
    assert data["components"][0]["param"] == "9/8"
    assert set(data["methods"]) == {"1", "2", "3", "4", "5"}


def test_kernel_refuses_free_group_factor_inputs():
    a = Algebra.of(Summand.fgf(2, 1))
    with pytest.raises(ValidationError):
        _limit(scalar_d(a, a))


# ---------------------------------------------------------------------------
# stage mode


@pytest.mark.parametrize("i", [2, 3, 4])
def test_stage_params_approach_the_limit(i):
    p = two_factor_stage(i)
    algebra, ledger = run_stage(*_args(p))
    expected = F(9, 8) - F(1, 4 * i * i)
    assert [x.param for x in ledger.factors()] == [expected, expected]
    assert algebra.is_normalized


def test_stage_mode_wants_finite_dimensional_inputs():
    with pytest.raises(ValidationError):
        run_stage(*_args(two_factors()))


def test_stage_mode_refuses_disconnected_graphs():
    d = AbelianD.of(F(1, 2), F(1, 2))
    c2 = d.as_algebra()
    with pytest.raises(DisconnectedGraphError) as info:
        run_stage(c2, c2, d, EmbeddingSpec.identity(d), EmbeddingSpec.identity(d))
    assert info.value.components == [[0], [1]]


def _stage_result(stage, p):
    algebra, ledger = run_stage(*_args(p))
    return StageResult(stage=stage, algebra=algebra, ledger=ledger)


def test_stabilization_is_found_on_the_signature():
    results = [_stage_result(i, two_factor_stage(i)) for i in (2, 3, 4)]
    assert results[0].params != results[1].params
    assert detect_stabilization(results) == 2


def test_no_stabilization():
    m2 = Algebra.of(Summand.matrix(2, F(1, 2)))
    c = Algebra.of(Summand.matrix(1, F(3, 4)), Summand.matrix(1, F(1, 4)))
    results = [_stage_result(1, scalar_d(m2, m2)), _stage_result(2, scalar_d(c, c))]
    assert detect_stabilization(results) is None
    with pytest.raises(ValidationError):
        detect_stabilization(results[:1])


def test_stages_agree_with_a_held_type_i_part():
    p = central_linf()
    results = stage_sequence(*_args(p), 3)
    limit = extract_limit(results[-1], *_args(p))
    assert limit.render() == "LinfM_2[c=3/5] (+) L(F(307/256))[c=2/5]"


def test_contradicting_stage_partition_is_a_ledger_error():
    stabilized = _stage_result(2, two_factor_stage(2))
    with pytest.raises(LedgerError) as info:
        extract_limit(stabilized, *_args(r_with_m2(F(1, 2))))
    assert info.value.exit_code == 4
    assert info.value.dump == {
        "stage": 2,
        "stage_partition": [[1, 2, 3], [3, 4, 5]],
        "limit_partition": [[1, 2]],
    }


def test_remainders_under_a_central_atom_do_not_split_the_partition():
    p = r_with_m2(F(2, 5))
    results = stage_sequence(*_args(p), 4)
    assert all(r.vanishing for r in results)
    for r in results:
        assert {r.ledger.entries[n].atoms for n in r.vanishing} == {frozenset([1])}
    limit = extract_limit(results[-1], *_args(p))
    assert algebra_equal(limit, Algebra.of(Summand.fgf(F(28, 25), 1)))


@pytest.mark.parametrize("seed", range(20))
def test_connector_inside_a_factor_adds_the_corner_square(seed):
    rng = random.Random(seed)
    s = 1 + F(rng.randint(1, 20), rng.randint(1, 8))
    c = F(rng.randint(1, 8), 8)
    t = c * F(rng.randint(1, 4), 4)
    _, out = _glue([Piece.factor(c, c * c * (s - 1))], {0: t}, {0: t}, t)
    (y,) = out
    assert y.param == s + (t / c) ** 2
