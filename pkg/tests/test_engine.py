from __future__ import annotations

from fractions import Fraction as F

import pytest

from fgf_amalgam.algebra import Algebra, Summand, algebra_equal, fdim
from fgf_amalgam.engine import (
    AmalgamProblem,
    MatrixSeries,
    amalgamated_product,
    peel_fgf,
    truncate_series,
    truncation_report,
)
from fgf_amalgam.errors import DisconnectedGraphError, ValidationError
from fgf_amalgam.inclusion import AbelianD, EmbeddingSpec
from worked import central_linf, geometric_tail, linf_m3, linf_r, r_with_m2, scalar_d, two_diffuse, two_factors


def _fgf(s, c=1):
    return Summand.fgf(s, c)


@pytest.mark.parametrize(
    "a, b, expected",
    [
        (Algebra.of(_fgf(2)), Algebra.of(_fgf(3)), "L(F(5))[c=1]"),
        (Algebra.of(_fgf(2)), Algebra.of(Summand.matrix(2, F(1, 2))), "L(F(11/4))[c=1]"),
        (Algebra.of(Summand.hyperfinite(1)), Algebra.of(_fgf(2)), "L(F(3))[c=1]"),
        (Algebra.of(Summand.matrix(2, F(1, 2))), Algebra.of(Summand.matrix(2, F(1, 2))), "L(F(3/2))[c=1]"),
    ],
)
def test_free_products_over_the_scalars(a, b, expected):
    report = amalgamated_product(scalar_d(a, b))
    assert report.result.render() == expected
    assert report.ok


def _small_minimal_projections():
    # every minimal projection under an atom has trace 1/6 < t_k/2 = 1/4
    d = AbelianD.of(F(1, 2), F(1, 2))
    a = Algebra.of(Summand.matrix(3, F(1, 6)), Summand.matrix(3, F(1, 6)))
    b = Algebra.of(Summand.matrix(6, F(1, 6)))
    ea = EmbeddingSpec(lambdas={(0, 0): 3, (1, 1): 3})
    eb = EmbeddingSpec(lambdas={(0, 0): 3, (1, 0): 3})
    return AmalgamProblem(a=a, b=b, d=d, ea=ea, eb=eb)


@pytest.mark.parametrize(
    "make, param",
    [
        (_small_minimal_projections, F(17, 12)),
        (lambda: scalar_d(Algebra.of(Summand.matrix(3, F(1, 3))), Algebra.of(Summand.matrix(3, F(1, 3)))), F(16, 9)),
        (lambda: two_diffuse(F(2, 5)), F(38, 25)),
    ],
)
def test_small_minimal_projections_give_a_single_factor(make, param):
    report = amalgamated_product(make(), stages_max=0)
    (s,) = report.result.summands
    assert (s.kind, s.central_trace, s.param) == ("fgf", 1, param)
    assert report.ok


def test_two_projections_over_the_scalars():
    c = Algebra.of(Summand.matrix(1, F(3, 4)), Summand.matrix(1, F(1, 4)))
    report = amalgamated_product(scalar_d(c, c))
    assert report.result.render() == "M_1[t=1/2] (+) LinfM_2[c=1/2]"
    assert report.fdim_check == (F(3, 4), F(3, 4))


def test_two_factor_report():
    report = amalgamated_product(two_factors())
    assert algebra_equal(report.result, Algebra.of(_fgf(F(9, 8), F(1, 2)), _fgf(F(9, 8), F(1, 2))))
    assert report.fdim_line() == "fdim: 31/32 + 7/8 - 25/32 = 17/16 OK"
    assert report.stage_used == 2


def test_stage_cross_check_can_be_skipped():
    report = amalgamated_product(two_factors(), stages_max=0)
    assert report.stage_used == 0
    assert len(report.ledger.factors()) == 2


def test_r_with_m2_stabilizes():
    report = amalgamated_product(r_with_m2(F(1, 2)))
    assert report.result.render() == "L(F(19/16))[c=1]"
    assert report.stage_used == 3


def test_central_type_i_part_survives_the_stage_check():
    report = amalgamated_product(central_linf())
    assert report.result.render() == "LinfM_2[c=3/5] (+) L(F(307/256))[c=2/5]"
    assert report.fdim_check == (F(1651, 1600), F(1651, 1600))
    assert report.ok


@pytest.mark.parametrize("make", [linf_m3, linf_r])
def test_hyperfinite_results_need_no_stages(make):
    report = amalgamated_product(make(), stages_max=0)
    assert report.ok
    assert fdim(report.result) == 1


def _peel_problem():
    d = AbelianD.of(F(1, 2), F(1, 2))
    a = Algebra.of(_fgf(2, F(1, 2)), Summand.hyperfinite(F(1, 2)))
    b = Algebra.of(Summand.matrix(2, F(1, 2)))
    ea = EmbeddingSpec(alphas={(0, 0): F(1, 2), (1, 1): F(1, 2)})
    eb = EmbeddingSpec(lambdas={(0, 0): 1, (1, 0): 1})
    return AmalgamProblem(a=a, b=b, d=d, ea=ea, eb=eb)


def test_peel_replaces_the_factor_by_atoms():
    inner, recipe = peel_fgf(_peel_problem())
    assert inner.a.render() == "R[c=1/2] (+) M_1[t=1/2]"
    assert recipe.summand == 0
    assert recipe.a_index == (1, -1)
    assert recipe.atom_summands == [1]
    inner.validate()


def test_peeled_factor_absorbs_what_it_touches():
    report = amalgamated_product(_peel_problem())
    assert report.result.render() == "L(F(3/2))[c=1]"
    assert report.fdim_terms == (F(5, 4), F(3, 4), F(1, 2))


def test_peel_needs_a_factor_in_a():
    with pytest.raises(ValidationError):
        peel_fgf(two_factors())


def test_swapping_the_sides_gives_the_same_product():
    for p in (two_factors(), r_with_m2(F(1, 3)), _peel_problem()):
        left = amalgamated_product(p, stages_max=0).result
        right = amalgamated_product(p.swapped(), stages_max=0).result
        assert algebra_equal(left, right)


def _identity_c2():
    d = AbelianD.of(F(1, 2), F(1, 2))
    c2 = d.as_algebra()
    return AmalgamProblem(a=c2, b=c2, d=d, ea=EmbeddingSpec.identity(d), eb=EmbeddingSpec.identity(d))


def test_disconnected_graph_needs_per_component():
    with pytest.raises(DisconnectedGraphError) as info:
        amalgamated_product(_identity_c2())
    assert info.value.exit_code == 3
    report = amalgamated_product(_identity_c2(), per_component=True)
    assert report.result.render() == "M_1[t=1/2] (+) M_1[t=1/2]"
    assert report.fdim_check == (F(1, 2), F(1, 2))


def test_per_component_rescales_each_piece():
    d = AbelianD.of(F(1, 2), F(1, 2))
    r2 = Algebra.of(Summand.hyperfinite(F(1, 2)), Summand.hyperfinite(F(1, 2)))
    e = EmbeddingSpec(alphas={(0, 0): F(1, 2), (1, 1): F(1, 2)})
    report = amalgamated_product(AmalgamProblem(a=r2, b=r2, d=d, ea=e, eb=e), per_component=True)
    assert report.result.render() == "L(F(2))[c=1/2] (+) L(F(2))[c=1/2]"
    assert sorted(sorted(x.atoms) for x in report.ledger.entries) == [[0], [1]]


def test_unnormalized_input_is_rejected():
    a = Algebra.of(Summand.hyperfinite(F(1, 2)))
    p = two_diffuse(F(1, 2))
    with pytest.raises(ValidationError):
        amalgamated_product(AmalgamProblem(a=a, b=p.b, d=p.d, ea=p.ea, eb=p.eb))


# ---------------------------------------------------------------------------
# geometric tails


def test_matrix_series():
    s = MatrixSeries(size=2, first_min_trace=F(1, 12), ratio=F(1, 2), atom=1)
    assert s.term(3) == Summand.matrix(2, F(1, 48))
    assert s.total == F(1, 3)
    assert s.tail(2) == F(1, 12)
    with pytest.raises(ValidationError):
        MatrixSeries(size=2, first_min_trace=F(1, 12), ratio=1, atom=1)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 6, 8])
def test_truncated_tail_products(n):
    p = truncate_series(geometric_tail(), n)
    result = amalgamated_product(p).result
    expected = [Summand.matrix(4, F(1, 6)), Summand.matrix(1, F(1, 3 * 2**n))]
    expected += [Summand.matrix(2, F(1, 6 * 2**i)) for i in range(1, n + 1)]
    assert algebra_equal(result, Algebra(tuple(expected)))


def test_truncation_report_sees_growth():
    report = truncation_report(geometric_tail(), 1)
    assert report.matrix_counts == (3, 4)
    assert report.grows
    assert [s.render() for s in report.stable] == ["M_2[t=1/12]", "M_4[t=1/6]"]
    assert report.render()[-1].startswith("matrix summands grow with N (3 -> 4)")


@pytest.mark.parametrize("n", [4, 6, 8])
def test_matrix_count_keeps_growing(n):
    report = truncation_report(geometric_tail(), n)
    assert report.matrix_counts == (n + 2, n + 3)
    assert report.grows
    assert Summand.matrix(4, F(1, 6)) in report.stable
    assert len(report.stable) == n + 1


def test_truncation_keeps_at_least_one_term():
    with pytest.raises(ValidationError):
        truncate_series(geometric_tail(), 0)
