from __future__ import annotations

import random
from fractions import Fraction as F

import pytest

from fgf_amalgam.algebra import Algebra, Summand
from fgf_amalgam.errors import ValidationError
from fgf_amalgam.inclusion import (
    AbelianD,
    BratteliDiagram,
    EmbeddingSpec,
    SimpleStep,
    UnionFind,
    apply_step,
    bratteli_to_dot,
    build_graph,
    compose_steps,
    connected_components,
    decompose_simple_steps,
    diagram_equivalent,
    graph_to_dot,
    is_connected,
    require_valid_embedding,
    validate_embedding,
)
from worked import linf_m3, two_factors


def test_abelian_d_must_sum_to_one():
    with pytest.raises(ValidationError):
        AbelianD.of(F(1, 2), F(1, 3))
    with pytest.raises(ValidationError):
        AbelianD.of(F(3, 2), F(-1, 2))
    assert len(AbelianD.scalars()) == 1


def test_linf_m2_embedding_is_valid():
    p = linf_m3()
    assert validate_embedding(p.a, p.d, p.ea) == []
    assert validate_embedding(p.b, p.d, p.eb) == []


def test_broken_trace_sum_names_the_atom():
    p = linf_m3()
    broken = EmbeddingSpec(lambdas=dict(p.ea.lambdas), alphas={(0, 0): F(1, 4)})
    violations = validate_embedding(p.a, p.d, broken)
    assert any("trace compatibility at atom 1" in v for v in violations)
    assert any("central trace at summand 1" in v for v in violations)
    with pytest.raises(ValidationError) as info:
        require_valid_embedding(p.a, p.d, broken)
    assert info.value.violations


def test_unitality_violation():
    a = Algebra.of(Summand.matrix(2, F(1, 2)))
    d = AbelianD.scalars()
    violations = validate_embedding(a, d, EmbeddingSpec(lambdas={(0, 0): 1}))
    assert any("unitality at summand 1" in v for v in violations)


def test_wrong_kind_of_entry():
    a = Algebra.of(Summand.matrix(1, F(1, 2)), Summand.hyperfinite(F(1, 2)))
    d = AbelianD.scalars()
    e = EmbeddingSpec(lambdas={(0, 0): 1, (0, 1): 1})
    assert any("non-matrix summand 2" in v for v in validate_embedding(a, d, e))


def test_scalar_d_accepts_full_compressions():
    a = Algebra.of(Summand.matrix(3, F(1, 6)), Summand.fgf(3, F(1, 2)))
    e = EmbeddingSpec.from_rows(a, [[3, F(1, 2)]])
    assert validate_embedding(a, AbelianD.scalars(), e) == []


def test_from_rows_refuses_fractional_lambda():
    a = Algebra.of(Summand.matrix(2, F(1, 2)))
    with pytest.raises(ValidationError):
        EmbeddingSpec.from_rows(a, [[F(3, 2)]])


def test_two_factor_graph_is_a_path():
    p = two_factors()
    g = build_graph(p.a, p.b, p.d, p.ea, p.eb)
    assert g.edges_a == {(1, 2), (2, 3)}
    assert g.edges_b == {(0, 1), (3, 4)}
    assert is_connected(g)


def test_scalar_d_graph():
    a = Algebra.of(Summand.hyperfinite(1))
    e = EmbeddingSpec(alphas={(0, 0): 1})
    g = build_graph(a, a, AbelianD.scalars(), e, e)
    assert g.size == 1 and not g.edges
    assert is_connected(g)


def test_identity_inclusion_is_disconnected():
    d = AbelianD.of(F(1, 2), F(1, 2))
    c2 = d.as_algebra()
    g = build_graph(c2, c2, d, EmbeddingSpec.identity(d), EmbeddingSpec.identity(d))
    assert not g.edges
    assert connected_components(g) == [[0], [1]]
    assert not is_connected(g)


def test_abelian_diffuse_summand_adds_no_edge():
    d = AbelianD.of(F(1, 2), F(1, 2))
    a = Algebra.of(Summand.diffuse(1, 1))
    e = EmbeddingSpec(alphas={(0, 0): F(1, 2), (1, 0): F(1, 2)})
    r = Algebra.of(Summand.hyperfinite(1))
    assert not build_graph(a, a, d, e, e).edges
    assert build_graph(r, a, d, e, e).edges == {(0, 1)}


def test_graph_edges_are_the_union_of_both_sides():
    p = linf_m3()
    g = build_graph(p.a, p.b, p.d, p.ea, p.eb)
    only_a = build_graph(p.a, p.a, p.d, p.ea, p.ea)
    only_b = build_graph(p.b, p.b, p.d, p.eb, p.eb)
    assert g.edges == only_a.edges | only_b.edges


def test_graph_to_dot():
    p = linf_m3()
    dot = graph_to_dot(build_graph(p.a, p.b, p.d, p.ea, p.eb), p.d)
    assert dot.startswith("graph G_D {")
    assert '  p1 [label="1:1/3"];' in dot
    assert "  p2 -- p3;" in dot
    assert "  p1 -- p2 [style=dashed];" in dot
    assert dot.endswith("}\n")


def test_union_find():
    uf = UnionFind(range(5))
    uf.union(0, 1)
    uf.union(3, 4)
    uf.union(1, 0)
    assert uf.find(0) == uf.find(1)
    assert uf.find(2) != uf.find(0)
    assert sorted(sorted(g) for g in uf.groups()) == [[0, 1], [2], [3, 4]]
    uf.union(1, 4)
    assert len(uf.groups()) == 2


def test_decompose_identity_is_empty():
    d = AbelianD.of(F(1, 3), F(2, 3))
    c2 = d.as_algebra()
    diagram = BratteliDiagram(source=c2, target=c2, multiplicities={(0, 0): 1, (1, 1): 1})
    assert decompose_simple_steps(c2, c2, diagram) == []


def test_decompose_scalars_into_m2():
    src = Algebra.of(Summand.matrix(1, 1))
    dst = Algebra.of(Summand.matrix(2, F(1, 2)))
    diagram = BratteliDiagram(source=src, target=dst, multiplicities={(0, 0): 2})
    steps = decompose_simple_steps(src, dst, diagram)
    assert [s.kind for s in steps] == ["copy", "join"]
    assert steps[0].traces == (F(1, 2), F(1, 2))
    assert diagram_equivalent(compose_steps(src, steps), diagram)


def test_decompose_diagonal_into_m2():
    src = Algebra.of(Summand.matrix(1, F(1, 2)), Summand.matrix(1, F(1, 2)))
    dst = Algebra.of(Summand.matrix(2, F(1, 2)))
    diagram = BratteliDiagram(source=src, target=dst, multiplicities={(0, 0): 1, (1, 0): 1})
    steps = decompose_simple_steps(src, dst, diagram)
    assert steps == [SimpleStep.join(0, 1)]
    assert diagram_equivalent(compose_steps(src, steps), diagram)


def test_inconsistent_diagram_rejected():
    src = Algebra.of(Summand.matrix(1, 1))
    dst = Algebra.of(Summand.matrix(3, F(1, 3)))
    diagram = BratteliDiagram(source=src, target=dst, multiplicities={(0, 0): 2})
    assert diagram.check()
    with pytest.raises(ValidationError):
        decompose_simple_steps(src, dst, diagram)


def test_join_needs_equal_min_traces():
    with pytest.raises(ValidationError):
        apply_step([Summand.matrix(1, F(1, 3)), Summand.matrix(1, F(2, 3))], SimpleStep.join(0, 1))


def test_bratteli_dot_labels_multiplicity_and_trace():
    src = Algebra.of(Summand.matrix(1, 1))
    dst = Algebra.of(Summand.matrix(2, F(1, 2)))
    dot = bratteli_to_dot(BratteliDiagram(source=src, target=dst, multiplicities={(0, 0): 2}))
    assert '  s1 -> t1 [label="2 (1)"];' in dot


def _random_diagram(rng: random.Random) -> BratteliDiagram:
    n_src, n_dst = rng.randint(1, 3), rng.randint(1, 3)
    sizes = [rng.randint(1, 3) for _ in range(n_src)]
    mult = {}
    for i in range(n_src):
        mult[(i, rng.randrange(n_dst))] = rng.randint(1, 2)
    for j in range(n_dst):
        if not any(jj == j for _, jj in mult):
            mult[(rng.randrange(n_src), j)] = rng.randint(1, 2)
    for _ in range(rng.randint(0, 2)):
        key = (rng.randrange(n_src), rng.randrange(n_dst))
        mult[key] = mult.get(key, 0) + 1

    dst_sizes = [sum(mult.get((i, j), 0) * sizes[i] for i in range(n_src)) for j in range(n_dst)]
    raw = [F(rng.randint(1, 6)) for _ in range(n_dst)]
    total = sum(d * t for d, t in zip(dst_sizes, raw))
    t_dst = [t / total for t in raw]
    t_src = [sum((mult.get((i, j), 0) * t_dst[j] for j in range(n_dst)), F(0)) for i in range(n_src)]
    src = Algebra(tuple(Summand.matrix(n, t) for n, t in zip(sizes, t_src)))
    dst = Algebra(tuple(Summand.matrix(n, t) for n, t in zip(dst_sizes, t_dst)))
    return BratteliDiagram(source=src, target=dst, multiplicities=mult)


@pytest.mark.parametrize("seed", range(200))
def test_random_decompositions_reproduce_the_diagram(seed):
    diagram = _random_diagram(random.Random(seed))
    assert diagram.check() == []
    steps = decompose_simple_steps(diagram.source, diagram.target, diagram)
    composite = compose_steps(diagram.source, steps)
    assert diagram_equivalent(composite, diagram)
    columns = sorted((q.size, composite.column(j)) for j, q in enumerate(composite.target))
    assert columns == sorted((q.size, diagram.column(j)) for j, q in enumerate(diagram.target))
    assert composite.target.is_normalized
    copies = [s for s in steps if s.kind == "copy"]
    assert steps[: len(copies)] == copies


def test_embedding_of_d_as_a_diagram():
    p = two_factors()
    diagram = BratteliDiagram.from_embedding(p.d, p.b, p.eb)
    assert diagram.check() == []
    steps = decompose_simple_steps(diagram.source, diagram.target, diagram)
    assert diagram_equivalent(compose_steps(diagram.source, steps), diagram)
