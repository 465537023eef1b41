import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from accams.interpret import (assignment_entropy, entropy_bits, hamming_distances, hierarchy,
                              hierarchy_records, hierarchy_text, similar_items)
from accams.kmeans import FitOptions, fit_accams
from accams.matrix import SparseMatrix
from accams.sampler import SampleSet
from accams.stencil import Stencil, StencilModel


def model_from_cols(col_assigns, n_rows=3, ids=None):
    stencils = tuple(Stencil(np.zeros((1, max(d) + 1)), np.zeros(n_rows, int), d)
                     for d in map(np.asarray, col_assigns))
    n = len(col_assigns[0])
    return StencilModel(stencils, n_rows, n, col_ids=ids)


def test_one_level_partition():
    model = model_from_cols([[0, 1, 1, 0, 1]])
    root = hierarchy(model, "cols", depth=1)
    assert [set(c.members) for c in root.children] == [{"1", "2", "4"}, {"0", "3"}]
    assert all(not c.children for c in root.children)
    assert sorted(x for leaf in root.leaves() for x in leaf.members) == list("01234")


def test_min_leaf_larger_than_population():
    model = model_from_cols([[0, 1, 1, 0, 1]])
    root = hierarchy(model, depth=1, min_leaf=10)
    assert root.children == [] and len(root.members) == 5


def test_small_groups_pooled_into_other():
    model = model_from_cols([[0, 0, 0, 1, 2]])
    root = hierarchy(model, depth=1, min_leaf=2)
    assert [c.path for c in root.children] == [(0,), ("other",)]
    assert root.children[1].members == ["3", "4"]


def test_depth_bounds():
    with pytest.raises(ValueError):
        hierarchy(model_from_cols([[0, 1]]), depth=2)
    with pytest.raises(ValueError):
        hierarchy(model_from_cols([[0, 1]]), side="diagonal")


@given(st.lists(st.lists(st.integers(0, 2), min_size=12, max_size=12), min_size=1, max_size=3))
@settings(max_examples=40, deadline=None)
def test_membership_is_intersection_of_predicates(assigns):
    model = model_from_cols(assigns)
    root = hierarchy(model, depth=len(assigns))
    for node in root.walk():
        if "other" in node.path:
            continue
        expect = [str(j) for j in range(12)
                  if all(assigns[l][j] == node.path[l] for l in range(node.depth))]
        assert node.members == expect


def test_planted_hierarchy_recovered():
    rng = np.random.default_rng(0)
    m, n = 120, 40
    j = np.arange(n)
    top = (j >= 20).astype(int)
    sub = ((j % 20) >= 10).astype(int)
    s1 = Stencil([[3.0, -3.0], [-3.0, 3.0]], rng.integers(0, 2, m), top)
    s2 = Stencil([[1.0, -1.0], [-1.0, 1.0]], rng.integers(0, 2, m), sub)
    M = s1.dense() + s2.dense() + 0.05 * rng.normal(size=(m, n))
    model = fit_accams(SparseMatrix.from_dense(M), FitOptions(k=2, s=2, restarts=5))
    root = hierarchy(model, "cols", depth=2)

    def level(depth):
        return {frozenset(node.members) for node in root.walk() if node.depth == depth}

    ids = [str(x) for x in j]
    assert level(1) == {frozenset(ids[:20]), frozenset(ids[20:])}
    assert level(2) == {frozenset(ids[a:a + 10]) for a in (0, 10, 20, 30)}


def test_exports():
    model = model_from_cols([[0, 1, 1, 0, 1], [0, 0, 1, 1, 1]])
    root = hierarchy(model, depth=2)
    text = hierarchy_text(root, sample=2)
    assert text.splitlines()[0] == "root (5): 0, 1 ..."
    recs = [json.loads(x) for x in hierarchy_records(root).splitlines()]
    assert recs[0] == {"depth": 0, "path": [], "count": 5, "members": ["0", "1", "2", "3", "4"]}
    assert {tuple(r["path"]) for r in recs if r["depth"] == 2} == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_similar_items_duplicate_first():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(30, 12))
    M[:, 7] = M[:, 3]
    model = fit_accams(SparseMatrix.from_dense(M), FitOptions(k=4, s=5))
    hits = similar_items(model, "3", "cols", top_n=3)
    assert hits[0] == ("7", 0)


def test_similar_items_single_stencil_order():
    ids = tuple("abcdefgh")
    model = model_from_cols([[0, 1, 0, 1, 1, 0, 1, 0]], ids=ids)
    hits = similar_items(model, "b", top_n=20)
    assert len(hits) == 7
    assert hits == [("d", 0), ("e", 0), ("g", 0), ("a", 1), ("c", 1), ("f", 1), ("h", 1)]
    with pytest.raises(KeyError):
        similar_items(model, "zz")


def test_similar_items_ties_lexicographic():
    ids = ("b", "a", "c", "q")
    model = model_from_cols([[0, 0, 0, 0]], ids=ids)
    assert [x for x, _ in similar_items(model, "q")] == ["a", "b", "c"]


@given(st.lists(st.lists(st.integers(0, 3), min_size=6, max_size=6), min_size=1, max_size=5),
       st.integers(0, 5), st.integers(0, 5), st.integers(0, 5))
@settings(max_examples=60, deadline=None)
def test_hamming_is_a_metric(assigns, a, b, c):
    model = model_from_cols(assigns)
    D = np.stack([hamming_distances(model, i) for i in range(6)])
    assert D[a, b] == D[b, a]
    assert D[a, a] == 0
    vec = np.array(assigns).T
    assert (D[a, b] == 0) == bool(np.all(vec[a] == vec[b]))
    assert D[a, c] <= D[a, b] + D[b, c]


def test_entropy_examples(rng):
    assert entropy_bits(np.repeat(np.arange(10), 7)) == pytest.approx(math.log2(10))
    assert entropy_bits(np.zeros(9, int)) == 0
    labels = rng.integers(0, 6, 500)
    p = np.bincount(labels) / 500
    assert abs(entropy_bits(labels) - float(-(p * np.log2(p)).sum())) < 1e-12


def test_assignment_entropy_bounds_and_sample_sets(rng):
    stencils = tuple(Stencil(np.zeros((4, k)), rng.integers(0, 4, 50), rng.integers(0, k, 40))
                     for k in (1, 2, 5))
    model = StencilModel(stencils, 50, 40)
    h = assignment_entropy(model, "cols")
    assert h.shape == (3,) and h[0] == 0
    assert np.all(h <= np.log2([1, 2, 5]) + 1e-12)
    samples = SampleSet([model, model])
    assert assignment_entropy(samples, "rows").shape == (2, 3)
    root = hierarchy(samples, "rows", depth=1)
    assert len(root.members) == 50
