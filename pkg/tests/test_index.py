"""Exact vector index: argsort equivalence, tie handling, prefix property,
serialization, corruption detection."""

import numpy as np
import pytest

from raglab import index as vindex
from raglab.checkpoint import ChecksumError, FormatError


def _unit_rows(rng, n, d):
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _unit(v):
    return v / np.linalg.norm(v)


def _brute_force(ids, matrix, query, k):
    scores = matrix.astype(np.float64) @ np.asarray(query, dtype=np.float64)
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [(ids[i], float(scores[i])) for i in order[:k]]


def test_top_k_equals_full_argsort(rng):
    n, d = 40, 8
    ids = [f"doc-{i:03d}" for i in range(n)]
    ix = vindex.VectorIndex(ids, _unit_rows(rng, n, d))
    for _ in range(20):
        q = _unit(rng.normal(size=d))
        for k in (1, 3, n, n + 5):
            got = vindex.top_k(ix, q, k)
            want = _brute_force(ix.ids, ix.matrix, q, k)
            assert [g[0] for g in got] == [w[0] for w in want]
            np.testing.assert_allclose([g[1] for g in got], [w[1] for w in want], rtol=1e-12)


def test_prefix_property(rng):
    ix = vindex.VectorIndex([f"d{i}" for i in range(30)], _unit_rows(rng, 30, 6))
    q = _unit(rng.normal(size=6))
    full = [doc for doc, _ in vindex.top_k(ix, q, 30)]
    for k in range(1, 11):
        assert [doc for doc, _ in vindex.top_k(ix, q, k)] == full[:k]


def test_exact_ties_break_by_ascending_id():
    # two identical rows: equal scores against any query
    row = _unit(np.array([1.0, 2.0, 3.0]))
    ix = vindex.VectorIndex(["z-doc", "a-doc"], np.stack([row, row]))
    got = vindex.top_k(ix, row, 2)
    assert [doc for doc, _ in got] == ["a-doc", "z-doc"]


def test_scores_row_order_and_dtype(rng):
    mat = _unit_rows(rng, 5, 4)
    ix = vindex.VectorIndex([f"d{i}" for i in range(5)], mat)
    q = _unit(rng.normal(size=4))
    s = ix.scores(q)
    assert s.dtype == np.float64
    np.testing.assert_allclose(s, ix.matrix.astype(np.float64) @ q, rtol=1e-12)
    np.testing.assert_allclose(ix.score_of(q, "d3"), s[3], rtol=0)
    with pytest.raises(KeyError):
        ix.score_of(q, "missing")


def test_build_from_embed_callable(rng):
    vecs = {"a": _unit(rng.normal(size=4)), "b": _unit(rng.normal(size=4))}
    ix = vindex.build(vecs.items(), embed=lambda v: v)
    assert ix.ids == ["a", "b"]
    np.testing.assert_allclose(ix.matrix[0], vecs["a"].astype(np.float32), rtol=1e-6)


def test_constructor_validations(rng):
    good = _unit_rows(rng, 3, 4)
    with pytest.raises(ValueError, match="unit-norm"):
        vindex.VectorIndex(["a", "b", "c"], good * 2.0)
    with pytest.raises(ValueError, match="duplicate"):
        vindex.VectorIndex(["a", "a", "c"], good)
    with pytest.raises(ValueError, match="row count"):
        vindex.VectorIndex(["a", "b"], good)
    with pytest.raises(ValueError, match="at least one"):
        vindex.VectorIndex([], good[:0])
    with pytest.raises(ValueError, match="2-D"):
        vindex.VectorIndex(["a"], good[0])


def test_query_validations(rng):
    ix = vindex.VectorIndex(["a", "b"], _unit_rows(rng, 2, 4))
    with pytest.raises(ValueError, match="unit-norm"):
        ix.scores(np.ones(4))
    with pytest.raises(ValueError, match="shape"):
        ix.scores(_unit(np.ones(5)))
    with pytest.raises(ValueError, match="k must be"):
        vindex.top_k(ix, _unit(np.ones(4)), 0)


def test_save_load_round_trip(tmp_path, rng):
    ids = [f"doc-{i}" for i in range(7)] + ["café"]  # non-ascii id
    ix = vindex.VectorIndex(ids, _unit_rows(rng, 8, 5))
    path = tmp_path / "x.bsri"
    vindex.save(ix, str(path))
    back = vindex.load(str(path))
    assert back.ids == ix.ids
    np.testing.assert_array_equal(back.matrix, ix.matrix)
    # bit-identical re-save
    path2 = tmp_path / "y.bsri"
    vindex.save(back, str(path2))
    assert path.read_bytes() == path2.read_bytes()


def test_corrupted_byte_raises_checksum_error(tmp_path, rng):
    ix = vindex.VectorIndex(["a", "b", "c"], _unit_rows(rng, 3, 4))
    path = tmp_path / "z.bsri"
    vindex.save(ix, str(path))
    blob = bytearray(path.read_bytes())
    for pos in range(0, len(blob), max(1, len(blob) // 25)):
        bad = bytearray(blob)
        bad[pos] ^= 0x55
        path.write_bytes(bytes(bad))
        with pytest.raises(ChecksumError):
            vindex.load(str(path))


def test_short_file_raises_format_error(tmp_path):
    path = tmp_path / "tiny.bsri"
    path.write_bytes(b"BSRI123")
    with pytest.raises(FormatError):
        vindex.load(str(path))


def test_contains_and_len(rng):
    ix = vindex.VectorIndex(["a", "b"], _unit_rows(rng, 2, 3))
    assert len(ix) == 2
    assert "a" in ix and "nope" not in ix
    assert ix.d == 3
