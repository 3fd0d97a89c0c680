import numpy as np
import pytest
from scipy import sparse
from scipy.sparse.linalg import ArpackNoConvergence

from tagtriplet import lsi
from oracles import jacobi_singular_values
from tagtriplet.errors import ConvergenceError, DegenerateVectorError, DimensionError, ParameterError, UnknownTrackError
from tagtriplet.lsi import (
    fit_lsi,
    fold_in,
    format_topic_report,
    normalized_track_matrix,
    overlap_vectors,
    read_model,
    read_model_shape,
    reconstruction_error,
    topic_top_terms,
    track_vector,
    truncated_svd,
    write_model,
)
from tagtriplet.tagspace import TagAssignment, TagCorpus, TagTrackMatrix, build_matrix


def as_matrix(dense) -> TagTrackMatrix:
    dense = np.asarray(dense, dtype=np.float64)
    tags = tuple(("genres", f"g{i:03d}") for i in range(dense.shape[0]))
    tracks = tuple(f"t{j:03d}" for j in range(dense.shape[1]))
    return TagTrackMatrix(sparse.csr_matrix(dense), tags, tracks)


def corpus_from(columns):
    """{track: [tag, ...]} -> corpus over genres"""
    return TagCorpus.from_assignments(
        TagAssignment(t, "genres", tag) for t, tags in columns.items() for tag in tags
    )


def test_identity_matrix():
    _, s, _ = truncated_svd(np.eye(2), 2)
    np.testing.assert_allclose(s, [1.0, 1.0])


def test_diagonal_first_axis():
    U, s, V = truncated_svd(np.diag([3.0, 2.0]), 1)
    np.testing.assert_allclose(s, [3.0])
    np.testing.assert_allclose(np.abs(U[:, 0]), [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(np.abs(V[:, 0]), [1.0, 0.0], atol=1e-12)


def test_k_out_of_range():
    with pytest.raises(ParameterError, match="k"):
        truncated_svd(np.eye(3), 4)
    with pytest.raises(ParameterError):
        truncated_svd(np.eye(3), 0)


def test_singular_values_match_jacobi_oracle(rng):
    for case in range(50):
        m = int(rng.integers(2, 41))
        n = int(rng.integers(2, 61))
        if case % 3 == 0:
            r = int(rng.integers(1, min(m, n) + 1))
            A = rng.normal(size=(m, r)) @ rng.normal(size=(r, n))
        else:
            A = rng.normal(size=(m, n))
        k = int(rng.integers(1, min(m, n) + 1))
        U, s, V = truncated_svd(A, k)
        expected = jacobi_singular_values(A)[:k]
        np.testing.assert_allclose(s, expected, atol=1e-9, rtol=0)
        np.testing.assert_allclose(U.T @ U, np.eye(k), atol=1e-8)
        assert np.all(np.diff(s) <= 0)


def test_rank_r_reconstruction(rng):
    for _ in range(10):
        r = int(rng.integers(1, 8))
        A = rng.normal(size=(30, r)) @ rng.normal(size=(r, 40))
        U, s, V = truncated_svd(A, r)
        assert np.linalg.norm(A - (U * s) @ V.T) < 1e-8


def test_lanczos_path_matches_dense(rng):
    for _ in range(5):
        A = rng.normal(size=(40, 60))
        dense_s = truncated_svd(A, 6)[1]
        U, s, V = truncated_svd(sparse.csr_matrix(A), 6, dense_limit=0)
        np.testing.assert_allclose(s, dense_s, atol=1e-7, rtol=0)
        np.testing.assert_allclose(U.T @ U, np.eye(6), atol=1e-8)


def test_lanczos_iteration_budget_exhausted(rng, monkeypatch):
    def give_up(*args, **kwargs):
        raise ArpackNoConvergence("no convergence", np.array([]), np.empty((80, 0)))

    monkeypatch.setattr(lsi, "svds", give_up)
    A = sparse.csr_matrix(rng.normal(size=(60, 80)))
    with pytest.raises(ConvergenceError) as info:
        truncated_svd(A, 10, max_iter=1, dense_limit=0)
    assert "residual" in str(info.value)
    assert info.value.exit_code == 3


def test_sign_convention_is_deterministic(rng):
    A = rng.normal(size=(12, 15))
    U1, _, V1 = truncated_svd(A, 4)
    U2, _, V2 = truncated_svd(A.copy(), 4)
    np.testing.assert_array_equal(U1, U2)
    for j in range(4):
        assert U1[np.argmax(np.abs(U1[:, j])), j] > 0


def test_one_by_one_corpus():
    W = build_matrix(corpus_from({"t": ["g"]}), ["genres"])
    model = fit_lsi(W, 1)
    np.testing.assert_allclose(model.singular_values, [1.0])
    np.testing.assert_allclose(np.abs(track_vector(model, "t", normalize=False).values), [1.0])
    report = topic_top_terms(model, 0, top_n=5)
    loadings = report.positive_loadings + report.negative_loadings
    assert len(loadings) == 1 and abs(abs(loadings[0][2]) - 1.0) < 1e-12


def test_identical_columns_have_identical_vectors():
    W = build_matrix(corpus_from({"a": ["x", "y"], "b": ["x", "y"], "c": ["z"]}), ["genres"])
    model = fit_lsi(W, 2)
    va = track_vector(model, "a").values
    vb = track_vector(model, "b").values
    np.testing.assert_allclose(va, vb, atol=1e-9)
    assert abs(va @ vb - 1.0) < 1e-9


def test_disjoint_tracks_are_orthogonal():
    W = build_matrix(corpus_from({"a": ["x"], "b": ["y"]}), ["genres"])
    model = fit_lsi(W, 2)
    assert abs(track_vector(model, "a").values @ track_vector(model, "b").values) < 1e-9


def test_k_above_numerical_rank_is_rejected():
    W = build_matrix(corpus_from({"a": ["x", "y"], "b": ["x", "y"], "c": ["x", "y"]}), ["genres"])
    with pytest.raises(ParameterError, match="rank"):
        fit_lsi(W, 2)


def test_track_vectors_match_dense_svd(rng):
    dense = (rng.random((8, 10)) < 0.4).astype(float)
    dense[0] = 1.0
    W = as_matrix(dense)
    model = fit_lsi(W, 4)
    U, s, Vt = np.linalg.svd(dense, full_matrices=False)
    expected = (Vt[:4].T * s[:4])
    for j in range(4):
        col, ref = model.track_vectors[:, j], expected[:, j]
        sign = 1.0 if col @ ref >= 0 else -1.0
        np.testing.assert_allclose(col, sign * ref, atol=1e-9)


def test_normalized_vectors_and_errors():
    W = build_matrix(corpus_from({"a": ["x"], "b": ["x", "y"], "c": ["y"]}), ["genres"])
    model = fit_lsi(W, 2)
    rows = normalized_track_matrix(model, ["c", "a"])
    np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-9)
    with pytest.raises(UnknownTrackError):
        track_vector(model, "missing")


def test_zero_vector_cannot_be_normalized():
    model = fit_lsi(as_matrix(np.eye(2)), 1)
    object.__setattr__(model, "track_vectors", np.zeros_like(model.track_vectors))
    with pytest.raises(DegenerateVectorError):
        track_vector(model, "t000")


def test_fold_in_reproduces_training_vectors(small_synth):
    W = build_matrix(small_synth.corpus, ["genres", "moods"])
    model = fit_lsi(W, 6)
    for t in W.tracks[:10]:
        np.testing.assert_allclose(fold_in(model, W.column(t)).values,
                                   track_vector(model, t, normalize=False).values, atol=1e-6)


def test_fold_in_is_linear(small_synth):
    W = build_matrix(small_synth.corpus, ["genres"])
    model = fit_lsi(W, 4)
    x1 = np.zeros(W.m)
    x2 = np.zeros(W.m)
    x1[0] = 1.0
    x2[1] = 1.0
    np.testing.assert_allclose(fold_in(model, x1 + x2).values,
                               fold_in(model, x1).values + fold_in(model, x2).values, atol=1e-12)


def test_fold_in_of_unseen_mixture_matches_refit():
    base = {f"t{i:02d}": (["a", "b"] if i % 2 else ["c", "d"]) for i in range(20)}
    W = build_matrix(corpus_from(base), ["genres"])
    model = fit_lsi(W, 2)
    mixture = np.array([1.0, 1.0, 0.0, 0.0])
    folded = fold_in(model, mixture, normalize=True).values

    refit = fit_lsi(build_matrix(corpus_from({**base, "zz": ["a", "b"]}), ["genres"]), 2)
    appended = track_vector(refit, "zz").values
    reference = track_vector(model, "t01").values
    assert folded @ reference > 0.99
    assert abs(appended @ track_vector(refit, "t01").values) > 0.99


def test_fold_in_errors(small_synth):
    model = fit_lsi(build_matrix(small_synth.corpus, ["genres"]), 3)
    with pytest.raises(DimensionError):
        fold_in(model, np.ones(model.m + 1))
    with pytest.raises(DegenerateVectorError):
        fold_in(model, np.zeros(model.m))


def test_topics_separate_disjoint_blocks():
    columns = {f"r{i}": ["rock", "metal"] for i in range(5)}
    columns.update({f"j{i}": ["jazz", "swing"] for i in range(3)})
    model = fit_lsi(build_matrix(corpus_from(columns), ["genres"]), 2)
    first = topic_top_terms(model, 0, top_n=2)
    second = topic_top_terms(model, 1, top_n=2)
    assert {tag for _, tag, _ in first.positive_loadings} == {"rock", "metal"}
    assert {tag for _, tag, _ in second.positive_loadings} == {"jazz", "swing"}


def test_topic_ordinal_out_of_range():
    model = fit_lsi(build_matrix(corpus_from({"t": ["g"]}), ["genres"]), 1)
    with pytest.raises(ParameterError, match="topic_ordinal"):
        topic_top_terms(model, 1)


def test_top_n_larger_than_m(rng):
    dense = rng.normal(size=(5, 9))
    model = fit_lsi(as_matrix(dense), 3)
    report = topic_top_terms(model, 0, top_n=50)
    assert len(report.positive_loadings) + len(report.negative_loadings) == 5
    text = format_topic_report([report])
    assert text.startswith("# tagtriplet-topics 1\n")
    assert "Topic (0)" in text and "(genres) g000" in text


def test_eckart_young_and_monotone_error(rng):
    Q1, _ = np.linalg.qr(rng.normal(size=(20, 20)))
    Q2, _ = np.linalg.qr(rng.normal(size=(25, 20)))
    spectrum = np.linspace(10.0, 0.5, 20)
    W = as_matrix((Q1 * spectrum) @ Q2.T)
    previous = np.inf
    for k in (1, 3, 5, 10, 15):
        err = reconstruction_error(W, fit_lsi(W, k))
        expected = np.sqrt(np.sum(spectrum[k:] ** 2))
        assert abs(err - expected) <= 1e-6 * expected
        assert err <= previous
        previous = err


def test_cosine_invariant_to_track_order():
    columns = {"a": ["x", "y"], "b": ["y", "z"], "c": ["z"], "d": ["x", "w"]}
    m1 = fit_lsi(build_matrix(corpus_from(columns), ["genres"]), 3)
    renamed = {f"z{t}" if t in "ab" else t: tags for t, tags in columns.items()}
    m2 = fit_lsi(build_matrix(corpus_from(renamed), ["genres"]), 3)
    c1 = track_vector(m1, "a").values @ track_vector(m1, "c").values
    c2 = track_vector(m2, "za").values @ track_vector(m2, "c").values
    assert abs(c1 - c2) < 1e-9


def test_overlap_vectors_are_normalized_columns():
    W = build_matrix(corpus_from({"a": ["x", "y"], "b": ["y"]}), ["genres"])
    rows = overlap_vectors(W, ["a", "b"])
    np.testing.assert_allclose(rows @ rows.T, [[1.0, 1 / np.sqrt(2)], [1 / np.sqrt(2), 1.0]])


def test_model_file_is_value_exact(small_synth, tmp_path):
    model = fit_lsi(build_matrix(small_synth.corpus, ["genres", "styles"]), 5)
    path = tmp_path / "lsi.model"
    write_model(model, path)
    loaded = read_model(path)
    np.testing.assert_array_equal(loaded.singular_values, model.singular_values)
    np.testing.assert_array_equal(loaded.tag_factors, model.tag_factors)
    np.testing.assert_array_equal(loaded.track_vectors, model.track_vectors)
    assert loaded.tag_index == model.tag_index and loaded.track_index == model.track_index
    assert read_model_shape(path) == (model.m, model.n, 5)
