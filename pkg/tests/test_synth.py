import numpy as np
import pytest

from tagtriplet.audiofeat import load_feature_matrix, read_feature_manifest
from tagtriplet.config import SynthConfig
from tagtriplet.errors import ParameterError
from tagtriplet.evaluation import stratified_split
from tagtriplet.lsi import fit_lsi, normalized_track_matrix
from tagtriplet.synth import SynthSpec, generate, write_synth
from tagtriplet.tagspace import build_matrix, parse_tag_file


def test_zero_noise_gives_identical_features_per_cluster():
    data = generate(SynthSpec(n_clusters=3, tracks_per_cluster=10, feature_dim=6, noise_sigma=0.0, seed=1))
    for c in range(3):
        rows = data.features[[i for i, t in enumerate(data.track_ids) if data.cluster_of[t] == c]]
        assert np.all(rows == rows[0])


def test_disjoint_pools_separate_in_two_topics():
    data = generate(SynthSpec(n_clusters=2, tracks_per_cluster=20, tags_per_cluster=3, overlap=0.0,
                              tag_sets=("genres",), seed=2))
    model = fit_lsi(build_matrix(data.corpus, ["genres"]), 2)
    ids = list(data.track_ids)
    V = normalized_track_matrix(model, ids)
    same = np.array([[data.cluster_of[a] == data.cluster_of[b] for b in ids] for a in ids])
    cos = V @ V.T
    np.testing.assert_allclose(cos[same], 1.0, atol=1e-6)
    np.testing.assert_allclose(cos[~same], 0.0, atol=1e-6)


def test_same_seed_same_corpus():
    spec = SynthSpec(n_clusters=2, tracks_per_cluster=15, seed=11)
    a, b = generate(spec), generate(spec)
    assert a.corpus.assignments == b.corpus.assignments
    np.testing.assert_array_equal(a.features, b.features)
    other = generate(SynthSpec(n_clusters=2, tracks_per_cluster=15, seed=12))
    assert not np.array_equal(a.features, other.features)


def test_every_track_carries_its_anchor_and_albums_nest_in_artists(small_synth):
    corpus = small_synth.corpus
    artist_of_album = {}
    for t in corpus.tracks:
        c = small_synth.cluster_of[t]
        for ts in ("genres", "styles", "moods", "themes"):
            assert f"{ts}-c{c:02d}-00" in corpus.tags_of(t, ts)
        assert artist_of_album.setdefault(corpus.album_of[t], corpus.artist_of[t]) == corpus.artist_of[t]
        assert corpus.artist_of[t].startswith(f"c{c:02d}-")


def test_overlap_borrows_from_the_neighbouring_cluster():
    data = generate(SynthSpec(n_clusters=3, tracks_per_cluster=4, tags_per_cluster=6, overlap=0.2,
                              extra_tag_prob=1.0, tag_sets=("genres",)))
    tags = data.corpus.tags_of("c00-t00000", "genres")
    assert tags == {f"genres-c00-{j:02d}" for j in range(6)} | {"genres-c01-01"}
    assert "genres-c00-01" in data.corpus.tags_of("c02-t00000", "genres")


def test_spec_validation():
    with pytest.raises(ParameterError, match="n_clusters"):
        SynthSpec(n_clusters=0)
    with pytest.raises(ParameterError, match="overlap"):
        SynthSpec(overlap=1.5)
    spec = SynthSpec.from_config(SynthConfig(tracks_per_cluster=50))
    assert spec.tracks_per_cluster == 50 and spec.seed == 7


def test_written_files_read_back(tmp_path):
    data = generate(SynthSpec(n_clusters=2, tracks_per_cluster=6, feature_dim=5, seed=4))
    written = write_synth(data, tmp_path, seed=4)
    assert len(written) == 2 + len(data.track_ids)
    corpus = parse_tag_file(tmp_path / "tags.tsv")
    assert corpus.assignments == data.corpus.assignments
    assert dict(corpus.album_of) == dict(data.corpus.album_of)
    manifest = read_feature_manifest(tmp_path / "features.tsv")
    X = load_feature_matrix(manifest, list(data.track_ids))
    np.testing.assert_array_equal(X, data.features)


def test_default_layout_spreads_small_artists_over_every_cluster():
    corpus = generate(SynthSpec()).corpus
    artists = set(corpus.artist_of.values())
    assert len(artists) == 200
    assert all(sum(1 for t in corpus.tracks if corpus.artist_of[t] == a) == 2 for a in artists)

    split = stratified_split(corpus)
    test_clusters = {t[:3] for t in split.test}
    assert test_clusters == {"c00", "c01", "c02", "c03"}
    assert len({corpus.artist_of[t] for t in split.test}) >= 15

    wide = stratified_split(corpus, (0.6, 0.1, 0.3), seed=42)
    per_cluster = {c: sum(1 for t in wide.test if t.startswith(c)) for c in test_clusters}
    assert min(per_cluster.values()) >= 10
