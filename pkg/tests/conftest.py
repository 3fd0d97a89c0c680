"""Shared fixtures: seeded generators, small corpora and tag-file writers"""

from pathlib import Path

import numpy as np
import pytest

from tagtriplet.synth import SynthSpec, generate
from tagtriplet.tagspace import TagAssignment, TagCorpus


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def write_tags(tmp_path):
    """Write tag-file lines (tuples are joined with tabs) and return the path"""
    def _write(rows, name="tags.tsv"):
        path = tmp_path / name
        lines = ["\t".join(r) if isinstance(r, tuple) else r for r in rows]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path
    return _write


@pytest.fixture
def tiny_corpus():
    """Four tracks over two artists and three albums"""
    rows = [
        ("t1", "genres", "rock", "a1", "al1"),
        ("t1", "moods", "calm", "a1", "al1"),
        ("t2", "genres", "rock", "a1", "al1"),
        ("t2", "genres", "pop", "a1", "al1"),
        ("t2", "moods", "happy", "a1", "al1"),
        ("t3", "genres", "jazz", "a2", "al2"),
        ("t3", "moods", "calm", "a2", "al2"),
        ("t4", "genres", "jazz", "a2", "al3"),
    ]
    return TagCorpus.from_assignments(TagAssignment(t, ts, tag, a, al) for t, ts, tag, a, al in rows)


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthSpec(n_clusters=4, tracks_per_cluster=30, feature_dim=8, seed=3))


@pytest.fixture
def out_dir(tmp_path) -> Path:
    path = tmp_path / "run"
    path.mkdir()
    return path
