"""
tagtriplet Synthetic Corpora
Seeded generator of tag corpora and feature vectors with planted cluster
structure, written in the same file formats as real inputs.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .audiofeat import feature_filename, write_feature_manifest, write_features
from .config import TAG_SETS, SynthConfig
from .errors import ParameterError
from .tagspace import TagAssignment, TagCorpus, write_corpus

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthSpec:
    n_clusters: int = 4
    tracks_per_cluster: int = 100
    feature_dim: int = 32
    noise_sigma: float = 0.1
    tags_per_cluster: int = 5
    artists_per_cluster: int = 50
    tracks_per_album: int = 2
    overlap: float = 0.2
    extra_tag_prob: float = 0.25
    seed: int = 7
    tag_sets: Tuple[str, ...] = TAG_SETS

    def __post_init__(self):
        for name in ("n_clusters", "tracks_per_cluster", "feature_dim", "tags_per_cluster",
                     "artists_per_cluster", "tracks_per_album"):
            if getattr(self, name) < 1:
                raise ParameterError(name, getattr(self, name), ">= 1")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma", self.noise_sigma, ">= 0")
        if not 0.0 <= self.overlap <= 1.0:
            raise ParameterError("overlap", self.overlap, "0 <= overlap <= 1")
        if not 0.0 <= self.extra_tag_prob <= 1.0:
            raise ParameterError("extra_tag_prob", self.extra_tag_prob, "0 <= p <= 1")

    @classmethod
    def from_config(cls, cfg: SynthConfig) -> "SynthSpec":
        return cls(cfg.n_clusters, cfg.tracks_per_cluster, cfg.feature_dim, cfg.noise_sigma,
                   cfg.tags_per_cluster, cfg.artists_per_cluster, cfg.tracks_per_album,
                   cfg.overlap, cfg.extra_tag_prob, cfg.seed)


@dataclass(frozen=True, eq=False)
class SynthData:
    corpus: TagCorpus
    track_ids: Tuple[str, ...]
    features: np.ndarray         # rows aligned with track_ids
    cluster_of: Dict[str, int]

    def feature_map(self) -> Dict[str, np.ndarray]:
        return {t: self.features[i] for i, t in enumerate(self.track_ids)}


def _tag_pools(spec: SynthSpec) -> Dict[str, List[List[str]]]:
    """Per tag_set and cluster: [anchor, own extras..., borrowed extras...]"""
    pools = {}
    borrowed = int(round(spec.overlap * (spec.tags_per_cluster - 1)))
    for ts in spec.tag_sets:
        own = [[f"{ts}-c{c:02d}-{j:02d}" for j in range(spec.tags_per_cluster)]
               for c in range(spec.n_clusters)]
        per_cluster = []
        for c in range(spec.n_clusters):
            pool = list(own[c])
            if spec.n_clusters > 1 and borrowed:
                neighbour = own[(c + 1) % spec.n_clusters]
                pool.extend(neighbour[1:1 + borrowed])
            per_cluster.append(pool)
        pools[ts] = per_cluster
    return pools


def generate(spec: SynthSpec) -> SynthData:
    """
    Each cluster gets a random unit mean; track features are mean + N(0, sigma)
    noise. Every track carries its cluster's anchor tag in each tag_set plus
    extras drawn from the cluster pool. Albums nest in artists, artists in clusters.
    """
    rng = np.random.default_rng(spec.seed)
    means = rng.normal(size=(spec.n_clusters, spec.feature_dim))
    means /= np.linalg.norm(means, axis=1)[:, None]
    pools = _tag_pools(spec)

    assignments: List[TagAssignment] = []
    track_ids: List[str] = []
    rows: List[np.ndarray] = []
    cluster_of: Dict[str, int] = {}
    for c in range(spec.n_clusters):
        for i in range(spec.tracks_per_cluster):
            track = f"c{c:02d}-t{i:05d}"
            album_no = i // spec.tracks_per_album
            album = f"c{c:02d}-al{album_no:04d}"
            artist = f"c{c:02d}-ar{album_no % spec.artists_per_cluster:03d}"
            for ts in spec.tag_sets:
                pool = pools[ts][c]
                chosen = [pool[0]]
                extras = rng.random(len(pool) - 1) < spec.extra_tag_prob
                chosen.extend(tag for tag, keep in zip(pool[1:], extras) if keep)
                assignments.extend(TagAssignment(track, ts, tag, artist, album) for tag in chosen)
            noise = rng.normal(0.0, spec.noise_sigma, spec.feature_dim) if spec.noise_sigma > 0 else 0.0
            rows.append(means[c] + noise)
            track_ids.append(track)
            cluster_of[track] = c

    corpus = TagCorpus.from_assignments(assignments)
    logger.info(f"Generated synthetic corpus: {spec.n_clusters} clusters x {spec.tracks_per_cluster} tracks, "
                f"{len(corpus.tags)} tags, seed={spec.seed}")
    return SynthData(corpus, tuple(track_ids), np.vstack(rows), cluster_of)


def write_synth(
    data: SynthData,
    out_dir: Union[str, Path],
    tags_file: str = "tags.tsv",
    manifest_file: str = "features.tsv",
    feature_dir: str = "features",
    seed: int = 0,
) -> List[Path]:
    """Write the tags TSV, one feature file per track and the feature manifest"""
    out = Path(out_dir)
    (out / feature_dir).mkdir(parents=True, exist_ok=True)
    written = []
    tags_path = out / tags_file
    write_corpus(data.corpus, tags_path)
    written.append(tags_path)
    entries = []
    for track, values in zip(data.track_ids, data.features):
        rel = f"{feature_dir}/{feature_filename(track)}"
        write_features(out / rel, track, values, "synthetic", {"source": "synth", "seed": seed})
        written.append(out / rel)
        entries.append((track, rel))
    manifest_path = out / manifest_file
    write_feature_manifest(manifest_path, entries)
    written.append(manifest_path)
    return written
