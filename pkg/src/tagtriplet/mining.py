"""
tagtriplet Triplet Mining
Online triplet selection inside mini-batches: tag-relatedness from LSI vectors,
thresholded positive / negative candidates with the album filter, and one
(anchor, positive, negative) triple per anchor chosen from embedding distances.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .artifacts import fmt_float, header_line
from .errors import DataError, DimensionError, ParameterError

logger = logging.getLogger(__name__)

STRATEGIES = ("paper-literal", "batch-hard", "random")
UNIT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class MiniBatch:
    """Rows of all four fields refer to the same track"""
    track_ids: Tuple[str, ...]
    lsi_vectors: np.ndarray  # B x k, unit rows
    embeddings: np.ndarray   # B x d
    album_ids: Tuple[str, ...]

    def __post_init__(self):
        b = len(self.track_ids)
        if not (self.lsi_vectors.shape[0] == self.embeddings.shape[0] == len(self.album_ids) == b):
            raise DimensionError(
                f"mini-batch fields disagree in length: {b} ids, {self.lsi_vectors.shape[0]} lsi rows, "
                f"{self.embeddings.shape[0]} embeddings, {len(self.album_ids)} albums"
            )
        _check_unit_rows(self.lsi_vectors)

    @property
    def size(self) -> int:
        return len(self.track_ids)


@dataclass(frozen=True, eq=False)
class PairCandidates:
    similarity: np.ndarray     # B x B, zero diagonal
    positive_mask: np.ndarray  # B x B bool
    negative_mask: np.ndarray  # B x B bool


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class MaskStats:
    positive_rate: float
    negative_rate: float
    anchors_with_both: int
    anchors: int

    def as_dict(self):
        return {
            "positive_rate": self.positive_rate,
            "negative_rate": self.negative_rate,
            "anchors_with_both": float(self.anchors_with_both),
            "anchors": float(self.anchors),
        }


def _check_unit_rows(vectors: np.ndarray):
    norms = np.linalg.norm(vectors, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
    if bad.size:
        raise DataError(f"LSI rows must have unit norm; row {bad[0]} has norm {norms[bad[0]]:.12g}")


def pairwise_similarity(lsi_vectors: np.ndarray) -> np.ndarray:
    """Cosine similarity of unit rows, exactly symmetric, diagonal set to 0"""
    X = np.asarray(lsi_vectors, dtype=np.float64)
    _check_unit_rows(X)
    upper = np.triu(X @ X.T, k=1)
    return upper + upper.T


def select_pairs(batch: MiniBatch, theta_pos: float = 0.8, theta_neg: float = 0.2) -> PairCandidates:
    """Threshold similarities into candidate positives and negatives; positives skip same-album pairs"""
    if not theta_neg < theta_pos:
        raise ParameterError("theta_neg", theta_neg, f"< theta_pos = {theta_pos}")
    if batch.size < 3:
        raise DataError(f"mini-batch needs at least 3 tracks, got {batch.size}")
    sim = pairwise_similarity(batch.lsi_vectors)
    off_diagonal = ~np.eye(batch.size, dtype=bool)
    albums = np.asarray(batch.album_ids, dtype=object)
    same_album = albums[:, None] == albums[None, :]
    positive = (sim >= theta_pos) & off_diagonal & ~same_album
    negative = (sim < theta_neg) & off_diagonal
    return PairCandidates(similarity=sim, positive_mask=positive, negative_mask=negative)


def mask_stats(pairs: PairCandidates) -> MaskStats:
    b = pairs.similarity.shape[0]
    total = max(b * (b - 1), 1)
    both = np.any(pairs.positive_mask, axis=1) & np.any(pairs.negative_mask, axis=1)
    return MaskStats(
        positive_rate=float(pairs.positive_mask.sum()) / total,
        negative_rate=float(pairs.negative_mask.sum()) / total,
        anchors_with_both=int(both.sum()),
        anchors=b,
    )


def squared_distances(embeddings: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, computed row by row from differences"""
    E = np.asarray(embeddings, dtype=np.float64)
    out = np.empty((E.shape[0], E.shape[0]))
    for i in range(E.shape[0]):
        diff = E - E[i]
        out[i] = np.einsum("ij,ij->i", diff, diff)
    return out


def select_triplets(
    batch: MiniBatch,
    pairs: PairCandidates,
    strategy: str = "paper-literal",
    seed: Optional[int] = None,
    distances: Optional[np.ndarray] = None,
) -> List[Triplet]:
    """
    At most one triplet per anchor, in anchor order.

    paper-literal: nearest positive, farthest negative.
    batch-hard: farthest positive, nearest negative.
    random: uniform picks from each candidate set, seeded.
    Ties go to the lowest batch index; anchors missing either candidate set are skipped.
    """
    if strategy not in STRATEGIES:
        raise ParameterError("strategy", strategy, " | ".join(STRATEGIES))
    if pairs.similarity.shape[0] != batch.size:
        raise DimensionError("pair candidates were computed on a different batch")
    d2 = squared_distances(batch.embeddings) if distances is None else distances
    rng = np.random.default_rng(seed) if strategy == "random" else None

    triplets = []
    for a in range(batch.size):
        pos = np.flatnonzero(pairs.positive_mask[a])
        neg = np.flatnonzero(pairs.negative_mask[a])
        if pos.size == 0 or neg.size == 0:
            continue
        if strategy == "paper-literal":
            p = pos[np.argmin(d2[a, pos])]
            n = neg[np.argmax(d2[a, neg])]
        elif strategy == "batch-hard":
            p = pos[np.argmax(d2[a, pos])]
            n = neg[np.argmin(d2[a, neg])]
        else:
            p = pos[rng.integers(pos.size)]
            n = neg[rng.integers(neg.size)]
        triplets.append(Triplet(a, int(p), int(n)))
    return triplets


def seeded_permutation(n: int, seed: int, epoch: int = 0) -> np.ndarray:
    """Fisher-Yates shuffle driven by a generator seeded with (seed, epoch)"""
    rng = np.random.default_rng([seed, epoch])
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def make_batches(track_ids: Sequence[str], batch_size: int, seed: int, epoch: int = 0) -> List[np.ndarray]:
    """
    Seeded permutation cut into consecutive batches of positions into
    `track_ids`. A final short batch survives only with at least 3 tracks.
    """
    if batch_size < 3:
        raise ParameterError("batch_size", batch_size, ">= 3")
    n = len(track_ids)
    if n < 3:
        raise DataError(f"need at least 3 tracks to form a batch, got {n}")
    perm = seeded_permutation(n, seed, epoch)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches[-1]) < 3:
        logger.debug(f"Dropping final batch of {len(batches[-1])} tracks")
        batches.pop()
    return batches


TRIPLET_COLUMNS = ("epoch", "batch", "anchor_id", "positive_id", "negative_id",
                   "sim_ap", "sim_an", "d2_ap", "d2_an")


def write_triplet_dump_header(handle: TextIO):
    handle.write(header_line("triplets"))
    handle.write("\t".join(TRIPLET_COLUMNS) + "\n")


def write_triplet_dump(
    handle: TextIO,
    epoch: int,
    batch_no: int,
    batch: MiniBatch,
    pairs: PairCandidates,
    triplets: Sequence[Triplet],
    distances: np.ndarray,
):
    for t in triplets:
        handle.write("\t".join([
            str(epoch), str(batch_no),
            batch.track_ids[t.anchor], batch.track_ids[t.positive], batch.track_ids[t.negative],
            fmt_float(pairs.similarity[t.anchor, t.positive]),
            fmt_float(pairs.similarity[t.anchor, t.negative]),
            fmt_float(distances[t.anchor, t.positive]),
            fmt_float(distances[t.anchor, t.negative]),
        ]) + "\n")
