"""
tagtriplet Pipeline
Glue between the stages: loads a working set (corpus, split, feature manifest),
derives relatedness vectors, trains on the train split and evaluates one
(tag_set combination, topic count) cell.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .audiofeat import load_feature_matrix, read_feature_manifest
from .config import LsiConfig, PipelineConfig
from .errors import DataError
from .evaluation import (
    EmbeddingTable,
    ReportRow,
    SplitSpec,
    SweepCell,
    evaluate,
    read_split,
)
from .lsi import LsiModel, fit_lsi, normalized_track_matrix, overlap_vectors
from .tagspace import TagCorpus, build_matrix, parse_tag_file
from .trainer import EncoderModel, HeldOut, TrainResult, embed, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Workspace:
    """Corpus, split and feature manifest of one run; feature rows are loaded lazily"""
    corpus: TagCorpus
    split: SplitSpec
    manifest: Dict[str, Path]
    _features: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def ids(self, part: str) -> List[str]:
        known = set(self.corpus.tracks)
        return sorted(t for t in self.split.part(part) if t in known)

    def features(self, track_ids: Sequence[str]) -> np.ndarray:
        if not track_ids:
            raise DataError("no tracks to load features for")
        missing = [t for t in track_ids if t not in self._features]
        if missing:
            rows = load_feature_matrix(self.manifest, missing)
            self._features.update(zip(missing, rows))
        return np.vstack([self._features[t] for t in track_ids])


def relatedness_vectors(
    corpus: TagCorpus,
    tag_sets: Sequence[str],
    track_ids: Sequence[str],
    k: int,
    lsi_config: LsiConfig,
    mode: str = "lsi",
) -> Tuple[List[str], np.ndarray, Optional[LsiModel]]:
    """
    Unit relatedness rows for the tracks of `track_ids` that have tags in
    `tag_sets`. Returns (kept ids, rows, model); model is None in overlap mode.
    """
    W = build_matrix(corpus, tag_sets)
    present = set(W.tracks)
    kept = [t for t in track_ids if t in present]
    if len(kept) < len(track_ids):
        logger.info(f"{len(track_ids) - len(kept)} tracks have no {'+'.join(tag_sets)} tags and are skipped")
    if mode == "overlap":
        return kept, overlap_vectors(W, kept), None
    model = fit_lsi(W, k, tol=lsi_config.tol, max_iter=lsi_config.max_iter, dense_limit=lsi_config.dense_limit)
    return kept, normalized_track_matrix(model, kept), model


def train_on_split(
    ws: Workspace,
    track_ids: Sequence[str],
    relatedness: np.ndarray,
    config: PipelineConfig,
    triplet_dump: Optional[TextIO] = None,
    validation: Optional[Tuple[Sequence[str], np.ndarray]] = None,
) -> TrainResult:
    """`validation` is (track ids, relatedness rows) of held-out tracks monitored every epoch"""
    if not track_ids:
        raise DataError("no training tracks with relatedness vectors")
    features = ws.features(track_ids)
    albums = [ws.corpus.album_of[t] for t in track_ids]
    held_out = None
    if validation is not None and len(validation[0]) > 0:
        val_ids, val_rel = validation
        held_out = HeldOut(
            track_ids=tuple(val_ids),
            features=ws.features(val_ids),
            relatedness=val_rel,
            album_ids=tuple(ws.corpus.album_of[t] for t in val_ids),
        )
    return train(track_ids, features, relatedness, albums, config.trainer, config.mining, triplet_dump,
                 validation=held_out)


def embed_tracks(model: EncoderModel, ws: Workspace, track_ids: Sequence[str]) -> EmbeddingTable:
    if not track_ids:
        raise DataError("no tracks to embed (empty split)")
    return EmbeddingTable.from_rows(list(track_ids), embed(model, ws.features(track_ids)))


def split_rows(
    kept: Sequence[str], rows: np.ndarray, first: Sequence[str]
) -> Tuple[Tuple[List[str], np.ndarray], Tuple[List[str], np.ndarray]]:
    """Partition aligned (ids, rows) into the ids in `first` and the rest, keeping order"""
    wanted = set(first)
    mask = np.array([t in wanted for t in kept], dtype=bool)
    ids = np.array(list(kept), dtype=object)
    return (list(ids[mask]), rows[mask]), (list(ids[~mask]), rows[~mask])


def run_cell(ws: Workspace, config: PipelineConfig, cell: SweepCell) -> ReportRow:
    """fit_lsi -> train (validation monitored) -> embed test split -> evaluate, for one sweep cell"""
    train_ids = ws.ids("train")
    kept, rows, _ = relatedness_vectors(
        ws.corpus, cell.tag_sets, train_ids + ws.ids("validation"), cell.lsi_topics, config.lsi,
        config.mining.relatedness,
    )
    (train_kept, rel), validation = split_rows(kept, rows, train_ids)
    result = train_on_split(ws, train_kept, rel, config, validation=validation)
    test_ids = ws.ids("test")
    table = embed_tracks(result.model, ws, test_ids)
    return evaluate(table, ws.corpus, test_ids, k=config.eval.k, tasks=config.eval.task_list,
                    metric=config.eval.metric, tag_set_label=cell.label, lsi_topics=cell.lsi_topics)


# --- sweep workers ---

@dataclass(frozen=True)
class SweepContext:
    """Everything a worker process needs to rebuild the workspace; plain strings only"""
    config_flat: Tuple[Tuple[str, str], ...]
    corpus_file: str
    features_manifest: str
    split_file: str


_WORKSPACES: Dict[SweepContext, Tuple[Workspace, PipelineConfig]] = {}


def _context_workspace(ctx: SweepContext) -> Tuple[Workspace, PipelineConfig]:
    if ctx not in _WORKSPACES:
        config = PipelineConfig.from_flat(dict(ctx.config_flat))
        ws = Workspace(
            corpus=parse_tag_file(ctx.corpus_file),
            split=read_split(ctx.split_file),
            manifest=read_feature_manifest(ctx.features_manifest),
        )
        _WORKSPACES[ctx] = (ws, config)
    return _WORKSPACES[ctx]


def run_sweep_cell(ctx: SweepContext, cell: SweepCell) -> ReportRow:
    """Process-pool entry point; any error comes back as a failed row"""
    try:
        ws, config = _context_workspace(ctx)
        return run_cell(ws, config, cell)
    except Exception as e:
        k = int(dict(ctx.config_flat).get("eval.k", 100))
        return ReportRow(cell.label, cell.lsi_topics, k=k, status=f"{type(e).__name__}: {e}")
