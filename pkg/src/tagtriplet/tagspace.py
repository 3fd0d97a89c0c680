"""
tagtriplet Tag Space
Ingests multi-label tag assignments, enforces the cross-tag-set intersection and
builds the sparse binary tag x track incidence matrix.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Dict, FrozenSet, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from .artifacts import check_header, header_line, parse_header
from .config import TAG_SETS
from .errors import (
    DataError,
    EmptyCorpusError,
    EmptyMatrixError,
    ParameterError,
    ParseError,
    UnknownTrackError,
)

logger = logging.getLogger(__name__)

Tag = Tuple[str, str]  # (tag_set, tag)


@dataclass(frozen=True, order=True)
class TagAssignment:
    """One (track, tag_set, tag) annotation plus the track's artist and album"""
    track_id: str
    tag_set: str
    tag: str
    artist_id: str = field(default="", compare=False)
    album_id: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.track_id or not self.tag_set or not self.tag:
            raise DataError(f"empty identifier in assignment {self!r}")


@dataclass(frozen=True)
class TagCorpus:
    """
    Deduplicated assignments with deterministic indices. Tracks and tags are
    ordered lexicographically; tag identity is the (tag_set, tag) pair.
    """
    assignments: Tuple[TagAssignment, ...]
    tracks: Tuple[str, ...]
    tags: Tuple[Tag, ...]
    artist_of: Mapping[str, str]
    album_of: Mapping[str, str]
    _tags_of: Mapping[str, Mapping[str, FrozenSet[str]]] = field(repr=False, compare=False)

    @classmethod
    def from_assignments(cls, assignments: Iterable[TagAssignment]) -> "TagCorpus":
        unique: Dict[Tuple[str, str, str], TagAssignment] = {}
        artist_of: Dict[str, str] = {}
        album_of: Dict[str, str] = {}
        for a in assignments:
            if artist_of.setdefault(a.track_id, a.artist_id) != a.artist_id:
                raise DataError(f"track {a.track_id!r} has conflicting artist ids")
            if album_of.setdefault(a.track_id, a.album_id) != a.album_id:
                raise DataError(f"track {a.track_id!r} has conflicting album ids")
            unique.setdefault((a.track_id, a.tag_set, a.tag), a)
        if not unique:
            raise EmptyCorpusError("corpus has no tag assignments")

        ordered = tuple(sorted(unique.values()))
        grouped: Dict[str, Dict[str, set]] = defaultdict(lambda: defaultdict(set))
        for a in ordered:
            grouped[a.track_id][a.tag_set].add(a.tag)
        tags_of = {
            track: MappingProxyType({ts: frozenset(labels) for ts, labels in per_set.items()})
            for track, per_set in grouped.items()
        }
        tracks = tuple(sorted(grouped))
        return cls(
            assignments=ordered,
            tracks=tracks,
            tags=tuple(sorted({(a.tag_set, a.tag) for a in ordered})),
            artist_of=MappingProxyType({t: artist_of[t] for t in tracks}),
            album_of=MappingProxyType({t: album_of[t] for t in tracks}),
            _tags_of=MappingProxyType(tags_of),
        )

    @property
    def track_index(self) -> Dict[str, int]:
        return {t: i for i, t in enumerate(self.tracks)}

    @property
    def tag_index(self) -> Dict[Tag, int]:
        return {t: i for i, t in enumerate(self.tags)}

    def tags_of(self, track_id: str, tag_set: str) -> FrozenSet[str]:
        """Labels of one tag_set attached to a track (empty when none)"""
        if track_id not in self._tags_of:
            raise UnknownTrackError(track_id)
        return self._tags_of[track_id].get(tag_set, frozenset())

    def tag_sets(self) -> List[str]:
        return sorted({a.tag_set for a in self.assignments})

    def select_tracks(self, track_ids: Iterable[str]) -> "TagCorpus":
        keep = set(track_ids)
        return TagCorpus.from_assignments(a for a in self.assignments if a.track_id in keep)

    def __len__(self):
        return len(self.tracks)


@dataclass(frozen=True)
class TagTrackMatrix:
    """Sparse binary W: rows are tags, columns are tracks"""
    matrix: sparse.csr_matrix
    tags: Tuple[Tag, ...]
    tracks: Tuple[str, ...]

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def column(self, track_id: str) -> np.ndarray:
        try:
            j = self.tracks.index(track_id)
        except ValueError:
            raise UnknownTrackError(track_id)
        return np.asarray(self.matrix[:, j].toarray()).ravel()


@dataclass(frozen=True)
class TagSetStats:
    unique_tags: int
    tag_combinations: int
    labelled_albums: int
    labelled_tracks: int


def parse_tag_file(path: Union[str, Path]) -> TagCorpus:
    """
    Read a tab-separated tag file: `track_id, artist_id, album_id, tag_set, tag`.
    Lines starting with `#` are comments; a tagtriplet corpus header is
    version-checked.
    """
    path = Path(path)
    assignments: List[TagAssignment] = []
    with open(path, "rb") as f:
        for line_no, raw in enumerate(f, start=1):
            try:
                line = raw.decode("utf-8").rstrip("\r\n")
            except UnicodeDecodeError as e:
                raise ParseError(str(path), line_no, f"invalid UTF-8 at byte {e.start}")
            if line.startswith("#"):
                if parse_header(line) is not None:
                    check_header(line, "corpus", path)
                continue
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise ParseError(str(path), line_no, f"expected 5 tab-separated columns, got {len(cols)}")
            track_id, artist_id, album_id, tag_set, tag = cols
            if not track_id or not tag_set or not tag:
                raise ParseError(str(path), line_no, "track_id, tag_set and tag must be non-empty")
            assignments.append(TagAssignment(track_id, tag_set, tag, artist_id, album_id))
    if not assignments:
        raise EmptyCorpusError(f"{path}: no tag assignments")
    try:
        corpus = TagCorpus.from_assignments(assignments)
    except EmptyCorpusError:
        raise
    except DataError as e:
        raise DataError(f"{path}: {e}")
    logger.info(f"Parsed {path}: {len(corpus.tracks)} tracks, {len(corpus.tags)} tags, "
                f"{len(corpus.assignments)} assignments")
    return corpus


def write_corpus(corpus: TagCorpus, path: Union[str, Path]):
    """Serialize in the input TSV format; re-parsing yields an equal corpus"""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header_line("corpus"))
        for a in corpus.assignments:
            f.write(f"{a.track_id}\t{a.artist_id}\t{a.album_id}\t{a.tag_set}\t{a.tag}\n")


def intersect_tagsets(corpus: TagCorpus, required: Sequence[str]) -> TagCorpus:
    """Keep tracks having at least one tag in every required tag_set"""
    if not required:
        raise ParameterError("required", list(required), "a non-empty list of tag_set names")
    keep = [t for t in corpus.tracks if all(corpus.tags_of(t, ts) for ts in required)]
    if not keep:
        raise EmptyCorpusError(f"no track has tags in all of: {', '.join(required)}")
    if len(keep) < len(corpus.tracks):
        logger.info(f"Intersection over {', '.join(required)} kept {len(keep)} of {len(corpus.tracks)} tracks")
    return corpus.select_tracks(keep)


def restrict_tagsets(corpus: TagCorpus, tag_sets: Sequence[str]) -> TagCorpus:
    """Drop assignments outside `tag_sets`; tracks left without tags disappear"""
    wanted = set(tag_sets)
    kept = [a for a in corpus.assignments if a.tag_set in wanted]
    if not kept:
        raise EmptyMatrixError(f"no assignments for tag sets: {', '.join(tag_sets)}")
    return TagCorpus.from_assignments(kept)


def build_matrix(corpus: TagCorpus, tag_sets: Sequence[str]) -> TagTrackMatrix:
    """
    Binary W over the union of tags of the selected tag_sets. Several tag_sets
    join their tags before LSI.
    """
    if not tag_sets:
        raise ParameterError("tag_sets", list(tag_sets), "a non-empty list of tag_set names")
    restricted = restrict_tagsets(corpus, tag_sets)
    tag_idx = restricted.tag_index
    track_idx = restricted.track_index
    rows = np.fromiter((tag_idx[(a.tag_set, a.tag)] for a in restricted.assignments), dtype=np.int64)
    cols = np.fromiter((track_idx[a.track_id] for a in restricted.assignments), dtype=np.int64)
    data = np.ones(len(rows), dtype=np.float64)
    shape = (len(restricted.tags), len(restricted.tracks))
    matrix = sparse.coo_matrix((data, (rows, cols)), shape=shape).tocsr()
    logger.debug(f"Built {shape[0]}x{shape[1]} matrix with {matrix.nnz} entries")
    return TagTrackMatrix(matrix=matrix, tags=restricted.tags, tracks=restricted.tracks)


def corpus_stats(corpus: TagCorpus) -> Dict[str, TagSetStats]:
    """Per tag_set: unique tags, distinct per-track tag subsets, labelled albums and tracks"""
    stats = {}
    for ts in corpus.tag_sets():
        tracks = [t for t in corpus.tracks if corpus.tags_of(t, ts)]
        stats[ts] = TagSetStats(
            unique_tags=sum(1 for (s, _) in corpus.tags if s == ts),
            tag_combinations=len({corpus.tags_of(t, ts) for t in tracks}),
            labelled_albums=len({corpus.album_of[t] for t in tracks}),
            labelled_tracks=len(tracks),
        )
    return stats


STAT_ROWS = (
    ("Unique Tags", "unique_tags"),
    ("Tag Combinations", "tag_combinations"),
    ("Labelled Albums", "labelled_albums"),
    ("Labelled Tracks", "labelled_tracks"),
)


def _stat_columns(stats: Mapping[str, TagSetStats]) -> List[str]:
    known = [ts for ts in TAG_SETS if ts in stats]
    return known + sorted(ts for ts in stats if ts not in TAG_SETS)


def format_stats(stats: Mapping[str, TagSetStats], title: str = "") -> str:
    """Aligned plain-text table, one column per tag_set"""
    columns = _stat_columns(stats)
    label_w = max(len(label) for label, _ in STAT_ROWS)
    widths = [max(len(ts), *(len(str(getattr(stats[ts], attr))) for _, attr in STAT_ROWS)) for ts in columns]
    lines = []
    if title:
        lines.append(title)
    lines.append(" " * label_w + "".join(f"  {ts.capitalize():>{w}}" for ts, w in zip(columns, widths)))
    for label, attr in STAT_ROWS:
        cells = "".join(f"  {getattr(stats[ts], attr):>{w}}" for ts, w in zip(columns, widths))
        lines.append(f"{label:<{label_w}}{cells}")
    return "\n".join(lines) + "\n"


def stats_tsv(stages: Mapping[str, Mapping[str, TagSetStats]]) -> str:
    """One block of rows per stage (e.g. before / after intersection); missing cells are 0"""
    columns = _stat_columns({ts: None for stats in stages.values() for ts in stats})
    lines = [header_line("stats").rstrip("\n"), "\t".join(["stage", "statistic"] + columns)]
    for stage, stats in stages.items():
        for _, attr in STAT_ROWS:
            cells = [str(getattr(stats[ts], attr)) if ts in stats else "0" for ts in columns]
            lines.append("\t".join([stage, attr] + cells))
    return "\n".join(lines) + "\n"
