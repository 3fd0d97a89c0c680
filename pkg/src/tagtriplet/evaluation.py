"""
tagtriplet Evaluation
Artist-stratified splits, k-nearest-neighbour retrieval in embedding space and
per-task precision@k reports.
"""

import itertools
import logging
import math
import multiprocessing as mp
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .artifacts import check_header, fmt_row, header_line, parse_floats
from .config import DEFAULT_FRACTIONS, TAG_SETS, TASKS
from .errors import DataError, FormatVersionError, ParameterError, UnknownTrackError
from .tagspace import TagCorpus

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "validation", "test")
REPORT_COLUMNS = ("tag_set", "lsi_topics") + tuple(f"prec_{t}" for t in TASKS)

PathLike = Union[str, Path]


# --- splits ---

@dataclass(frozen=True)
class SplitSpec:
    train: FrozenSet[str]
    validation: FrozenSet[str]
    test: FrozenSet[str]
    seed: int
    fractions: Tuple[float, float, float]

    def part(self, name: str) -> FrozenSet[str]:
        return getattr(self, name)

    def split_of(self, track_id: str) -> str:
        for name in SPLIT_NAMES:
            if track_id in self.part(name):
                return name
        raise UnknownTrackError(track_id)


def stratified_split(
    corpus: TagCorpus,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 42,
) -> SplitSpec:
    """
    Shuffle artists with the seed, then give each artist's tracks to the split
    that is most underfilled relative to its target track count.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise ParameterError("fractions", fr, "three positive numbers summing to 1")
    by_artist: Dict[str, List[str]] = {}
    for t in corpus.tracks:
        by_artist.setdefault(corpus.artist_of[t], []).append(t)
    artists = sorted(by_artist)
    if len(artists) < len(SPLIT_NAMES):
        raise DataError(f"need at least {len(SPLIT_NAMES)} artists to split, got {len(artists)}")

    order = np.random.default_rng(seed).permutation(len(artists))
    targets = [f * len(corpus.tracks) for f in fr]
    counts = [0, 0, 0]
    parts: List[List[str]] = [[], [], []]
    for i in order:
        artist = artists[i]
        s = min(range(3), key=lambda j: (counts[j] / targets[j], j))
        parts[s].extend(by_artist[artist])
        counts[s] += len(by_artist[artist])
    logger.info(f"Artist-stratified split: train={counts[0]}, validation={counts[1]}, test={counts[2]}")
    return SplitSpec(frozenset(parts[0]), frozenset(parts[1]), frozenset(parts[2]), seed, fr)


def write_split(split: SplitSpec, path: PathLike):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header_line("split"))
        f.write(f"# seed={split.seed} fractions={','.join(repr(x) for x in split.fractions)}\n")
        rows = [(t, name) for name in SPLIT_NAMES for t in split.part(name)]
        for t, name in sorted(rows):
            f.write(f"{t}\t{name}\n")


def read_split(path: PathLike) -> SplitSpec:
    with open(path, "r", encoding="utf-8") as f:
        lines = [l.rstrip("\r\n") for l in f]
    check_header(lines[0], "split", path)
    seed, fractions = 0, (0.0, 0.0, 0.0)
    parts = {name: set() for name in SPLIT_NAMES}
    for line in lines[1:]:
        if line.startswith("# seed="):
            meta = dict(item.split("=", 1) for item in line[2:].split())
            seed = int(meta["seed"])
            fractions = tuple(float(x) for x in meta["fractions"].split(","))
            continue
        if not line or line.startswith("#"):
            continue
        track, _, name = line.partition("\t")
        if name not in parts:
            raise FormatVersionError(f"{path}: unknown split name {name!r}")
        parts[name].add(track)
    return SplitSpec(frozenset(parts["train"]), frozenset(parts["validation"]),
                     frozenset(parts["test"]), seed, fractions)


# --- embeddings ---

@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Embeddings keyed by track, rows in track-id order"""
    track_ids: Tuple[str, ...]
    vectors: np.ndarray

    @classmethod
    def from_mapping(cls, embeddings: Mapping[str, np.ndarray]) -> "EmbeddingTable":
        ids = tuple(sorted(embeddings))
        return cls(ids, np.vstack([np.asarray(embeddings[t], dtype=np.float64) for t in ids]))

    @classmethod
    def from_rows(cls, track_ids: Sequence[str], vectors: np.ndarray) -> "EmbeddingTable":
        order = sorted(range(len(track_ids)), key=lambda i: track_ids[i])
        return cls(tuple(track_ids[i] for i in order), np.asarray(vectors, dtype=np.float64)[order])

    def subset(self, track_ids) -> "EmbeddingTable":
        wanted = set(track_ids)
        missing = wanted - set(self.track_ids)
        if missing:
            raise UnknownTrackError(sorted(missing)[0])
        keep = [i for i, t in enumerate(self.track_ids) if t in wanted]
        return EmbeddingTable(tuple(self.track_ids[i] for i in keep), self.vectors[keep])

    def scaled(self, factor: float) -> "EmbeddingTable":
        return EmbeddingTable(self.track_ids, self.vectors * factor)

    def position(self, track_id: str) -> int:
        positions = self.__dict__.get("_positions")
        if positions is None:
            positions = {t: i for i, t in enumerate(self.track_ids)}
            object.__setattr__(self, "_positions", positions)
        if track_id not in positions:
            raise UnknownTrackError(track_id)
        return positions[track_id]


def write_embeddings(table: EmbeddingTable, path: PathLike):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header_line("embeddings"))
        for t, row in zip(table.track_ids, table.vectors):
            f.write(f"{t}\t{fmt_row(row)}\n")


def read_embeddings(path: PathLike) -> EmbeddingTable:
    with open(path, "r", encoding="utf-8") as f:
        lines = [l.rstrip("\r\n") for l in f]
    check_header(lines[0], "embeddings", path)
    ids, rows = [], []
    for line in lines[1:]:
        if not line:
            continue
        t, _, rest = line.partition("\t")
        ids.append(t)
        rows.append(parse_floats(rest))
    return EmbeddingTable.from_rows(ids, np.vstack(rows))


# --- retrieval ---

def _distances(table: EmbeddingTable, q: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        return np.sum((table.vectors - q) ** 2, axis=1)
    if metric == "cosine":
        norms = np.linalg.norm(table.vectors, axis=1) * np.linalg.norm(q)
        with np.errstate(invalid="ignore", divide="ignore"):
            sims = (table.vectors @ q) / norms
        return 1.0 - np.nan_to_num(sims, nan=0.0)
    raise ParameterError("metric", metric, "euclidean | cosine")


def knn_retrieve(table: EmbeddingTable, query: str, k: int, metric: str = "euclidean") -> List[str]:
    """The k nearest tracks other than the query; ties go to the smaller track id"""
    if k < 1:
        raise ParameterError("k", k, ">= 1")
    qi = table.position(query)
    if len(table.track_ids) <= k:
        raise DataError(f"retrieval pool of {len(table.track_ids)} tracks is too small for k={k}")
    dist = _distances(table, table.vectors[qi], metric)
    # track_ids are sorted, so position order is id order
    order = np.lexsort((np.arange(len(dist)), dist))
    return [table.track_ids[i] for i in order if i != qi][:k]


def _normalize_task(task: str) -> str:
    return "artists" if task == "artist" else task


def is_relevant(corpus: TagCorpus, query: str, candidate: str, task: str) -> bool:
    task = _normalize_task(task)
    if task == "artists":
        return corpus.artist_of[candidate] == corpus.artist_of[query]
    if task == "album":
        return corpus.album_of[candidate] == corpus.album_of[query]
    return bool(corpus.tags_of(query, task) & corpus.tags_of(candidate, task))


def precision_at_k(retrieved: Sequence[str], query: str, relevance: str, corpus: TagCorpus) -> Optional[float]:
    """
    Fraction of `retrieved` relevant to the query. Returns None when the query
    has no tags in the task's tag_set (the query is excluded from averages).
    """
    if not retrieved:
        raise ParameterError("retrieved", list(retrieved), "a non-empty list")
    task = _normalize_task(relevance)
    if task not in TASKS:
        raise ParameterError("relevance", relevance, " | ".join(TASKS))
    if task in TAG_SETS and not corpus.tags_of(query, task):
        return None
    hits = sum(1 for r in retrieved if is_relevant(corpus, query, r, task))
    return hits / len(retrieved)


@dataclass
class ReportRow:
    tag_set: str
    lsi_topics: int
    precisions: Dict[str, float] = field(default_factory=dict)
    query_counts: Dict[str, int] = field(default_factory=dict)
    excluded: Dict[str, int] = field(default_factory=dict)
    k: int = 100
    status: str = "ok"

    def precision(self, task: str) -> float:
        return self.precisions.get(task, float("nan"))


@dataclass
class EvaluationReport:
    rows: List[ReportRow] = field(default_factory=list)
    k: int = 100

    @property
    def failures(self) -> List[ReportRow]:
        return [r for r in self.rows if r.status != "ok"]


def evaluate(
    table: EmbeddingTable,
    corpus: TagCorpus,
    test_ids,
    k: int = 100,
    tasks: Sequence[str] = TASKS,
    metric: str = "euclidean",
    tag_set_label: str = "",
    lsi_topics: int = 0,
) -> ReportRow:
    """Mean precision@k over all valid test queries per task; the pool is the test split"""
    test = sorted(set(test_ids))
    if not test:
        raise DataError("test split is empty")
    pool = table.subset(test)
    tasks = [_normalize_task(t) for t in tasks]
    sums = {t: 0.0 for t in tasks}
    counts = {t: 0 for t in tasks}
    excluded = {t: 0 for t in tasks}
    for query in test:
        retrieved = knn_retrieve(pool, query, k, metric)
        for task in tasks:
            p = precision_at_k(retrieved, query, task, corpus)
            if p is None:
                excluded[task] += 1
            else:
                sums[task] += p
                counts[task] += 1
    precisions = {t: (sums[t] / counts[t] if counts[t] else float("nan")) for t in tasks}
    for t in tasks:
        if excluded[t]:
            logger.warning(f"{excluded[t]} queries excluded from task {t}: no tags in that tag set")
    return ReportRow(tag_set_label, lsi_topics, precisions, counts, excluded, k)


def best_rows(report: EvaluationReport) -> List[ReportRow]:
    """Per combination, the row with the highest mean precision over the combination's own tag tasks"""
    best: Dict[str, ReportRow] = {}

    def score(row: ReportRow) -> float:
        own = [t for t in row.tag_set.split("+") if t in row.precisions]
        vals = [row.precisions[t] for t in own if not math.isnan(row.precisions[t])]
        return float(np.mean(vals)) if vals else float("-inf")

    for row in report.rows:
        if row.status != "ok":
            continue
        current = best.get(row.tag_set)
        if current is None or score(row) > score(current):
            best[row.tag_set] = row
    return [best[label] for label in sorted(best, key=lambda s: (s.count("+"), s))]


# --- report formatting ---

def _cells(row: ReportRow) -> List[str]:
    cells = [row.tag_set, str(row.lsi_topics)]
    for task in TASKS:
        value = row.precision(task)
        cells.append("nan" if math.isnan(value) else f"{value:.6f}")
    return cells


def report_tsv(report: EvaluationReport) -> str:
    lines = [header_line("report").rstrip("\n"), "\t".join(REPORT_COLUMNS)]
    lines.extend("\t".join(_cells(row)) for row in report.rows)
    for row in report.failures:
        lines.append(f"# failed\t{row.tag_set}\t{row.lsi_topics}\t{row.status}")
    return "\n".join(lines) + "\n"


def format_report(report: EvaluationReport) -> str:
    """Aligned plain-text table with the report columns"""
    table = [list(REPORT_COLUMNS)] + [_cells(row) for row in report.rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(REPORT_COLUMNS))]
    lines = []
    for n, r in enumerate(table):
        first = f"{r[0]:<{widths[0]}}"
        rest = "  ".join(f"{c:>{w}}" for c, w in zip(r[1:], widths[1:]))
        lines.append(f"{first}  {rest}")
        if n == 0:
            lines.append("-" * len(lines[0]))
    lines.append(f"(precision at cut-off {report.k})")
    for row in report.failures:
        lines.append(f"failed: {row.tag_set} / {row.lsi_topics}: {row.status}")
    return "\n".join(lines) + "\n"


# --- sweep ---

@dataclass(frozen=True)
class SweepCell:
    tag_sets: Tuple[str, ...]
    lsi_topics: int

    @property
    def label(self) -> str:
        return "+".join(self.tag_sets)


def tag_set_combinations(tag_sets: Sequence[str] = TAG_SETS) -> List[Tuple[str, ...]]:
    """Every non-empty combination, singles first, each in the given tag_set order"""
    combos = []
    for size in range(1, len(tag_sets) + 1):
        combos.extend(itertools.combinations(tag_sets, size))
    return combos


def parse_combos(text: str, tag_sets: Sequence[str] = TAG_SETS) -> List[Tuple[str, ...]]:
    """`all` or comma separated labels such as `genres,genres+moods`"""
    if text.strip() == "all":
        return tag_set_combinations(tag_sets)
    combos = []
    for label in (item.strip() for item in text.split(",")):
        if not label:
            continue
        parts = label.split("+")
        unknown = [p for p in parts if p not in tag_sets]
        if unknown or len(set(parts)) != len(parts):
            raise ParameterError("combos", label, f"'+'-joined distinct names from {', '.join(tag_sets)}")
        combos.append(tuple(ts for ts in tag_sets if ts in parts))
    if not combos:
        raise ParameterError("combos", text, "`all` or at least one combination")
    return combos


def sweep_cells(combos: Sequence[Tuple[str, ...]], grid: Sequence[int]) -> List[SweepCell]:
    return [SweepCell(tuple(combo), int(k)) for combo in combos for k in grid]


def sweep(
    cells: Sequence[SweepCell],
    run_cell: Callable[[SweepCell], ReportRow],
    k: int = 100,
    cache=None,
    cache_key: Optional[Callable[[SweepCell], str]] = None,
    workers: int = 1,
) -> EvaluationReport:
    """
    One report row per cell, in cell order. Rows found in `cache` are reused;
    the rest run through `run_cell`, in a process pool when workers > 1
    (`run_cell` must then be picklable). A failing cell becomes a failed row.
    """
    rows: List[Optional[ReportRow]] = [None] * len(cells)
    todo = []
    for i, cell in enumerate(cells):
        cached = cache.get(cache_key(cell)) if cache is not None else None
        if cached is not None:
            rows[i] = cached
        else:
            todo.append(i)
    logger.info(f"Sweep: {len(cells)} cells, {len(cells) - len(todo)} cached, {len(todo)} to run")

    pending = [cells[i] for i in todo]
    if workers > 1 and len(pending) > 1:
        with mp.Pool(min(workers, len(pending))) as pool:
            computed = pool.map(run_cell, pending, chunksize=1)
    else:
        computed = []
        for n, cell in enumerate(pending, start=1):
            try:
                row = run_cell(cell)
            except Exception as e:
                row = ReportRow(cell.label, cell.lsi_topics, k=k, status=f"{type(e).__name__}: {e}")
            computed.append(row)
            logger.info(f"Sweep cell {n}/{len(pending)}: {cell.label} k={cell.lsi_topics} -> {row.status}")

    for i, row in zip(todo, computed):
        rows[i] = row
        if row.status != "ok":
            logger.warning(f"Sweep cell {row.tag_set} / {row.lsi_topics} failed: {row.status}")
        elif cache is not None:
            cache.put(cache_key(cells[i]), row)
    return EvaluationReport(rows=rows, k=k)
