"""
tagtriplet LSI
Latent semantic indexing over the tag x track matrix: truncated SVD, per-track
concept vectors, fold-in of unseen tracks and topic inspection.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import ArpackNoConvergence, svds
from sklearn.utils.extmath import svd_flip

from .artifacts import check_header, fmt_float, fmt_row, header_line, parse_floats
from .errors import (
    ConvergenceError,
    DegenerateVectorError,
    DimensionError,
    FormatVersionError,
    ParameterError,
    UnknownTrackError,
)
from .tagspace import Tag, TagTrackMatrix

logger = logging.getLogger(__name__)

MatrixLike = Union[TagTrackMatrix, sparse.spmatrix, np.ndarray]


@dataclass(frozen=True)
class LsiVector:
    values: np.ndarray
    normalized: bool


@dataclass(frozen=True)
class TopicReport:
    topic_ordinal: int
    positive_loadings: Tuple[Tuple[str, str, float], ...]
    negative_loadings: Tuple[Tuple[str, str, float], ...]


@dataclass(frozen=True, eq=False)
class LsiModel:
    """
    Truncated SVD factors. `track_vectors` holds the singular-value weighted
    right singular coordinates, one row per track.
    """
    tag_factors: np.ndarray     # m x k, U_k
    singular_values: np.ndarray  # k, nonincreasing
    track_vectors: np.ndarray   # n x k, V_k * s
    tag_index: Tuple[Tag, ...]
    track_index: Tuple[str, ...]

    @property
    def k(self) -> int:
        return len(self.singular_values)

    @property
    def m(self) -> int:
        return self.tag_factors.shape[0]

    @property
    def n(self) -> int:
        return self.track_vectors.shape[0]

    def row_of(self, track_id: str) -> int:
        try:
            return self._positions[track_id]
        except KeyError:
            raise UnknownTrackError(track_id)

    @property
    def _positions(self):
        cache = self.__dict__.get("_positions_cache")
        if cache is None:
            cache = {t: i for i, t in enumerate(self.track_index)}
            object.__setattr__(self, "_positions_cache", cache)
        return cache


def _as_matrix(W: MatrixLike):
    if isinstance(W, TagTrackMatrix):
        return W.matrix
    return W


def truncated_svd(
    W: MatrixLike,
    k: int,
    tol: float = 1e-10,
    max_iter: int = 10000,
    dense_limit: int = 500,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Rank-k SVD of W returning (U_k, s_k, V_k) with V_k of shape n x k.
    Singular values come in nonincreasing order and each topic's sign is fixed
    so its largest-magnitude entry in U_k is positive.

    Small matrices (or k close to full rank) go through dense LAPACK; larger
    ones through ARPACK Lanczos on the sparse matrix.
    """
    A = _as_matrix(W)
    m, n = A.shape
    if not isinstance(k, (int, np.integer)) or k < 1 or k > min(m, n):
        raise ParameterError("k", k, f"1 <= k <= min(m, n) = {min(m, n)}")

    if min(m, n) <= dense_limit or k >= min(m, n) - 1:
        dense = A.toarray() if sparse.issparse(A) else np.asarray(A, dtype=np.float64)
        U, s, Vt = linalg.svd(dense, full_matrices=False)
        U, s, Vt = U[:, :k], s[:k], Vt[:k]
    else:
        A = sparse.csr_matrix(A, dtype=np.float64)
        v0 = np.full(min(m, n), 1.0 / np.sqrt(min(m, n)))
        try:
            U, s, Vt = svds(A, k=k, tol=tol, maxiter=max_iter, v0=v0, solver="arpack")
        except ArpackNoConvergence as e:
            raise ConvergenceError(
                f"ARPACK did not converge for k={k} within {max_iter} iterations",
                residual=_partial_residual(A, e),
            )
        order = np.argsort(-s, kind="stable")
        U, s, Vt = U[:, order], s[order], Vt[order]

    U, Vt = svd_flip(U, Vt, u_based_decision=True)
    return np.ascontiguousarray(U), np.ascontiguousarray(s), np.ascontiguousarray(Vt.T)


def _partial_residual(A, exc: ArpackNoConvergence) -> float:
    vecs = getattr(exc, "eigenvectors", None)
    vals = getattr(exc, "eigenvalues", None)
    if vecs is None or vals is None or len(vals) == 0:
        return float("nan")
    gram = (A.T @ A) if vecs.shape[0] == A.shape[1] else (A @ A.T)
    resid = gram @ vecs - vecs * vals
    return float(np.max(np.linalg.norm(resid, axis=0)) / max(np.max(np.abs(vals)), 1e-300))


def fit_lsi(
    W: TagTrackMatrix,
    k: int,
    tol: float = 1e-10,
    max_iter: int = 10000,
    dense_limit: int = 500,
) -> LsiModel:
    """Fit a k-topic LSI model; track vectors are V_k scaled by the singular values"""
    U, s, V = truncated_svd(W, k, tol=tol, max_iter=max_iter, dense_limit=dense_limit)
    floor = max(W.m, W.n) * np.finfo(np.float64).eps * s[0]
    if s[-1] <= floor:
        rank = int(np.sum(s > floor))
        raise ParameterError("k", k, f"<= numerical rank {rank} of the tag matrix")
    logger.info(f"Fitted LSI: {W.m} tags x {W.n} tracks, k={k}, "
                f"sigma_1={s[0]:.4g}, sigma_k={s[-1]:.4g}")
    return LsiModel(
        tag_factors=U,
        singular_values=s,
        track_vectors=V * s,
        tag_index=tuple(W.tags),
        track_index=tuple(W.tracks),
    )


def _normalize(values: np.ndarray, what: str) -> np.ndarray:
    norm = np.linalg.norm(values)
    if norm == 0.0:
        raise DegenerateVectorError(f"{what} has zero norm and cannot be normalized")
    return values / norm


def track_vector(model: LsiModel, track_id: str, normalize: bool = True) -> LsiVector:
    values = model.track_vectors[model.row_of(track_id)].copy()
    if normalize:
        values = _normalize(values, f"LSI vector of {track_id!r}")
    return LsiVector(values=values, normalized=normalize)


def normalized_track_matrix(model: LsiModel, track_ids: Sequence[str]) -> np.ndarray:
    """l2-normalized LSI rows for many tracks, in the given order"""
    rows = model.track_vectors[[model.row_of(t) for t in track_ids]]
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0.0):
        bad = [t for t, nrm in zip(track_ids, norms) if nrm == 0.0]
        raise DegenerateVectorError(f"zero LSI vectors for {len(bad)} tracks, e.g. {bad[0]!r}")
    return rows / norms[:, None]


def overlap_vectors(W: TagTrackMatrix, track_ids: Sequence[str]) -> np.ndarray:
    """Plain tag-overlap relatedness: l2-normalized binary tag columns"""
    positions = {t: j for j, t in enumerate(W.tracks)}
    missing = [t for t in track_ids if t not in positions]
    if missing:
        raise UnknownTrackError(missing[0])
    cols = W.matrix[:, [positions[t] for t in track_ids]].T.toarray()
    return cols / np.linalg.norm(cols, axis=1)[:, None]


def fold_in(model: LsiModel, tag_incidence: np.ndarray, normalize: bool = False) -> LsiVector:
    """
    Project an unseen track into the concept space as U_k^T x, which reproduces
    the stored vector for a training track's own column.
    """
    x = np.asarray(tag_incidence, dtype=np.float64).ravel()
    if x.shape[0] != model.m:
        raise DimensionError(f"tag incidence has length {x.shape[0]}, model has {model.m} tags")
    if not np.any(x):
        raise DegenerateVectorError("tag incidence vector is all zero")
    values = model.tag_factors.T @ x
    if normalize:
        values = _normalize(values, "folded-in vector")
    return LsiVector(values=values, normalized=normalize)


def topic_top_terms(model: LsiModel, topic_ordinal: int, top_n: int = 10) -> TopicReport:
    """Largest positive and negative tag loadings of one topic"""
    if not 0 <= topic_ordinal < model.k:
        raise ParameterError("topic_ordinal", topic_ordinal, f"0 <= ordinal < k = {model.k}")
    if top_n < 1:
        raise ParameterError("top_n", top_n, "top_n >= 1")
    column = model.tag_factors[:, topic_ordinal]
    order = np.argsort(-np.abs(column), kind="stable")
    positive, negative = [], []
    for i in order:
        tag_set, tag = model.tag_index[i]
        loading = float(column[i])
        if loading > 0 and len(positive) < top_n:
            positive.append((tag_set, tag, loading))
        elif loading < 0 and len(negative) < top_n:
            negative.append((tag_set, tag, loading))
    return TopicReport(topic_ordinal, tuple(positive), tuple(negative))


def format_topic_report(reports: Sequence[TopicReport]) -> str:
    """Positive loadings on the left, negative on the right, one block per topic"""
    blocks = []
    for report in reports:
        left = [f"{v:+.4f}  ({ts}) {tag}" for ts, tag, v in report.positive_loadings]
        right = [f"{v:+.4f}  ({ts}) {tag}" for ts, tag, v in report.negative_loadings]
        width = max([len("positive loading")] + [len(x) for x in left])
        lines = [f"Topic ({report.topic_ordinal})",
                 f"  {'positive loading':<{width}}  |  negative loading"]
        for i in range(max(len(left), len(right))):
            l = left[i] if i < len(left) else ""
            r = right[i] if i < len(right) else ""
            lines.append(f"  {l:<{width}}  |  {r}".rstrip())
        blocks.append("\n".join(lines))
    return header_line("topics") + "\n\n".join(blocks) + "\n"


def reconstruction_error(W: MatrixLike, model: LsiModel) -> float:
    """Frobenius norm of W minus its rank-k reconstruction"""
    A = _as_matrix(W)
    dense = A.toarray() if sparse.issparse(A) else np.asarray(A, dtype=np.float64)
    return float(np.linalg.norm(dense - model.tag_factors @ model.track_vectors.T))


def write_model(model: LsiModel, path: Union[str, Path]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header_line("lsi"))
        f.write(f"{model.m}\t{model.n}\t{model.k}\n")
        f.write(fmt_row(model.singular_values) + "\n")
        for (tag_set, tag), row in zip(model.tag_index, model.tag_factors):
            f.write(f"{tag_set}\t{tag}\t{fmt_row(row)}\n")
        for track, row in zip(model.track_index, model.track_vectors):
            f.write(f"{track}\t{fmt_row(row)}\n")
    logger.info(f"Wrote LSI model {path} (k={model.k})")


def read_model_shape(path: Union[str, Path]) -> Tuple[int, int, int]:
    """(m, n, k) from the model header without loading the factors"""
    with open(path, "r", encoding="utf-8") as f:
        check_header(f.readline(), "lsi", path)
        try:
            m, n, k = (int(x) for x in f.readline().split("\t"))
        except ValueError as e:
            raise FormatVersionError(f"{path}: corrupt LSI model file ({e})")
    return m, n, k


def read_model(path: Union[str, Path]) -> LsiModel:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().split("\n")
    check_header(lines[0], "lsi", path)
    try:
        m, n, k = (int(x) for x in lines[1].split("\t"))
        s = parse_floats(lines[2])
        tags, factors = [], []
        for line in lines[3:3 + m]:
            tag_set, tag, rest = line.split("\t", 2)
            tags.append((tag_set, tag))
            factors.append(parse_floats(rest))
        tracks, vectors = [], []
        for line in lines[3 + m:3 + m + n]:
            track, rest = line.split("\t", 1)
            tracks.append(track)
            vectors.append(parse_floats(rest))
    except ValueError as e:
        raise FormatVersionError(f"{path}: corrupt LSI model file ({e})")
    if len(s) != k or len(tags) != m or len(tracks) != n:
        raise FormatVersionError(f"{path}: truncated LSI model file")
    return LsiModel(
        tag_factors=np.array(factors).reshape(m, k),
        singular_values=s,
        track_vectors=np.array(vectors).reshape(n, k),
        tag_index=tuple(tags),
        track_index=tuple(tracks),
    )
