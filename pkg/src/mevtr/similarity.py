"""Video-text similarity from key-event embeddings.

Three aggregators over the per-key-event cosine similarities: their mean
("avg"), their maximum ("max"), and the cosine of the mean-pooled video
vector ("mean", the single-vector pooling baseline). Both sides are
L2-normalized internally, so all scores are scale-invariant and live in
[-1, 1] up to float rounding.
"""

from __future__ import annotations

import enum
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._vec import unit_rows
from .corpus import (
    Corpus,
    EmbeddingMatrix,
    _atomic_write_text,
    load_embeddings,
    save_embeddings,
)
from .errors import InvariantError, ManifestError

_SCORE_SLACK = 1e-6  # cosine bound tolerance for float32 rounding


class SimilarityMode(enum.Enum):
    """How per-key-event cosines collapse into one video-text score."""

    KEY_EVENT_AVG = "avg"
    KEY_EVENT_MAX = "max"
    MEAN_POOL = "mean"

    def __str__(self) -> str:
        return self.value


def _as_matrix(x, what: str) -> np.ndarray:
    if isinstance(x, EmbeddingMatrix):
        return x.data
    arr = np.asarray(x)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise InvariantError(f"{what} must be 1-D or 2-D")
    return arr


def score_pair(key_events, text, mode: SimilarityMode) -> float:
    """Similarity of one video (its key-event rows) to one text vector.

    Accepts EmbeddingMatrix or ndarray inputs; per-row cosines and their
    reduction accumulate in float64. A single key event makes all three
    modes coincide exactly.
    """
    keys = _as_matrix(key_events, "key_events")
    t = _as_matrix(text, "text")
    if t.shape[0] != 1:
        raise InvariantError(f"text must be a single row, got {t.shape[0]}")
    if keys.shape[0] < 1:
        raise InvariantError("key_events must have at least one row")
    if keys.shape[1] != t.shape[1]:
        raise InvariantError(
            f"dim mismatch: key events have dim {keys.shape[1]}, text {t.shape[1]}"
        )
    k64 = keys.astype(np.float64, copy=False)
    key_norms = np.sqrt(np.einsum("ij,ij->i", k64, k64))
    if not key_norms.all():
        idx = int(np.flatnonzero(key_norms == 0.0)[0])
        raise InvariantError(f"zero-norm key event row at index {idx}")
    t64 = t[0].astype(np.float64, copy=False)
    t_norm = float(np.einsum("i,i->", t64, t64)) ** 0.5
    if t_norm == 0.0:
        raise InvariantError("zero-norm text vector")
    cos = (k64 @ t64) / (key_norms * t_norm)
    if cos.shape[0] == 1:
        # All aggregators of one cosine are that cosine; compute it once so
        # the modes agree bitwise.
        return float(cos[0])
    if mode is SimilarityMode.KEY_EVENT_AVG:
        return float(cos.mean())
    if mode is SimilarityMode.KEY_EVENT_MAX:
        return float(cos.max())
    if mode is SimilarityMode.MEAN_POOL:
        pooled = (k64 / key_norms[:, None]).mean(axis=0)
        norm = float(np.sqrt(pooled @ pooled))
        if norm == 0.0:
            raise InvariantError("mean-pooled key events have zero norm")
        return float((pooled @ t64) / (norm * t_norm))
    raise InvariantError(f"unknown similarity mode {mode!r}")


@dataclass(frozen=True)
class SimilarityMatrix:
    """Dense video x text score grid with the id lists defining its axes."""

    video_ids: tuple[str, ...]
    text_ids: tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "video_ids", tuple(self.video_ids))
        object.__setattr__(self, "text_ids", tuple(self.text_ids))
        if len(set(self.video_ids)) != len(self.video_ids):
            raise InvariantError("duplicate video id in score grid")
        if len(set(self.text_ids)) != len(self.text_ids):
            raise InvariantError("duplicate text id in score grid")
        scores = np.asarray(self.scores)
        if scores.shape != (len(self.video_ids), len(self.text_ids)):
            raise InvariantError(
                f"score grid shape {scores.shape} does not match "
                f"{len(self.video_ids)} videos x {len(self.text_ids)} texts"
            )
        if not np.isfinite(scores).all():
            raise InvariantError("non-finite similarity score")
        if scores.size and (
            scores.min() < -1.0 - _SCORE_SLACK or scores.max() > 1.0 + _SCORE_SLACK
        ):
            raise InvariantError("similarity score outside [-1, 1] tolerance")
        object.__setattr__(self, "scores", scores)


def score_matrix(
    corpus: Corpus,
    key_events: dict[str, EmbeddingMatrix],
    mode: SimilarityMode,
    workers: int = 1,
) -> SimilarityMatrix:
    """Score every (video, text) pair of the corpus.

    ``key_events`` must cover every corpus video. Each cell is computed
    exactly as :func:`score_pair` would, so results are bitwise identical
    regardless of ``workers``.
    """
    for v in corpus.videos:
        if v.video_id not in key_events:
            raise InvariantError(f"missing key events for video {v.video_id!r}")
    texts = [t.vector for t in corpus.texts]
    out = np.empty((len(corpus.videos), len(texts)), dtype=np.float32)

    def fill_row(i: int) -> None:
        keys = key_events[corpus.videos[i].video_id]
        out[i, :] = [score_pair(keys, t, mode) for t in texts]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill_row, range(len(corpus.videos))))
    else:
        for i in range(len(corpus.videos)):
            fill_row(i)
    return SimilarityMatrix(corpus.video_ids, corpus.text_ids, out)


def _ids_path(path: str | Path) -> Path:
    return Path(str(path) + ".ids.json")


def save_similarity(matrix: SimilarityMatrix, path: str | Path) -> None:
    """Write scores in the embedding binary format (rows = videos,
    dim = texts) plus a ``<path>.ids.json`` sidecar naming both axes."""
    save_embeddings(EmbeddingMatrix(matrix.scores), path)
    _atomic_write_text(
        _ids_path(path),
        json.dumps(
            {"videos": list(matrix.video_ids), "texts": list(matrix.text_ids)},
            sort_keys=True,
            separators=(",", ":"),
        )
        + "\n",
    )


def load_similarity(path: str | Path) -> SimilarityMatrix:
    """Read a score file and its ids sidecar back into a SimilarityMatrix."""
    mat = load_embeddings(path)
    ids_path = _ids_path(path)
    if not ids_path.is_file():
        raise ManifestError(f"missing ids sidecar {ids_path}")
    ids = json.loads(ids_path.read_text(encoding="utf-8"))
    try:
        videos = [str(v) for v in ids["videos"]]
        texts = [str(t) for t in ids["texts"]]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{ids_path}: malformed ids sidecar ({exc})") from exc
    if mat.rows != len(videos) or mat.dim != len(texts):
        raise ManifestError(
            f"{path}: score grid is {mat.rows}x{mat.dim} but sidecar lists "
            f"{len(videos)} videos and {len(texts)} texts"
        )
    return SimilarityMatrix(tuple(videos), tuple(texts), mat.data)
