"""Retrieval metrics, test-set partitioning, and the text-collapse probe.

Video-to-text queries have several correct texts, so Recall@k comes in
three flavors per query: Average (fraction of positives in the top k),
One-Hit (any positive in the top k), All-Hit (every positive in the top
k). Text-to-video queries have a single correct video and one recall.
Median rank is the median over queries of the best positive's rank.

Ranking is competition-style on descending score; exact score ties are
broken by candidate order and counted in ``queries_with_ties`` so that
oracle comparisons stay exact.

The collapse probe measures, per video, the average pairwise cosine
similarity of its text embeddings (self-pairs included by default);
high values mean the texts have collapsed onto one direction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._vec import unit_rows
from .corpus import Corpus
from .errors import InvariantError
from .similarity import SimilarityMatrix

DEFAULT_KS = (1, 5, 10, 50)


class Task(enum.Enum):
    VIDEO_TO_TEXT = "v2t"
    TEXT_TO_VIDEO = "t2v"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class MetricsReport:
    """Recall@k bands plus median rank for one retrieval direction.

    For TEXT_TO_VIDEO the three recall variants coincide (single
    positive); all three are stored, serialization emits one.
    """

    task: Task
    ks: tuple[int, ...]
    recall_average: tuple[float, ...]
    recall_one_hit: tuple[float, ...]
    recall_all_hit: tuple[float, ...]
    median_rank: float
    n_queries: int
    queries_with_ties: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        for name in ("recall_average", "recall_one_hit", "recall_all_hit"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.n_queries < 1:
            raise InvariantError("metrics require at least one query")
        if len(self.ks) < 1 or any(
            a >= b for a, b in zip(self.ks, self.ks[1:])
        ) or self.ks[0] < 1:
            raise InvariantError(f"ks must be strictly ascending positives, got {self.ks}")
        for name in ("recall_average", "recall_one_hit", "recall_all_hit"):
            vals = getattr(self, name)
            if len(vals) != len(self.ks):
                raise InvariantError(f"{name} length does not match ks")
            if any(not (0.0 <= v <= 1.0) for v in vals):
                raise InvariantError(f"{name} outside [0, 1]")
            if any(a > b for a, b in zip(vals, vals[1:])):
                raise InvariantError(f"{name} decreases in k")
        for ah, av, oh in zip(self.recall_all_hit, self.recall_average, self.recall_one_hit):
            if not ah <= av <= oh:
                raise InvariantError("recall ordering all_hit <= average <= one_hit violated")
        if not (np.isfinite(self.median_rank) and self.median_rank >= 1.0):
            raise InvariantError(f"median rank must be >= 1, got {self.median_rank}")

    def to_dict(self) -> dict:
        per_k: dict[str, dict] = {}
        for i, k in enumerate(self.ks):
            if self.task is Task.TEXT_TO_VIDEO:
                per_k[str(k)] = {"recall": self.recall_average[i]}
            else:
                per_k[str(k)] = {
                    "all_hit": self.recall_all_hit[i],
                    "average": self.recall_average[i],
                    "one_hit": self.recall_one_hit[i],
                }
        return {
            "median_rank": self.median_rank,
            "n_queries": self.n_queries,
            "queries_with_ties": self.queries_with_ties,
            "recall": per_k,
            "task": self.task.value,
        }


def metrics_csv(report: MetricsReport) -> str:
    """Plot-ready recall-vs-k table, one row per k."""
    if report.task is Task.TEXT_TO_VIDEO:
        lines = ["k,recall"]
        lines += [f"{k},{report.recall_average[i]}" for i, k in enumerate(report.ks)]
    else:
        lines = ["k,recall_average,recall_one_hit,recall_all_hit"]
        lines += [
            f"{k},{report.recall_average[i]},{report.recall_one_hit[i]},{report.recall_all_hit[i]}"
            for i, k in enumerate(report.ks)
        ]
    return "\n".join(lines) + "\n"


def _check_alignment(scores: SimilarityMatrix, corpus: Corpus) -> None:
    if scores.video_ids != corpus.video_ids or scores.text_ids != corpus.text_ids:
        raise InvariantError("score matrix axes do not match the corpus id order")


def _check_ks(ks) -> tuple[int, ...]:
    ks = tuple(int(k) for k in ks)
    if not ks or ks[0] < 1 or any(a >= b for a, b in zip(ks, ks[1:])):
        raise InvariantError(f"ks must be strictly ascending positives, got {ks}")
    return ks


def _ranks_desc(values: np.ndarray) -> np.ndarray:
    """1-based rank per candidate, descending score, ties by index."""
    order = np.argsort(-values, kind="stable")
    ranks = np.empty(values.shape[0], dtype=np.int64)
    ranks[order] = np.arange(1, values.shape[0] + 1)
    return ranks


def _has_tie(values: np.ndarray) -> bool:
    return np.unique(values).size < values.size


def evaluate_v2t(scores: SimilarityMatrix, corpus: Corpus, ks=DEFAULT_KS) -> MetricsReport:
    """Each video queries all texts; its captions are the positives."""
    _check_alignment(scores, corpus)
    ks = _check_ks(ks)
    col = {tid: j for j, tid in enumerate(scores.text_ids)}
    n_q = len(scores.video_ids)
    avg = np.zeros(len(ks))
    one = np.zeros(len(ks))
    all_ = np.zeros(len(ks))
    best = np.empty(n_q)
    ties = 0
    for i, video in enumerate(corpus.videos):
        row = scores.scores[i]
        ranks = _ranks_desc(row)
        ties += _has_tie(row)
        pos_ranks = np.sort(ranks[[col[t] for t in video.text_ids]])
        best[i] = pos_ranks[0]
        for ki, k in enumerate(ks):
            hits = int(np.searchsorted(pos_ranks, k, side="right"))
            avg[ki] += hits / pos_ranks.size
            one[ki] += hits > 0
            all_[ki] += hits == pos_ranks.size
    return MetricsReport(
        task=Task.VIDEO_TO_TEXT,
        ks=ks,
        recall_average=tuple(avg / n_q),
        recall_one_hit=tuple(one / n_q),
        recall_all_hit=tuple(all_ / n_q),
        median_rank=float(np.median(best)),
        n_queries=n_q,
        queries_with_ties=int(ties),
    )


def evaluate_t2v(scores: SimilarityMatrix, corpus: Corpus, ks=DEFAULT_KS) -> MetricsReport:
    """Each text queries all videos; its owner video is the positive."""
    _check_alignment(scores, corpus)
    ks = _check_ks(ks)
    row_of = {vid: i for i, vid in enumerate(scores.video_ids)}
    n_q = len(scores.text_ids)
    owner_rank = np.empty(n_q)
    ties = 0
    for j, text in enumerate(corpus.texts):
        colv = scores.scores[:, j]
        ranks = _ranks_desc(colv)
        ties += _has_tie(colv)
        owner_rank[j] = ranks[row_of[text.video_id]]
    recall = tuple(float(np.mean(owner_rank <= k)) for k in ks)
    return MetricsReport(
        task=Task.TEXT_TO_VIDEO,
        ks=ks,
        recall_average=recall,
        recall_one_hit=recall,
        recall_all_hit=recall,
        median_rank=float(np.median(owner_rank)),
        n_queries=n_q,
        queries_with_ties=int(ties),
    )


@dataclass(frozen=True)
class SubsetSpec:
    """Named bin over (duration seconds, event count)."""

    name: str
    predicate: Callable[[float, int], bool]


DURATION_SUBSETS = (
    SubsetSpec("test-S", lambda d, e: d < 60.0),
    SubsetSpec("test-M", lambda d, e: 60.0 <= d < 120.0),
    SubsetSpec("test-L", lambda d, e: 120.0 <= d < 180.0),
    SubsetSpec("test-XL", lambda d, e: d >= 180.0),
)

EVENT_SUBSETS = (
    SubsetSpec("test-E1", lambda d, e: e <= 4),
    SubsetSpec("test-E2", lambda d, e: 5 <= e <= 12),
    SubsetSpec("test-E3", lambda d, e: e >= 13),
)

SUBSET_FAMILIES = {"duration": DURATION_SUBSETS, "events": EVENT_SUBSETS}


def partition_subsets(corpus: Corpus, family) -> dict[str, tuple[str, ...]]:
    """Split video ids into the named bins of a subset family.

    ``family`` is "duration", "events", or a sequence of SubsetSpec.
    Every video must match exactly one bin; empty bins are kept.
    """
    if isinstance(family, str):
        try:
            specs = SUBSET_FAMILIES[family]
        except KeyError:
            raise InvariantError(f"unknown subset family {family!r}") from None
    else:
        specs = tuple(family)
    out: dict[str, list[str]] = {s.name: [] for s in specs}
    if len(out) != len(specs):
        raise InvariantError("duplicate subset name in family")
    for v in corpus.videos:
        matches = [
            s.name for s in specs if s.predicate(v.duration_seconds, v.event_count)
        ]
        if len(matches) != 1:
            raise InvariantError(
                f"video {v.video_id!r} matched {len(matches)} subsets, expected 1"
            )
        out[matches[0]].append(v.video_id)
    return {name: tuple(ids) for name, ids in out.items()}


def restrict_to_videos(
    scores: SimilarityMatrix, corpus: Corpus, video_ids
) -> tuple[SimilarityMatrix, Corpus]:
    """Cut scores and corpus down to a video subset and its own texts.

    Both queries and candidate pools shrink, so subset metrics are
    self-contained.
    """
    keep = set(video_ids)
    missing = keep - set(corpus.video_ids)
    if missing:
        raise InvariantError(f"unknown video ids in subset: {sorted(missing)}")
    rows = [i for i, vid in enumerate(corpus.video_ids) if vid in keep]
    if not rows:
        raise InvariantError("video subset is empty")
    videos = [corpus.videos[i] for i in rows]
    text_keep = {t for v in videos for t in v.text_ids}
    cols = [j for j, tid in enumerate(corpus.text_ids) if tid in text_keep]
    texts = [corpus.texts[j] for j in cols]
    sub = Corpus(videos=tuple(videos), texts=tuple(texts))
    grid = scores.scores[np.ix_(rows, cols)]
    return SimilarityMatrix(sub.video_ids, sub.text_ids, grid), sub


@dataclass(frozen=True)
class CollapseReport:
    """Per-video average pairwise text cosine, with corpus aggregates.

    ``values`` holds None for videos skipped as undefined (single text
    with self-pairs excluded); aggregates cover defined values only.
    """

    video_ids: tuple[str, ...]
    values: tuple
    mean: float
    variance: float
    include_self_pairs: bool
    by_event_count: dict

    def __post_init__(self):
        if len(self.video_ids) != len(self.values):
            raise InvariantError("per-video value count mismatch")
        for vid, val in zip(self.video_ids, self.values):
            if val is None:
                continue
            if not (np.isfinite(val) and -1.0 - 1e-6 <= val <= 1.0 + 1e-6):
                raise InvariantError(f"sim_t for {vid!r} outside [-1, 1]: {val}")
        if not (np.isfinite(self.mean) and np.isfinite(self.variance)):
            raise InvariantError("non-finite collapse aggregate")

    def to_dict(self) -> dict:
        return {
            "by_event_count": {
                str(n): {"mean": m, "n_videos": c}
                for n, (m, c) in sorted(self.by_event_count.items())
            },
            "include_self_pairs": self.include_self_pairs,
            "mean": self.mean,
            "per_video": {v: val for v, val in zip(self.video_ids, self.values)},
            "variance": self.variance,
        }


def collapse_csv(report: CollapseReport) -> str:
    """Event-count breakdown table for plotting."""
    lines = ["event_count,mean_sim_t,n_videos"]
    lines += [
        f"{n},{m},{c}" for n, (m, c) in sorted(report.by_event_count.items())
    ]
    return "\n".join(lines) + "\n"


def _sim_t(texts: np.ndarray, include_self_pairs: bool):
    n = texts.shape[0]
    if n == 1 and not include_self_pairs:
        return None
    u = unit_rows(texts.astype(np.float64), "text")
    g = u @ u.T
    if include_self_pairs:
        return float(g.sum()) / (n * n)
    return float(g.sum() - np.trace(g)) / (n * (n - 1))


def collapse_diagnostic(
    corpus: Corpus, head=None, include_self_pairs: bool = True
) -> CollapseReport:
    """Average pairwise cosine of each video's (optionally projected)
    caption embeddings.

    ``head`` is anything with a ``weights`` matrix, or a raw matrix, or
    None for the embeddings as stored. Aggregates are the mean and
    population variance over videos with a defined value.
    """
    weights = None
    if head is not None:
        weights = np.asarray(getattr(head, "weights", head), dtype=np.float64)
    ids = []
    values = []
    groups: dict[int, list[float]] = {}
    for v in corpus.videos:
        mat = np.stack([corpus.text(t).vector for t in v.text_ids]).astype(np.float64)
        if weights is not None:
            if weights.shape[0] != mat.shape[1]:
                raise InvariantError(
                    f"head expects dim {weights.shape[0]}, corpus has {mat.shape[1]}"
                )
            mat = mat @ weights
        val = _sim_t(mat, include_self_pairs)
        ids.append(v.video_id)
        values.append(val)
        if val is not None:
            groups.setdefault(v.event_count, []).append(val)
    defined = [v for v in values if v is not None]
    if not defined:
        raise InvariantError("no videos with a defined collapse value")
    arr = np.asarray(defined)
    by_count = {n: (float(np.mean(g)), len(g)) for n, g in groups.items()}
    return CollapseReport(
        video_ids=tuple(ids),
        values=tuple(values),
        mean=float(arr.mean()),
        variance=float(arr.var()),
        include_self_pairs=include_self_pairs,
        by_event_count=by_count,
    )
