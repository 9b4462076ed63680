"""Desk-scale training of a shared linear projection head.

The encoders stay frozen; the only trainable object is one weight
matrix applied to frame and text embeddings alike. Each step projects a
batch, normalizes, aggregates per-video key events into scores, runs
the contrastive loss, and backpropagates by hand through the chain
score -> cosine -> normalization -> projection. Plain gradient descent,
float64 throughout, fully deterministic for a fixed seed.

Two ablation switches mirror the model variants: ``use_key_events``
(off = mean-pool every frame) and ``use_mevtr_loss`` (off = plain
multi-positive softmax without sibling exclusion).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, EmbeddingMatrix, TextItem, VideoItem, load_embeddings, save_embeddings
from .errors import InvariantError, TrainingDiverged
from .evaluation import collapse_diagnostic
from .keyevents import ClusterConfig, select_key_events
from .loss import Batch, LossConfig, LossOutput, baseline_loss, mevtr_loss
from .similarity import SimilarityMode


@dataclass(frozen=True)
class ProjectionHead:
    """Single weight matrix shared by the video and text sides."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise InvariantError(f"head weights must be a 2-D matrix, got {w.shape}")
        if not np.isfinite(w).all():
            raise InvariantError("non-finite head weight")
        object.__setattr__(self, "weights", w)

    @property
    def dim_in(self) -> int:
        return self.weights.shape[0]

    @property
    def dim_out(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def identity(cls, dim: int) -> "ProjectionHead":
        return cls(np.eye(dim))

    @classmethod
    def seeded(cls, dim_in: int, dim_out: int, seed: int) -> "ProjectionHead":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((dim_in, dim_out)) / np.sqrt(dim_in))

    def project(self, mat) -> np.ndarray:
        x = np.asarray(mat, dtype=np.float64)
        if x.shape[-1] != self.dim_in:
            raise InvariantError(
                f"head expects dim {self.dim_in}, got {x.shape[-1]}"
            )
        return x @ self.weights


def save_head(head: ProjectionHead, path) -> None:
    """Checkpoint in the embedding binary (float32; rows = input dim)."""
    save_embeddings(EmbeddingMatrix(head.weights.astype(np.float32)), path)


def load_head(path) -> ProjectionHead:
    return ProjectionHead(load_embeddings(path).data)


class Recluster(enum.Enum):
    ONCE = "once"
    EVERY_EPOCH = "epoch"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_videos: int = 8
    learning_rate: float = 0.05
    seed: int = 0
    loss: LossConfig = LossConfig()
    mode: SimilarityMode = SimilarityMode.KEY_EVENT_AVG
    use_key_events: bool = True
    use_mevtr_loss: bool = True
    recluster: Recluster = Recluster.ONCE
    cluster: ClusterConfig = ClusterConfig()
    head_dim: int | None = None  # None: square head, identity init

    def __post_init__(self):
        if self.epochs < 1:
            raise InvariantError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_videos < 2:
            raise InvariantError(
                f"batch_videos must be >= 2 (contrastive losses need negatives), "
                f"got {self.batch_videos}"
            )
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise InvariantError(
                f"learning_rate must be finite and >= 0, got {self.learning_rate}"
            )
        if self.head_dim is not None and self.head_dim < 1:
            raise InvariantError(f"head_dim must be >= 1, got {self.head_dim}")


@dataclass(frozen=True)
class TrainReport:
    """Per-epoch training statistics plus the final head.

    Loss entries are means over the epoch's batches; collapse entries
    are the corpus-wide average pairwise text cosine (self-pairs
    included) measured with the head as of the end of that epoch.
    """

    epochs: int
    mean_v2t: tuple[float, ...]
    mean_t2v: tuple[float, ...]
    mean_alpha: tuple[float, ...]
    mean_total: tuple[float, ...]
    collapse_mean: tuple[float, ...]
    collapse_variance: tuple[float, ...]
    head: ProjectionHead

    def __post_init__(self):
        series = (
            self.mean_v2t,
            self.mean_t2v,
            self.mean_alpha,
            self.mean_total,
            self.collapse_mean,
            self.collapse_variance,
        )
        for s in series:
            if len(s) != self.epochs:
                raise InvariantError("per-epoch series length does not match epochs")
            if not all(np.isfinite(v) for v in s):
                raise InvariantError("non-finite per-epoch statistic")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "head": {
                "dim_in": self.head.dim_in,
                "dim_out": self.head.dim_out,
                "weights": [[float(w) for w in row] for row in self.head.weights],
            },
            "per_epoch": {
                "alpha": list(self.mean_alpha),
                "collapse_mean": list(self.collapse_mean),
                "collapse_variance": list(self.collapse_variance),
                "l_t2v": list(self.mean_t2v),
                "l_v2t": list(self.mean_v2t),
                "total": list(self.mean_total),
            },
        }


def _unit_with_norms(mat: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", mat, mat))
    if not np.isfinite(norms).all():
        raise InvariantError(f"non-finite {what} norm")
    if (norms == 0).any():
        idx = int(np.argmax(norms == 0))
        raise InvariantError(f"{what} row {idx} has zero norm")
    return mat / norms[:, None], norms


def _unit_backward(du: np.ndarray, u: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # u = p / |p|  =>  dp = (du - (du . u) u) / |p|
    proj = np.einsum("ij,ij->i", du, u)
    return (du - proj[:, None] * u) / norms[:, None]


def _batch_step(
    key_sets: list[np.ndarray],
    texts: np.ndarray,
    positives,
    weights: np.ndarray,
    config: TrainConfig,
) -> tuple[LossOutput, np.ndarray]:
    """Loss and head-weight gradient for one batch.

    ``key_sets`` and ``texts`` are raw (unprojected) float64 inputs;
    the projection through ``weights`` is part of the differentiated
    graph.
    """
    mode = config.mode if config.use_key_events else SimilarityMode.MEAN_POOL
    n_videos = len(key_sets)
    n_texts = texts.shape[0]
    q = texts @ weights
    v, q_norms = _unit_with_norms(q, "projected text")
    scores = np.empty((n_videos, n_texts))
    caches = []
    for i, x in enumerate(key_sets):
        p = x @ weights
        u, p_norms = _unit_with_norms(p, "projected key event")
        if mode is SimilarityMode.KEY_EVENT_AVG:
            c = u @ v.T
            scores[i] = c.mean(axis=0)
            extra = None
        elif mode is SimilarityMode.KEY_EVENT_MAX:
            c = u @ v.T
            arg = np.argmax(c, axis=0)  # ties: lowest key-event index
            scores[i] = c[arg, np.arange(n_texts)]
            extra = arg
        else:
            pooled = u.mean(axis=0)
            norm = float(np.sqrt(pooled @ pooled))
            if norm == 0.0:
                raise InvariantError(f"batch video {i}: pooled key events have zero norm")
            pooled_unit = pooled / norm
            scores[i] = v @ pooled_unit
            extra = (norm, pooled_unit)
        caches.append((x, u, p_norms, extra))
    if not np.isfinite(scores).all():
        raise InvariantError("non-finite similarity score in batch")
    batch = Batch(positives=tuple(tuple(p) for p in positives), n_texts=n_texts)
    loss_fn = mevtr_loss if config.use_mevtr_loss else baseline_loss
    out = loss_fn(scores, batch, config.loss)
    grad = out.grad_scores
    d_v = np.zeros_like(v)
    d_w = np.zeros_like(weights)
    for i, (x, u, p_norms, extra) in enumerate(caches):
        g = grad[i]
        k = u.shape[0]
        if mode is SimilarityMode.KEY_EVENT_AVG:
            row = (g / k) @ v
            d_u = np.broadcast_to(row, u.shape)
            d_v += np.outer(g / k, u.sum(axis=0))
        elif mode is SimilarityMode.KEY_EVENT_MAX:
            arg = extra
            d_u = np.zeros_like(u)
            np.add.at(d_u, arg, g[:, None] * v)
            d_v += g[:, None] * u[arg]
        else:
            norm, pooled_unit = extra
            d_pooled_unit = g @ v
            d_pooled = (
                d_pooled_unit - (d_pooled_unit @ pooled_unit) * pooled_unit
            ) / norm
            d_u = np.broadcast_to(d_pooled / k, u.shape)
            d_v += np.outer(g, pooled_unit)
        d_p = _unit_backward(np.ascontiguousarray(d_u), u, p_norms)
        d_w += x.T @ d_p
    d_q = _unit_backward(d_v, v, q_norms)
    d_w += texts.T @ d_q
    return out, d_w


def head_gradient(batch: Batch, head: ProjectionHead, config: TrainConfig) -> np.ndarray:
    """Analytic gradient of the batch loss w.r.t. the head weights.

    The batch must carry raw key-event matrices and text embeddings;
    they are projected through ``head`` inside the differentiated chain.
    """
    if batch.video_keys is None or batch.text_embs is None:
        raise InvariantError("batch carries no embeddings for the head gradient")
    texts = batch.text_embs
    if isinstance(texts, EmbeddingMatrix):
        texts = texts.data
    texts = np.asarray(texts, dtype=np.float64)
    key_sets = [np.asarray(x, dtype=np.float64) for x in batch.video_keys]
    for i, x in enumerate(key_sets):
        if x.shape[1] != head.dim_in:
            raise InvariantError(
                f"batch video {i} has dim {x.shape[1]}, head expects {head.dim_in}"
            )
    if texts.shape[1] != head.dim_in:
        raise InvariantError(
            f"batch texts have dim {texts.shape[1]}, head expects {head.dim_in}"
        )
    _, d_w = _batch_step(key_sets, texts, batch.positives, head.weights, config)
    return d_w


def _initial_head(corpus: Corpus, config: TrainConfig) -> ProjectionHead:
    if config.head_dim is None or config.head_dim == corpus.dim:
        return ProjectionHead.identity(corpus.dim)
    return ProjectionHead.seeded(corpus.dim, config.head_dim, config.seed)


def _key_sources(corpus: Corpus, weights: np.ndarray, config: TrainConfig) -> list[np.ndarray]:
    """Raw key-event rows per video, chosen by clustering the projected
    frames. Without key events every frame is kept (mean-pool path)."""
    sources = []
    for video in corpus.videos:
        frames = video.frames.data.astype(np.float64)
        if not config.use_key_events:
            sources.append(frames)
            continue
        projected = EmbeddingMatrix(
            (frames @ weights).astype(np.float32, copy=False)
        )
        key = select_key_events(projected, config.cluster)
        sources.append(frames[list(key.medoid_indices)])
    return sources


def _batches(order: np.ndarray, batch_videos: int) -> list[list[int]]:
    chunks = [
        sorted(int(i) for i in order[s : s + batch_videos])
        for s in range(0, order.size, batch_videos)
    ]
    # a trailing single video cannot form a contrastive batch; fold it in
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = sorted(chunks[-1] + tail)
    return chunks


def train(corpus: Corpus, config: TrainConfig) -> TrainReport:
    """Run the full loop and report per-epoch means plus the final head."""
    n_videos = len(corpus.videos)
    if config.batch_videos > n_videos:
        raise InvariantError(
            f"batch_videos {config.batch_videos} exceeds corpus size {n_videos}"
        )
    head = _initial_head(corpus, config)
    weights = head.weights.copy()
    rng = np.random.default_rng(config.seed)
    text_mat = corpus.text_matrix().astype(np.float64)
    text_col = {tid: j for j, tid in enumerate(corpus.text_ids)}
    video_text_cols = [
        [text_col[t] for t in v.text_ids] for v in corpus.videos
    ]
    sources = None
    if config.use_key_events and config.recluster is Recluster.ONCE:
        sources = _key_sources(corpus, weights, config)
    if not config.use_key_events:
        sources = _key_sources(corpus, weights, config)
    mean_v2t, mean_t2v, mean_alpha, mean_total = [], [], [], []
    collapse_mean, collapse_variance = [], []
    for epoch in range(config.epochs):
        if config.use_key_events and config.recluster is Recluster.EVERY_EPOCH:
            sources = _key_sources(corpus, weights, config)
        stats = np.zeros(4)
        batches = _batches(rng.permutation(n_videos), config.batch_videos)
        for b, members in enumerate(batches):
            cols = [c for i in members for c in video_text_cols[i]]
            local = {c: j for j, c in enumerate(cols)}
            positives = [
                tuple(local[c] for c in video_text_cols[i]) for i in members
            ]
            try:
                out, d_w = _batch_step(
                    [sources[i] for i in members],
                    text_mat[cols],
                    positives,
                    weights,
                    config,
                )
            except InvariantError as exc:
                raise TrainingDiverged(f"epoch {epoch} batch {b}: {exc}") from exc
            if not np.isfinite(d_w).all():
                raise TrainingDiverged(
                    f"epoch {epoch} batch {b}: non-finite head gradient"
                )
            weights = weights - config.learning_rate * d_w
            stats += (out.l_v2t, out.l_t2v, out.alpha_used, out.total)
        stats /= len(batches)
        mean_v2t.append(float(stats[0]))
        mean_t2v.append(float(stats[1]))
        mean_alpha.append(float(stats[2]))
        mean_total.append(float(stats[3]))
        collapse = collapse_diagnostic(corpus, head=weights)
        collapse_mean.append(collapse.mean)
        collapse_variance.append(collapse.variance)
    return TrainReport(
        epochs=config.epochs,
        mean_v2t=tuple(mean_v2t),
        mean_t2v=tuple(mean_t2v),
        mean_alpha=tuple(mean_alpha),
        mean_total=tuple(mean_total),
        collapse_mean=tuple(collapse_mean),
        collapse_variance=tuple(collapse_variance),
        head=ProjectionHead(weights),
    )


def project_corpus(corpus: Corpus, head: ProjectionHead) -> Corpus:
    """New corpus with every embedding passed through the head (stored
    float32, like any other corpus). Useful for evaluating a trained
    head with the standard scoring path."""
    videos = tuple(
        VideoItem(
            video_id=v.video_id,
            frames=EmbeddingMatrix(head.project(v.frames.data).astype(np.float32)),
            duration_seconds=v.duration_seconds,
            text_ids=v.text_ids,
        )
        for v in corpus.videos
    )
    texts = tuple(
        TextItem(
            text_id=t.text_id,
            embedding=EmbeddingMatrix(
                head.project(t.embedding.data).astype(np.float32)
            ),
            video_id=t.video_id,
        )
        for t in corpus.texts
    )
    return Corpus(videos=videos, texts=texts)
