"""Multi-positive contrastive loss with analytic score gradients.

The video-to-text direction handles several positive texts per video:
each positive gets its own softmax term whose denominator contains that
positive and the video's non-positive texts only, so sibling positives
never compete with each other. The text-to-video direction is a plain
softmax over videos. The two are combined with a fixed or dynamic
weight; the dynamic weight is the detached ratio l_v2t / l_t2v, so no
gradient flows through it.

A plain-softmax variant (``baseline_loss``) keeps every text in every
denominator; it is the ablation reference for the exclusion rule.

All arithmetic is float64 with max-subtracted log-sum-exp, so small
temperatures do not overflow. Gradients are with respect to the raw
score grid (the 1/temperature factor is included).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .corpus import EmbeddingMatrix
from .errors import InvariantError

_TOTAL_TOL = 1e-9


class Weighting(enum.Enum):
    DYNAMIC = "dynamic"
    FIXED = "fixed"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Batch:
    """One training batch: a group of videos together with all their texts.

    ``positives[i]`` lists the batch text indices belonging to video i;
    together they must partition ``range(n_texts)``, which also defines
    the owner video of every text. Embeddings are optional so a batch
    can be built from a score file alone.
    """

    positives: tuple[tuple[int, ...], ...]
    n_texts: int
    video_keys: tuple[np.ndarray, ...] | None = None
    text_embs: EmbeddingMatrix | np.ndarray | None = None

    def __post_init__(self):
        pos = tuple(tuple(sorted(set(int(j) for j in p))) for p in self.positives)
        object.__setattr__(self, "positives", pos)
        if not pos:
            raise InvariantError("batch has no videos")
        owner = np.full(self.n_texts, -1, dtype=np.int64)
        for i, p in enumerate(pos):
            if not p:
                raise InvariantError(f"video {i} has no positive texts in batch")
            for j in p:
                if not 0 <= j < self.n_texts:
                    raise InvariantError(
                        f"text index {j} out of range for {self.n_texts} batch texts"
                    )
                if owner[j] != -1:
                    raise InvariantError(
                        f"text {j} claimed by videos {owner[j]} and {i}"
                    )
                owner[j] = i
        if (owner == -1).any():
            j = int(np.argmax(owner == -1))
            raise InvariantError(f"text {j} belongs to no batch video")
        object.__setattr__(self, "_owner", owner)
        if self.video_keys is not None:
            keys = tuple(np.asarray(k) for k in self.video_keys)
            if len(keys) != len(pos):
                raise InvariantError(
                    f"{len(keys)} key-event sets for {len(pos)} batch videos"
                )
            for i, k in enumerate(keys):
                if k.ndim != 2 or k.shape[0] < 1:
                    raise InvariantError(f"key events of batch video {i} are empty")
            object.__setattr__(self, "video_keys", keys)

    @property
    def n_videos(self) -> int:
        return len(self.positives)

    @property
    def text_owner(self) -> np.ndarray:
        """Owner video index per batch text."""
        return self._owner


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.05
    weighting: Weighting = Weighting.DYNAMIC
    alpha: float = 1.0  # used under FIXED weighting

    def __post_init__(self):
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise InvariantError(f"temperature must be positive, got {self.temperature}")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise InvariantError(f"fixed alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class LossOutput:
    l_v2t: float
    l_t2v: float
    alpha_used: float
    total: float
    grad_scores: np.ndarray
    alpha_fallback: bool = False

    def __post_init__(self):
        for name in ("l_v2t", "l_t2v", "alpha_used", "total"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise InvariantError(f"non-finite {name}: {v}")
        if self.l_v2t < 0 or self.l_t2v < 0:
            raise InvariantError("negative component loss")
        if abs(self.total - (self.l_v2t + self.alpha_used * self.l_t2v)) > _TOTAL_TOL:
            raise InvariantError("total does not match weighted component sum")
        if not np.isfinite(self.grad_scores).all():
            raise InvariantError("non-finite score gradient")

    def to_dict(self) -> dict:
        return {
            "alpha_fallback": self.alpha_fallback,
            "alpha_used": float(self.alpha_used),
            "grad_scores": [[float(g) for g in row] for row in self.grad_scores],
            "l_t2v": float(self.l_t2v),
            "l_v2t": float(self.l_v2t),
            "total": float(self.total),
        }


def _checked_grid(scores, batch: Batch, temperature: float) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    if z.shape != (batch.n_videos, batch.n_texts):
        raise InvariantError(
            f"score grid {z.shape} does not match batch "
            f"({batch.n_videos} videos x {batch.n_texts} texts)"
        )
    if not np.isfinite(z).all():
        raise InvariantError("non-finite score in batch grid")
    if not (np.isfinite(temperature) and temperature > 0):
        raise InvariantError(f"temperature must be positive, got {temperature}")
    return z / temperature


def loss_v2t(scores, batch: Batch, temperature: float) -> tuple[float, np.ndarray]:
    """Video-to-text loss with sibling-positive exclusion.

    Per video i and positive text k, the softmax denominator ranges over
    {k} plus the texts NOT positive for i. Terms are averaged by
    1/|T_i| within a video and 1/|B| across videos.
    """
    z = _checked_grid(scores, batch, temperature)
    n_videos, n_texts = z.shape
    grad = np.zeros_like(z)
    total = 0.0
    for i, pos in enumerate(batch.positives):
        row = z[i]
        m = float(row.max())
        e = np.exp(row - m)
        neg = np.ones(n_texts, dtype=bool)
        neg[list(pos)] = False
        s_neg = float(e[neg].sum())
        w = 1.0 / (n_videos * len(pos))
        for k in pos:
            denom = float(e[k]) + s_neg
            total += (m + np.log(denom) - row[k]) * w
            grad[i, neg] += e[neg] * (w / denom)
            grad[i, k] += (e[k] / denom - 1.0) * w
    return max(total, 0.0), grad / temperature


def loss_v2t_plain(scores, batch: Batch, temperature: float) -> tuple[float, np.ndarray]:
    """Ablation variant: every text stays in every denominator, so a
    video's positives compete with each other. Same averaging."""
    z = _checked_grid(scores, batch, temperature)
    n_videos, n_texts = z.shape
    grad = np.zeros_like(z)
    total = 0.0
    for i, pos in enumerate(batch.positives):
        row = z[i]
        m = float(row.max())
        e = np.exp(row - m)
        s = float(e.sum())
        lse = m + np.log(s)
        total += sum(lse - row[k] for k in pos) / (n_videos * len(pos))
        grad[i] = e / (s * n_videos)
        grad[i, list(pos)] -= 1.0 / (n_videos * len(pos))
    return max(total, 0.0), grad / temperature


def loss_t2v(scores, batch: Batch, temperature: float) -> tuple[float, np.ndarray]:
    """Text-to-video softmax: each text scored against all batch videos,
    cross-entropy on its owner video, averaged over texts."""
    z = _checked_grid(scores, batch, temperature)
    n_texts = batch.n_texts
    owners = batch.text_owner
    m = z.max(axis=0)
    e = np.exp(z - m)
    s = e.sum(axis=0)
    lse = m + np.log(s)
    cols = np.arange(n_texts)
    total = float(np.sum(lse - z[owners, cols])) / n_texts
    grad = e / (s * n_texts)
    grad[owners, cols] -= 1.0 / n_texts
    return max(total, 0.0), grad / temperature


def _combine(
    lv: float,
    gv: np.ndarray,
    lt: float,
    gt: np.ndarray,
    config: LossConfig,
) -> LossOutput:
    fallback = False
    if config.weighting is Weighting.DYNAMIC:
        if lt == 0.0:
            alpha, fallback = 1.0, True
        else:
            alpha = lv / lt
    else:
        alpha = config.alpha
    return LossOutput(
        l_v2t=lv,
        l_t2v=lt,
        alpha_used=alpha,
        total=lv + alpha * lt,
        grad_scores=gv + alpha * gt,
        alpha_fallback=fallback,
    )


def mevtr_loss(scores, batch: Batch, config: LossConfig) -> LossOutput:
    """Full objective: exclusion-aware v2t plus weighted t2v.

    Under dynamic weighting alpha is the detached ratio l_v2t / l_t2v
    (so total = 2 * l_v2t identically); a saturated batch with
    l_t2v = 0 falls back to alpha = 1 and sets ``alpha_fallback``.
    """
    lv, gv = loss_v2t(scores, batch, config.temperature)
    lt, gt = loss_t2v(scores, batch, config.temperature)
    return _combine(lv, gv, lt, gt, config)


def baseline_loss(scores, batch: Batch, config: LossConfig) -> LossOutput:
    """Same structure with the plain (no exclusion) v2t term. Weighting
    rules are shared with :func:`mevtr_loss` so the two differ only in
    the denominator sets."""
    lv, gv = loss_v2t_plain(scores, batch, config.temperature)
    lt, gt = loss_t2v(scores, batch, config.temperature)
    return _combine(lv, gv, lt, gt, config)
