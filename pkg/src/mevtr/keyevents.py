"""Key-event selection: K-Medoids clustering over frame embeddings.

A video's frames are partitioned into K clusters under cosine distance
(1 - cosine similarity); each cluster's medoid frame becomes one key
event. Medoids are actual frames, so every key event is directly
interpretable as a frame of the video.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._vec import unit_rows
from .corpus import EmbeddingMatrix, _atomic_write_text
from .errors import InvariantError, ManifestError

# Slack for floating-point comparisons of objectives; the clustering
# objective is O(rows) with float64 roundoff many orders below this.
_OBJ_EPS = 1e-9


@dataclass(frozen=True)
class ClusterConfig:
    """K-Medoids parameters.

    ``tolerance`` is the minimum absolute decrease of the clustering
    objective between sweeps; a smaller improvement terminates the loop.
    ``init`` selects deterministic evenly-spaced initial medoids ("even")
    or a seeded distance-weighted choice ("kpp").
    """

    k: int = 16
    max_iterations: int = 60
    tolerance: float = 1e-5
    seed: int = 0
    init: str = "even"

    def __post_init__(self):
        if self.k < 1:
            raise InvariantError("k must be >= 1")
        if self.max_iterations < 1:
            raise InvariantError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise InvariantError("tolerance must be > 0")
        if self.init not in ("even", "kpp"):
            raise InvariantError(f"unknown init {self.init!r}, expected 'even' or 'kpp'")


@dataclass(frozen=True)
class KeyEventSet:
    """Result of key-event selection for one video.

    ``medoid_indices`` are ascending frame indices; ``assignments`` maps
    every frame to the cluster of one medoid; ``objective`` is the total
    cosine distance of frames to their medoids. ``objective_history``
    records the objective after the initial assignment and after each
    accepted step (sweep or medoid exchange), and is non-increasing.
    """

    medoid_indices: tuple[int, ...]
    assignments: tuple[int, ...]
    objective: float
    iterations_used: int
    objective_history: tuple[float, ...] = ()

    def __post_init__(self):
        k = len(self.medoid_indices)
        if k == 0:
            raise InvariantError("key event set has no medoids")
        if len(set(self.medoid_indices)) != k:
            raise InvariantError("medoid indices must be distinct")
        if any(b <= a for a, b in zip(self.medoid_indices, self.medoid_indices[1:])):
            raise InvariantError("medoid indices must be ascending")
        if any(not 0 <= a < k for a in self.assignments):
            raise InvariantError("assignment refers to a nonexistent cluster")
        for c, m in enumerate(self.medoid_indices):
            if m >= len(self.assignments):
                raise InvariantError(f"medoid index {m} outside the frame range")
            if self.assignments[m] != c:
                raise InvariantError(f"medoid {m} is not assigned to its own cluster {c}")
        if not (np.isfinite(self.objective) and self.objective >= -_OBJ_EPS):
            raise InvariantError("objective must be finite and non-negative")

    @property
    def k(self) -> int:
        return len(self.medoid_indices)

    def validate_for(self, frames: EmbeddingMatrix) -> None:
        """Check index ranges and the stored objective against ``frames``."""
        if len(self.assignments) != frames.rows:
            raise InvariantError(
                f"assignments cover {len(self.assignments)} frames, matrix has "
                f"{frames.rows}"
            )
        recomputed = clustering_objective(frames, self.medoid_indices, self.assignments)
        if abs(recomputed - self.objective) > _OBJ_EPS:
            raise InvariantError(
                f"stored objective {self.objective!r} differs from recomputed "
                f"{recomputed!r}"
            )


def clustering_objective(
    frames: EmbeddingMatrix | np.ndarray,
    medoid_indices,
    assignments,
) -> float:
    """Total cosine distance of every frame to its assigned medoid."""
    data = frames.data if isinstance(frames, EmbeddingMatrix) else np.asarray(frames)
    u = unit_rows(data.astype(np.float64), "frame")
    medoids = np.asarray(medoid_indices, dtype=int)
    assign = np.asarray(assignments, dtype=int)
    cos = np.einsum("ij,ij->i", u, u[medoids[assign]])
    return float(np.sum(1.0 - cos))


def _init_even(rows: int, k: int) -> np.ndarray:
    return np.array([(i * rows) // k for i in range(k)], dtype=int)


def _init_kpp(dist: np.ndarray, k: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = dist.shape[0]
    chosen = [int(rng.integers(n))]
    while len(chosen) < k:
        d = dist[:, chosen].min(axis=1)
        d[chosen] = 0.0
        weights = d * d
        total = weights.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen medoid
            nxt = min(i for i in range(n) if i not in chosen)
        else:
            nxt = int(rng.choice(n, p=weights / total))
        chosen.append(nxt)
    return np.array(sorted(chosen), dtype=int)


def _assign(dist: np.ndarray, medoids: np.ndarray) -> np.ndarray:
    """Nearest-medoid assignment; ties go to the lowest medoid index and
    each medoid always lands in its own cluster."""
    assign = np.argmin(dist[:, medoids], axis=1)
    assign[medoids] = np.arange(len(medoids))
    return assign


def _reseed_empty(dist: np.ndarray, medoids: np.ndarray, assign: np.ndarray) -> bool:
    """Repair clusters that lost every member.

    The medoid of an empty cluster is reseeded with the non-medoid frame
    farthest from it (ties to the lowest index). Returns True if any
    cluster was reseeded. Unreachable while medoids self-assign, but kept
    as a guard for externally supplied assignments.
    """
    repaired = False
    present = set(np.unique(assign).tolist())
    for c in range(len(medoids)):
        if c in present:
            continue
        candidates = np.setdiff1d(np.arange(dist.shape[0]), medoids)
        if candidates.size == 0:
            continue
        far = candidates[int(np.argmax(dist[medoids[c], candidates]))]
        medoids[c] = far
        repaired = True
    return repaired


def _update(dist: np.ndarray, k: int, assign: np.ndarray) -> np.ndarray:
    """Per cluster, pick the member minimizing total distance to the
    cluster; ties go to the lowest frame index."""
    new_medoids = np.empty(k, dtype=int)
    for c in range(k):
        members = np.flatnonzero(assign == c)
        costs = dist[np.ix_(members, members)].sum(axis=1)
        new_medoids[c] = members[int(np.argmin(costs))]
    return new_medoids


def _best_swap(dist: np.ndarray, medoids: np.ndarray) -> tuple[float, np.ndarray]:
    """Best single medoid/non-medoid exchange under nearest-medoid
    assignment; ties go to the earliest (cluster, frame) pair."""
    n = dist.shape[0]
    current = float(dist[:, medoids].min(axis=1).sum())
    best_gain = 0.0
    best = medoids
    others = np.setdiff1d(np.arange(n), medoids)
    trial = medoids.copy()
    for c in range(len(medoids)):
        for x in others:
            trial[c] = x
            gain = current - float(dist[:, trial].min(axis=1).sum())
            if gain > best_gain:
                best_gain = gain
                best = np.sort(trial)
        trial[c] = medoids[c]
    return best_gain, best


def select_key_events(frames: EmbeddingMatrix, config: ClusterConfig) -> KeyEventSet:
    """Cluster a video's frames and return its key-event medoids.

    With ``frames.rows <= config.k`` every frame is its own medoid
    (effective K clamps to the frame count). Otherwise alternates
    nearest-medoid assignment with in-cluster medoid updates; when a
    sweep improves the objective by less than ``config.tolerance``, the
    best single medoid/non-medoid exchange is tried, and an improving
    exchange restarts the alternation. The search stops once no exchange
    helps or ``config.max_iterations`` accepted steps have run, so the
    returned medoid set admits no improving single exchange whenever the
    budget was not exhausted. Deterministic for a fixed config; the
    objective never increases between accepted steps.
    """
    if frames.rows == 0:
        raise InvariantError("cannot select key events from an empty matrix")
    n = frames.rows
    if n <= config.k:
        return KeyEventSet(
            medoid_indices=tuple(range(n)),
            assignments=tuple(range(n)),
            objective=0.0,
            iterations_used=0,
            objective_history=(0.0,),
        )
    u = unit_rows(frames.data.astype(np.float64), "frame")
    dist = 1.0 - u @ u.T
    k = config.k
    if config.init == "even":
        medoids = _init_even(n, k)
    else:
        medoids = _init_kpp(dist, k, config.seed)
    assign = _assign(dist, medoids)
    obj = float(dist[np.arange(n), medoids[assign]].sum())
    history = [obj]
    iterations = 0
    while iterations < config.max_iterations:
        iterations += 1
        new_medoids = np.sort(_update(dist, k, assign))
        new_assign = _assign(dist, new_medoids)
        repaired = _reseed_empty(dist, new_medoids, new_assign)
        if repaired:
            new_medoids = np.sort(new_medoids)
            new_assign = _assign(dist, new_medoids)
        new_obj = float(dist[np.arange(n), new_medoids[new_assign]].sum())
        if not repaired and new_obj > obj + _OBJ_EPS:
            raise InvariantError(
                f"clustering objective increased from {obj!r} to {new_obj!r} "
                f"on sweep {iterations}"
            )
        improvement = obj - new_obj
        medoids, assign, obj = new_medoids, new_assign, new_obj
        history.append(obj)
        if improvement < config.tolerance:
            gain, swapped = _best_swap(dist, medoids)
            if gain <= _OBJ_EPS or iterations >= config.max_iterations:
                break
            iterations += 1
            medoids = swapped
            assign = _assign(dist, medoids)
            obj = float(dist[np.arange(n), medoids[assign]].sum())
            history.append(obj)
    return KeyEventSet(
        medoid_indices=tuple(int(m) for m in medoids),
        assignments=tuple(int(a) for a in assign),
        objective=obj,
        iterations_used=iterations,
        objective_history=tuple(history),
    )


def gather_key_embeddings(frames: EmbeddingMatrix, key: KeyEventSet) -> EmbeddingMatrix:
    """Rows of ``frames`` at the medoid indices, in medoid order."""
    for m in key.medoid_indices:
        if m >= frames.rows:
            raise InvariantError(
                f"medoid index {m} out of range for a {frames.rows}-frame matrix "
                f"(stale key event set?)"
            )
    return EmbeddingMatrix(frames.data[list(key.medoid_indices)])


# ---------------------------------------------------------------------------
# JSONL interchange
# ---------------------------------------------------------------------------


def save_key_events(path: str | Path, key_events: dict[str, KeyEventSet]) -> None:
    """Write one ``{"video", "medoids", "assignments", "objective",
    "iterations"}`` record per video, in mapping order."""
    lines = [
        json.dumps(
            {
                "video": vid,
                "medoids": list(key.medoid_indices),
                "assignments": list(key.assignments),
                "objective": key.objective,
                "iterations": key.iterations_used,
            },
            separators=(",", ":"),
        )
        for vid, key in key_events.items()
    ]
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def load_key_events(path: str | Path) -> dict[str, KeyEventSet]:
    """Read a key-events JSONL file back into KeyEventSet values."""
    out: dict[str, KeyEventSet] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path} line {lineno}: invalid JSON") from exc
            try:
                vid = record["video"]
                key = KeyEventSet(
                    medoid_indices=tuple(int(m) for m in record["medoids"]),
                    assignments=tuple(int(a) for a in record["assignments"]),
                    objective=float(record["objective"]),
                    iterations_used=int(record["iterations"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path} line {lineno}: malformed record ({exc})") from exc
            if vid in out:
                raise ManifestError(f"{path} line {lineno}: duplicate video {vid!r}")
            out[vid] = key
    return out
