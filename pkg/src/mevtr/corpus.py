"""Corpus data model and file formats.

A corpus is a set of videos, each carrying a sequence of per-frame feature
vectors and one or more caption texts, plus one feature vector per text.
Embeddings come from upstream encoders and are treated as opaque floats;
this module only stores, validates, and (for desk-scale work) synthesizes
them.

File formats
------------
Embedding file (``.emb``), little-endian throughout:

====  =====  ==========================================
byte  size   content
====  =====  ==========================================
0     5      magic ``MEVT1`` (ASCII)
5     4      dim, unsigned 32-bit
9     8      rows, unsigned 64-bit
17    4*n    rows x dim IEEE-754 float32, row-major
====  =====  ==========================================

Manifest (``.jsonl``), one JSON record per line:

* video: ``{"kind":"video","id":str,"emb":path,"duration_s":float,"texts":[str,...]}``
* text:  ``{"kind":"text","id":str,"emb":path,"row":int,"video":str}``

Paths are relative to the manifest's directory. Text records may share one
embedding file, selecting their vector with ``row`` (default 0).

Synthetic ground-truth sidecar (``<manifest>.labels.jsonl``):
``{"video":str,"frame_labels":[int,...]}`` with one event label per frame.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._vec import unit_rows, unit_vector
from .errors import EmbeddingFormatError, InvariantError, ManifestError

MAGIC = b"MEVT1"
_HEADER = struct.Struct("<5sIQ")  # magic, dim, rows
HEADER_SIZE = _HEADER.size  # 17 bytes


class EmbeddingMatrix:
    """Dense row-major float32 matrix, one feature vector per row.

    All values are finite; this is checked at construction. Instances are
    treated as immutable carriers for frame and text features.
    """

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise InvariantError(f"embedding matrix must be 2-D, got {arr.ndim}-D")
        if not np.isfinite(arr).all():
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise InvariantError(
                f"non-finite value at flat index {bad} of embedding matrix"
            )
        self.data = np.ascontiguousarray(arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def normalize(self) -> "EmbeddingMatrix":
        """Return a copy with every row scaled to unit L2 norm."""
        return EmbeddingMatrix(unit_rows(self.data, "embedding"))

    def row(self, i: int) -> np.ndarray:
        return self.data[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, EmbeddingMatrix) and np.array_equal(
            self.data, other.data
        )

    def __repr__(self) -> str:
        return f"EmbeddingMatrix(rows={self.rows}, dim={self.dim})"


def save_embeddings(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Write ``matrix`` to ``path`` in the binary embedding format.

    The write is atomic: bytes go to a temporary file in the target
    directory which is then renamed over ``path``. Invariant violations
    (empty matrix, non-finite values) are refused before any write.
    """
    if not isinstance(matrix, EmbeddingMatrix):
        raise InvariantError("save_embeddings expects an EmbeddingMatrix")
    if matrix.rows == 0:
        raise InvariantError("refusing to save empty embedding matrix (rows = 0)")
    if matrix.dim == 0:
        raise InvariantError("refusing to save embedding matrix with dim = 0")
    if not np.isfinite(matrix.data).all():
        raise InvariantError("refusing to save embedding matrix with non-finite values")
    path = Path(path)
    payload = np.ascontiguousarray(matrix.data, dtype="<f4").tobytes()
    blob = _HEADER.pack(MAGIC, matrix.dim, matrix.rows) + payload
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    """Read an embedding file; byte-identical round-trip with save_embeddings.

    Raises :class:`EmbeddingFormatError` naming the byte offset for bad
    magic, zero dim/rows, payload size mismatch, or a non-finite value.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < HEADER_SIZE:
        raise EmbeddingFormatError(
            f"{path}: truncated header, file has {len(blob)} bytes but the "
            f"header needs {HEADER_SIZE} (offset 0)"
        )
    magic, dim, rows = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise EmbeddingFormatError(
            f"{path}: bad magic {magic!r} at byte offset 0, expected {MAGIC!r}"
        )
    if dim == 0:
        raise EmbeddingFormatError(f"{path}: dim is 0 (byte offset 5)")
    if rows == 0:
        raise EmbeddingFormatError(f"{path}: rows is 0 (byte offset 9)")
    expected = HEADER_SIZE + rows * dim * 4
    if len(blob) != expected:
        kind = "truncated" if len(blob) < expected else "oversized"
        raise EmbeddingFormatError(
            f"{path}: {kind} payload, expected {expected} bytes total "
            f"but file has {len(blob)} (payload starts at offset {HEADER_SIZE})"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=HEADER_SIZE)
    finite = np.isfinite(flat)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise EmbeddingFormatError(
            f"{path}: non-finite value at byte offset {HEADER_SIZE + bad * 4}"
        )
    return EmbeddingMatrix(flat.reshape(rows, dim).copy())


@dataclass(frozen=True)
class VideoItem:
    """One video: its frame embeddings, duration, and positive text ids."""

    video_id: str
    frames: EmbeddingMatrix
    duration_seconds: float
    text_ids: tuple[str, ...]

    def __post_init__(self):
        if self.frames.rows < 1:
            raise InvariantError(f"video {self.video_id!r}: frames.rows must be >= 1")
        if not (np.isfinite(self.duration_seconds) and self.duration_seconds >= 0):
            raise InvariantError(
                f"video {self.video_id!r}: duration_seconds must be finite and >= 0"
            )
        if not self.text_ids:
            raise InvariantError(f"video {self.video_id!r}: text_ids must be non-empty")
        if len(set(self.text_ids)) != len(self.text_ids):
            raise InvariantError(f"video {self.video_id!r}: duplicate text ids")

    @property
    def event_count(self) -> int:
        return len(self.text_ids)


@dataclass(frozen=True)
class TextItem:
    """One caption text: its embedding and the video it describes."""

    text_id: str
    embedding: EmbeddingMatrix
    video_id: str

    def __post_init__(self):
        if self.embedding.rows != 1:
            raise InvariantError(
                f"text {self.text_id!r}: embedding must have exactly 1 row"
            )

    @property
    def vector(self) -> np.ndarray:
        return self.embedding.data[0]


@dataclass(frozen=True)
class Corpus:
    """Videos and texts with validated referential integrity.

    Ordering of both lists is preserved from the source (manifest order or
    generation order) and defines row/column order for score matrices.
    """

    videos: tuple[VideoItem, ...]
    texts: tuple[TextItem, ...]

    def __post_init__(self):
        object.__setattr__(self, "videos", tuple(self.videos))
        object.__setattr__(self, "texts", tuple(self.texts))
        if not self.videos:
            raise InvariantError("corpus has no videos")
        vids = [v.video_id for v in self.videos]
        if len(set(vids)) != len(vids):
            raise InvariantError("duplicate video ids in corpus")
        tids = [t.text_id for t in self.texts]
        if len(set(tids)) != len(tids):
            raise InvariantError("duplicate text ids in corpus")
        by_video: dict[str, list[str]] = {v: [] for v in vids}
        for t in self.texts:
            if t.video_id not in by_video:
                raise InvariantError(
                    f"text {t.text_id!r} references unknown video {t.video_id!r}"
                )
            by_video[t.video_id].append(t.text_id)
        for v in self.videos:
            if sorted(by_video[v.video_id]) != sorted(v.text_ids):
                raise InvariantError(
                    f"video {v.video_id!r}: text_ids do not match its text records"
                )
        dims = {v.frames.dim for v in self.videos} | {t.embedding.dim for t in self.texts}
        if len(dims) != 1:
            raise InvariantError(f"mixed embedding dims in corpus: {sorted(dims)}")
        object.__setattr__(self, "_video_index", {v: i for i, v in enumerate(vids)})
        object.__setattr__(self, "_text_index", {t: i for i, t in enumerate(tids)})

    @property
    def dim(self) -> int:
        return self.videos[0].frames.dim

    @property
    def video_ids(self) -> tuple[str, ...]:
        return tuple(v.video_id for v in self.videos)

    @property
    def text_ids(self) -> tuple[str, ...]:
        return tuple(t.text_id for t in self.texts)

    def video(self, video_id: str) -> VideoItem:
        return self.videos[self._video_index[video_id]]

    def text(self, text_id: str) -> TextItem:
        return self.texts[self._text_index[text_id]]

    def texts_of(self, video_id: str) -> list[TextItem]:
        """Texts of a video, in the video's text_ids order."""
        return [self.text(t) for t in self.video(video_id).text_ids]

    def text_matrix(self) -> np.ndarray:
        """All text vectors stacked in corpus text order."""
        return np.vstack([t.vector for t in self.texts])


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------


def _require(record: dict, key: str, lineno: int):
    if key not in record:
        raise ManifestError(f"line {lineno}: record is missing key {key!r}")
    return record[key]


def load_corpus(manifest_path: str | Path) -> Corpus:
    """Load a corpus from a ``.jsonl`` manifest.

    Referenced embedding files are resolved relative to the manifest and
    loaded once each. Errors (dangling references, duplicate ids, dim
    mismatches, malformed records) name the offending 1-based line number.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    cache: dict[str, EmbeddingMatrix] = {}
    dim_seen: int | None = None

    def load_file(rel: str, lineno: int) -> EmbeddingMatrix:
        nonlocal dim_seen
        if rel not in cache:
            target = base / rel
            if not target.is_file():
                raise ManifestError(
                    f"line {lineno}: embedding file {rel!r} not found at {target}"
                )
            cache[rel] = load_embeddings(target)
        mat = cache[rel]
        if dim_seen is None:
            dim_seen = mat.dim
        elif mat.dim != dim_seen:
            raise ManifestError(
                f"line {lineno}: embedding file {rel!r} has dim {mat.dim}, "
                f"expected {dim_seen}"
            )
        return mat

    videos: list[VideoItem] = []
    video_lines: dict[str, int] = {}
    raw_texts: list[tuple[int, str, str, EmbeddingMatrix]] = []
    text_lines: dict[str, int] = {}

    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc})") from exc
            if not isinstance(record, dict):
                raise ManifestError(f"line {lineno}: record must be a JSON object")
            kind = _require(record, "kind", lineno)
            if kind == "video":
                vid = _require(record, "id", lineno)
                if vid in video_lines:
                    raise ManifestError(
                        f"line {lineno}: duplicate video id {vid!r} "
                        f"(first seen on line {video_lines[vid]})"
                    )
                video_lines[vid] = lineno
                frames = load_file(_require(record, "emb", lineno), lineno)
                texts = _require(record, "texts", lineno)
                if not isinstance(texts, list) or not all(
                    isinstance(t, str) for t in texts
                ):
                    raise ManifestError(f"line {lineno}: 'texts' must be a string list")
                if len(set(texts)) != len(texts):
                    raise ManifestError(
                        f"line {lineno}: video {vid!r} lists duplicate text ids"
                    )
                try:
                    videos.append(
                        VideoItem(
                            video_id=vid,
                            frames=frames,
                            duration_seconds=float(_require(record, "duration_s", lineno)),
                            text_ids=tuple(texts),
                        )
                    )
                except InvariantError as exc:
                    raise ManifestError(f"line {lineno}: {exc}") from exc
            elif kind == "text":
                tid = _require(record, "id", lineno)
                if tid in text_lines:
                    raise ManifestError(
                        f"line {lineno}: duplicate text id {tid!r} "
                        f"(first seen on line {text_lines[tid]})"
                    )
                text_lines[tid] = lineno
                mat = load_file(_require(record, "emb", lineno), lineno)
                row = record.get("row", 0)
                if not isinstance(row, int) or not 0 <= row < mat.rows:
                    raise ManifestError(
                        f"line {lineno}: text {tid!r} row {row!r} out of range "
                        f"for a {mat.rows}-row file"
                    )
                raw_texts.append(
                    (lineno, tid, _require(record, "video", lineno), mat.data[row])
                )
            else:
                raise ManifestError(f"line {lineno}: unknown record kind {kind!r}")

    texts_out: list[TextItem] = []
    declared: dict[str, set[str]] = {v.video_id: set(v.text_ids) for v in videos}
    for lineno, tid, vid, vec in raw_texts:
        if vid not in declared:
            raise ManifestError(
                f"line {lineno}: text {tid!r} references unknown video {vid!r}"
            )
        if tid not in declared[vid]:
            raise ManifestError(
                f"line {lineno}: text {tid!r} is not listed in the texts of "
                f"video {vid!r}"
            )
        texts_out.append(TextItem(tid, EmbeddingMatrix(vec), vid))
    for v in videos:
        present = {t.text_id for t in texts_out if t.video_id == v.video_id}
        missing = [t for t in v.text_ids if t not in present]
        if missing:
            raise ManifestError(
                f"line {video_lines[v.video_id]}: video {v.video_id!r} declares "
                f"text {missing[0]!r} but the manifest has no such text record"
            )
    try:
        return Corpus(tuple(videos), tuple(texts_out))
    except InvariantError as exc:
        raise ManifestError(str(exc)) from exc


def _atomic_write_text(path: Path, content: str) -> None:
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def labels_path_for(manifest_path: str | Path) -> Path:
    """Sidecar path holding ground-truth frame labels for a manifest."""
    manifest_path = Path(manifest_path)
    return manifest_path.with_name(manifest_path.stem + ".labels.jsonl")


def save_corpus(
    corpus: Corpus,
    out_dir: str | Path,
    frame_labels: dict[str, list[int]] | None = None,
    manifest_name: str = "manifest.jsonl",
) -> Path:
    """Write a corpus as manifest + embedding files under ``out_dir``.

    Layout: ``emb/<video_id>.emb`` per video, one shared ``emb/texts.emb``
    for all texts (referenced by row), and optionally the frame-label
    sidecar next to the manifest. Output bytes are a pure function of the
    corpus, so identical corpora produce identical trees.
    """
    out_dir = Path(out_dir)
    emb_dir = out_dir / "emb"
    emb_dir.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []
    for v in corpus.videos:
        rel = f"emb/{v.video_id}.emb"
        save_embeddings(v.frames, out_dir / rel)
        lines.append(
            json.dumps(
                {
                    "kind": "video",
                    "id": v.video_id,
                    "emb": rel,
                    "duration_s": float(v.duration_seconds),
                    "texts": list(v.text_ids),
                },
                separators=(",", ":"),
            )
        )
    text_mat = EmbeddingMatrix(corpus.text_matrix())
    save_embeddings(text_mat, emb_dir / "texts.emb")
    for row, t in enumerate(corpus.texts):
        lines.append(
            json.dumps(
                {
                    "kind": "text",
                    "id": t.text_id,
                    "emb": "emb/texts.emb",
                    "row": row,
                    "video": t.video_id,
                },
                separators=(",", ":"),
            )
        )
    manifest_path = out_dir / manifest_name
    _atomic_write_text(manifest_path, "\n".join(lines) + "\n")
    if frame_labels is not None:
        label_lines = [
            json.dumps(
                {"video": v.video_id, "frame_labels": list(map(int, frame_labels[v.video_id]))},
                separators=(",", ":"),
            )
            for v in corpus.videos
        ]
        _atomic_write_text(labels_path_for(manifest_path), "\n".join(label_lines) + "\n")
    return manifest_path


def load_labels(manifest_path: str | Path) -> dict[str, list[int]]:
    """Read the ground-truth frame-label sidecar of a manifest."""
    path = labels_path_for(manifest_path)
    labels: dict[str, list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path} line {lineno}: invalid JSON") from exc
            labels[record["video"]] = [int(x) for x in record["frame_labels"]]
    return labels


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Configuration for the seeded multi-event corpus generator.

    Each video gets E latent unit "event anchors" (E drawn from
    ``events_per_video``), placed by rejection sampling until all pairwise
    cosine similarities are at most ``1 - event_separation``. Every event
    contributes a run of frame embeddings (anchor plus Gaussian noise,
    renormalized) and exactly one text embedding (anchor plus independent
    noise, renormalized).
    """

    n_videos: int = 12
    events_per_video: tuple[int, int] = (3, 5)
    frames_per_event: tuple[int, int] = (4, 8)
    dim: int = 16
    event_separation: float = 0.8
    noise_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise InvariantError("dim must be >= 2")
        if self.n_videos < 1:
            raise InvariantError("n_videos must be >= 1")
        for name in ("events_per_video", "frames_per_event"):
            lo, hi = getattr(self, name)
            if not (1 <= lo <= hi):
                raise InvariantError(f"{name} range ({lo}, {hi}) is empty or invalid")
        if not 0.0 <= self.event_separation <= 1.0:
            raise InvariantError("event_separation must be in [0, 1]")
        if not (np.isfinite(self.noise_scale) and self.noise_scale >= 0):
            raise InvariantError("noise_scale must be finite and >= 0")


_ANCHOR_ATTEMPTS = 1000  # rejection-sampling budget per anchor


def _sample_anchors(
    rng: np.random.Generator, count: int, dim: int, separation: float
) -> np.ndarray:
    max_cos = 1.0 - separation
    anchors: list[np.ndarray] = []
    for _ in range(count):
        for _attempt in range(_ANCHOR_ATTEMPTS):
            cand = unit_vector(rng.standard_normal(dim))
            if not anchors or float(np.max(np.stack(anchors) @ cand)) <= max_cos:
                anchors.append(cand)
                break
        else:
            raise InvariantError(
                f"could not place {count} event anchors with pairwise cosine "
                f"<= {max_cos:g} in dim {dim}; lower event_separation or the "
                f"event count, or raise dim"
            )
    return np.stack(anchors)


def generate_synthetic(
    config: SyntheticConfig,
) -> tuple[Corpus, dict[str, list[int]]]:
    """Generate a seeded multi-event corpus plus ground-truth frame labels.

    Deterministic for a fixed config (including seed). With
    ``noise_scale == 0`` frames and texts equal their event anchors
    exactly, so each video holds exactly E distinct frame rows.
    """
    rng = np.random.default_rng(config.seed)
    e_lo, e_hi = config.events_per_video
    f_lo, f_hi = config.frames_per_event
    videos: list[VideoItem] = []
    texts: list[TextItem] = []
    labels: dict[str, list[int]] = {}
    for vi in range(config.n_videos):
        vid = f"v{vi:03d}"
        n_events = int(rng.integers(e_lo, e_hi + 1))
        anchors = _sample_anchors(rng, n_events, config.dim, config.event_separation)
        frame_rows: list[np.ndarray] = []
        frame_labels: list[int] = []
        text_rows: list[np.ndarray] = []
        for e in range(n_events):
            n_frames = int(rng.integers(f_lo, f_hi + 1))
            if config.noise_scale == 0.0:
                frame_rows.append(np.tile(anchors[e], (n_frames, 1)))
                text_rows.append(anchors[e])
            else:
                noisy = anchors[e] + config.noise_scale * rng.standard_normal(
                    (n_frames, config.dim)
                )
                frame_rows.append(unit_rows(noisy))
                text_rows.append(
                    unit_vector(
                        anchors[e]
                        + config.noise_scale * rng.standard_normal(config.dim)
                    )
                )
            frame_labels.extend([e] * n_frames)
        frames = np.vstack(frame_rows)
        duration = float(frames.shape[0] * rng.uniform(2.0, 10.0))
        text_ids = tuple(f"{vid}-t{e}" for e in range(n_events))
        videos.append(
            VideoItem(
                video_id=vid,
                frames=EmbeddingMatrix(frames),
                duration_seconds=duration,
                text_ids=text_ids,
            )
        )
        for e, tid in enumerate(text_ids):
            texts.append(TextItem(tid, EmbeddingMatrix(text_rows[e]), vid))
        labels[vid] = frame_labels
    return Corpus(tuple(videos), tuple(texts)), labels
