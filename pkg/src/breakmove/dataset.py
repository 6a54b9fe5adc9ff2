"""Embedding datasets: labels, windows, manifests, splits and synthetic data."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import tensorio
from .errors import (
    BadAnnotation,
    CorruptFile,
    DataError,
    DimMismatch,
    EmptyInput,
    InvalidArgument,
    MissingFile,
    NonFiniteValue,
    SegmentCountMismatch,
    UnknownVideoId,
    WindowCountMismatch,
)
from .rng import substream

DEFAULT_WINDOW_SEC = 10.0
DEFAULT_STRIDE_SEC = 5.0
DEFAULT_MIN_COVERAGE = 0.5


class Label(enum.IntEnum):
    POWERMOVE = 0
    FOOTWORK = 1
    TOPROCK = 2
    NONE = 3

    @property
    def text(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: str | int | "Label") -> "Label":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise BadAnnotation(f"unknown label {value!r}") from None


NUM_CLASSES = len(Label)
MOVE_LABELS = (Label.POWERMOVE, Label.FOOTWORK, Label.TOPROCK)


@dataclass(frozen=True)
class SegmentAnnotation:
    video_id: str
    start_sec: float
    end_sec: float
    label: Label

    def __post_init__(self):
        if not (self.start_sec >= 0 and self.end_sec > self.start_sec):
            raise BadAnnotation(
                f"{self.video_id}: segment [{self.start_sec}, {self.end_sec}) is empty or negative"
            )
        if self.label not in MOVE_LABELS:
            raise BadAnnotation(f"{self.video_id}: segments must carry a move label, got {self.label.text}")


def num_windows_for(duration_sec: float, window_sec: float, stride_sec: float) -> int:
    """``floor((duration - window) / stride) + 1``; 0 when the video is shorter than one window."""
    if duration_sec < window_sec:
        return 0
    # tolerance keeps e.g. (20 - 10) / 5 from flooring to 1.999...
    return int(math.floor((duration_sec - window_sec) / stride_sec + 1e-9)) + 1


@dataclass(frozen=True, eq=False)
class VideoEmbeddings:
    video_id: str
    encoder_name: str
    fps: float
    duration_sec: float
    rows: np.ndarray  # (num_windows, num_sub, d), float32
    window_sec: float = DEFAULT_WINDOW_SEC
    stride_sec: float = DEFAULT_STRIDE_SEC
    embeddings_file: str | None = None

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim == 2:
            rows = rows[:, None, :]
        if rows.ndim != 3:
            raise DataError(f"{self.video_id}: embeddings must be 2D or 3D, got shape {rows.shape}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        if self.fps <= 0 or self.window_sec <= 0 or self.stride_sec <= 0:
            raise DataError(f"{self.video_id}: fps, window_sec and stride_sec must be positive")
        expected = self.num_windows
        if expected < 1:
            raise WindowCountMismatch(
                f"{self.video_id}: duration {self.duration_sec}s is shorter than one {self.window_sec}s window"
            )
        if rows.shape[0] != expected:
            raise WindowCountMismatch(
                f"{self.video_id}: {rows.shape[0]} embedding rows but duration/window/stride imply {expected}"
            )
        if not np.all(np.isfinite(rows)):
            raise NonFiniteValue(f"{self.video_id}: embeddings contain NaN or Inf")

    @property
    def dim(self) -> int:
        return int(self.rows.shape[2])

    @property
    def num_sub(self) -> int:
        return int(self.rows.shape[1])

    @property
    def num_windows(self) -> int:
        return num_windows_for(self.duration_sec, self.window_sec, self.stride_sec)

    @property
    def num_frames(self) -> int:
        return int(round(self.duration_sec * self.fps))

    def window_span(self, index: int) -> tuple[float, float]:
        start = index * self.stride_sec
        return start, start + self.window_sec


@dataclass(frozen=True)
class LabeledWindow:
    video_id: str
    index: int
    start_sec: float
    end_sec: float
    embedding: np.ndarray
    label: Label


@dataclass(frozen=True, eq=False)
class EmbeddingDataset:
    videos: tuple[VideoEmbeddings, ...]
    annotations: tuple[SegmentAnnotation, ...] = ()
    expected_segments: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "videos", tuple(self.videos))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        ids = [v.video_id for v in self.videos]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate video ids in dataset")
        dims = {v.dim for v in self.videos}
        if len(dims) > 1:
            raise DimMismatch(f"videos disagree on embedding dim: {sorted(dims)}")
        encoders = {v.encoder_name for v in self.videos}
        if len(encoders) > 1:
            raise DataError(f"videos come from different encoders: {sorted(encoders)}")
        known = set(ids)
        for ann in self.annotations:
            if ann.video_id not in known:
                raise UnknownVideoId(f"annotation refers to unknown video {ann.video_id!r}")
        if self.expected_segments is not None and len(self.annotations) != self.expected_segments:
            raise SegmentCountMismatch(
                f"manifest declares {self.expected_segments} segments, annotations have {len(self.annotations)}"
            )

    @property
    def dim(self) -> int | None:
        return self.videos[0].dim if self.videos else None

    @property
    def encoder_name(self) -> str | None:
        return self.videos[0].encoder_name if self.videos else None

    @property
    def video_ids(self) -> list[str]:
        return [v.video_id for v in self.videos]

    def video(self, video_id: str) -> VideoEmbeddings:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise UnknownVideoId(f"unknown video id {video_id!r}")

    def annotations_for(self, video_id: str) -> list[SegmentAnnotation]:
        return [a for a in self.annotations if a.video_id == video_id]

    def subset(self, video_ids: Iterable[str]) -> "EmbeddingDataset":
        keep = set(video_ids)
        return EmbeddingDataset(
            videos=tuple(v for v in self.videos if v.video_id in keep),
            annotations=tuple(a for a in self.annotations if a.video_id in keep),
        )

    def __len__(self) -> int:
        return len(self.videos)


# ---------------------------------------------------------------------------
# window labelling


def pool_subembeddings(window_rows: np.ndarray, mode: str = "mean") -> np.ndarray:
    """Collapse the sub-window axis (second to last) into one vector per window.

    Accepts a single ``(num_sub, d)`` window or a stack ``(n, num_sub, d)``.
    """
    rows = np.asarray(window_rows, dtype=np.float64)
    if rows.ndim < 2 or rows.shape[-2] == 0:
        raise EmptyInput("pooling needs at least one sub-embedding")
    if mode == "mean":
        return rows.mean(axis=-2)
    if mode == "max":
        return rows.max(axis=-2)
    raise InvalidArgument(f"unknown pooling mode {mode!r}")


def resolve_overlaps(annotations: Iterable[SegmentAnnotation]) -> list[SegmentAnnotation]:
    """Make segments within each video disjoint; the earlier-starting segment wins."""
    out: list[SegmentAnnotation] = []
    by_video: dict[str, list[SegmentAnnotation]] = {}
    for ann in annotations:
        by_video.setdefault(ann.video_id, []).append(ann)
    for video_id, anns in by_video.items():
        anns.sort(key=lambda a: (a.start_sec, a.end_sec, int(a.label)))
        covered_until = -math.inf
        for ann in anns:
            start = max(ann.start_sec, covered_until)
            if ann.end_sec > start:
                out.append(SegmentAnnotation(video_id, start, ann.end_sec, ann.label))
                covered_until = ann.end_sec
    return out


def assign_window_label(
    start_sec: float,
    end_sec: float,
    annotations: Sequence[SegmentAnnotation],
    min_coverage: float = DEFAULT_MIN_COVERAGE,
) -> Label:
    """Label of the move with the largest total overlap, if it covers enough of the window.

    Overlap is summed per label. Ties go to the lower label index. Windows
    where no move reaches ``min_coverage * (end - start)`` seconds are ``NONE``.
    """
    length = end_sec - start_sec
    if length <= 0:
        return Label.NONE
    overlap = np.zeros(NUM_CLASSES)
    for ann in annotations:
        overlap[int(ann.label)] += max(0.0, min(end_sec, ann.end_sec) - max(start_sec, ann.start_sec))
    best = int(np.argmax(overlap[: len(MOVE_LABELS)]))
    if overlap[best] <= 0 or overlap[best] < min_coverage * length:
        return Label.NONE
    return Label(best)


def label_at(t: float, annotations: Sequence[SegmentAnnotation]) -> Label:
    for ann in annotations:
        if ann.start_sec <= t < ann.end_sec:
            return ann.label
    return Label.NONE


@dataclass(frozen=True, eq=False)
class WindowTable:
    """All windows of a dataset as flat arrays (embeddings promoted to float64)."""

    X: np.ndarray
    y: np.ndarray
    video_ids: np.ndarray
    index: np.ndarray
    start_sec: np.ndarray
    end_sec: np.ndarray

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def take(self, idx) -> "WindowTable":
        return WindowTable(
            self.X[idx], self.y[idx], self.video_ids[idx], self.index[idx], self.start_sec[idx], self.end_sec[idx]
        )


def window_table(
    dataset: EmbeddingDataset, pool: str = "mean", min_coverage: float = DEFAULT_MIN_COVERAGE
) -> WindowTable:
    xs, ys, vids, idx, starts, ends = [], [], [], [], [], []
    dim = dataset.dim or 0
    for video in dataset.videos:
        anns = dataset.annotations_for(video.video_id)
        xs.append(pool_subembeddings(video.rows, pool))
        for i in range(video.num_windows):
            s, e = video.window_span(i)
            ys.append(int(assign_window_label(s, e, anns, min_coverage)))
            vids.append(video.video_id)
            idx.append(i)
            starts.append(s)
            ends.append(e)
    X = np.concatenate(xs, axis=0) if xs else np.zeros((0, dim))
    return WindowTable(
        X=X,
        y=np.asarray(ys, dtype=np.int64),
        video_ids=np.asarray(vids, dtype=object),
        index=np.asarray(idx, dtype=np.int64),
        start_sec=np.asarray(starts, dtype=np.float64),
        end_sec=np.asarray(ends, dtype=np.float64),
    )


def labeled_windows(
    dataset: EmbeddingDataset, pool: str = "mean", min_coverage: float = DEFAULT_MIN_COVERAGE
) -> Iterator[LabeledWindow]:
    table = window_table(dataset, pool, min_coverage)
    for k in range(len(table)):
        yield LabeledWindow(
            video_id=table.video_ids[k],
            index=int(table.index[k]),
            start_sec=float(table.start_sec[k]),
            end_sec=float(table.end_sec[k]),
            embedding=table.X[k],
            label=Label(int(table.y[k])),
        )


# ---------------------------------------------------------------------------
# splits


def split_train_test(dataset: EmbeddingDataset, test_ids: Iterable[str]) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    test_ids = list(test_ids)
    known = set(dataset.video_ids)
    missing = [t for t in test_ids if t not in known]
    if missing:
        raise UnknownVideoId(f"test ids not in dataset: {missing}")
    test = set(test_ids)
    train_ids = [v for v in dataset.video_ids if v not in test]
    return dataset.subset(train_ids), dataset.subset(test_ids)


def read_split_file(path) -> list[str]:
    """One test video id per line; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"split file not found: {path}")
    ids = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            ids.append(line)
    return ids


def write_split_file(path, test_ids: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{t}\n" for t in test_ids), encoding="utf-8")


# ---------------------------------------------------------------------------
# on-disk format


def read_annotations(path) -> list[SegmentAnnotation]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"annotations file not found: {path}")
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["video_id", "start_sec", "end_sec", "label"]:
            raise BadAnnotation(f"{path}: header must be video_id,start_sec,end_sec,label")
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(
                    SegmentAnnotation(
                        row["video_id"], float(row["start_sec"]), float(row["end_sec"]), Label.parse(row["label"])
                    )
                )
            except (TypeError, ValueError) as exc:
                raise BadAnnotation(f"{path}:{lineno}: {exc}") from None
    return out


def write_annotations(path, annotations: Iterable[SegmentAnnotation]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["video_id", "start_sec", "end_sec", "label"])
        for a in annotations:
            writer.writerow([a.video_id, repr(float(a.start_sec)), repr(float(a.end_sec)), a.label.text])


def load_manifest(manifest_path) -> EmbeddingDataset:
    """Load and validate a dataset described by ``manifest.json``.

    Besides the per-video fields the manifest may name an ``annotations`` CSV
    (default: ``annotations.csv`` beside the manifest, if present) and a
    ``num_segments`` count that the annotations must match.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise MissingFile(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{manifest_path}: invalid JSON ({exc})") from None
    root = manifest_path.parent
    try:
        dim = int(manifest["dim"])
        encoder = str(manifest["encoder"])
        entries = manifest["videos"]
    except (KeyError, TypeError) as exc:
        raise CorruptFile(f"{manifest_path}: missing required key {exc}") from None

    videos = []
    for entry in entries:
        try:
            video_id = str(entry["id"])
            rel = entry["embeddings_file"]
            fps = float(entry["fps"])
            duration = float(entry["duration_sec"])
        except (KeyError, TypeError) as exc:
            raise CorruptFile(f"{manifest_path}: video entry missing key {exc}") from None
        window = float(entry.get("window_sec", DEFAULT_WINDOW_SEC))
        stride = float(entry.get("stride_sec", DEFAULT_STRIDE_SEC))
        num_sub = int(entry.get("num_sub", 1))
        rows = tensorio.load_embeddings(root / rel)
        if rows.shape[2] != dim:
            raise DimMismatch(f"{video_id}: manifest dim {dim} but {rel} has {rows.shape[2]} columns")
        if rows.shape[1] != num_sub:
            raise WindowCountMismatch(f"{video_id}: manifest num_sub {num_sub} but {rel} has {rows.shape[1]}")
        videos.append(
            VideoEmbeddings(
                video_id=video_id,
                encoder_name=encoder,
                fps=fps,
                duration_sec=duration,
                rows=rows,
                window_sec=window,
                stride_sec=stride,
                embeddings_file=rel,
            )
        )

    ann_rel = manifest.get("annotations")
    if ann_rel is not None:
        annotations = read_annotations(root / ann_rel)
    elif (root / "annotations.csv").is_file():
        annotations = read_annotations(root / "annotations.csv")
    else:
        annotations = []
    expected = manifest.get("num_segments")
    # count is checked on the raw file, overlap resolution may merge segments
    if expected is not None and len(annotations) != int(expected):
        raise SegmentCountMismatch(
            f"manifest declares {expected} segments, annotations have {len(annotations)}"
        )
    return EmbeddingDataset(videos=tuple(videos), annotations=tuple(resolve_overlaps(annotations)))


def write_manifest(dataset: EmbeddingDataset, out_dir, num_segments: bool = False) -> Path:
    """Write manifest.json, one ``EMB1`` file per video and annotations.csv."""
    out_dir = Path(out_dir)
    (out_dir / "embeddings").mkdir(parents=True, exist_ok=True)
    entries = []
    for v in dataset.videos:
        rel = v.embeddings_file or f"embeddings/{v.video_id}.emb"
        target = out_dir / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        tensorio.save_embeddings(target, v.rows)
        entries.append(
            {
                "id": v.video_id,
                "fps": v.fps,
                "duration_sec": v.duration_sec,
                "window_sec": v.window_sec,
                "stride_sec": v.stride_sec,
                "num_sub": v.num_sub,
                "embeddings_file": rel,
            }
        )
    manifest = {"dim": dataset.dim, "encoder": dataset.encoder_name, "videos": entries}
    manifest["annotations"] = "annotations.csv"
    if num_segments:
        manifest["num_segments"] = len(dataset.annotations)
    write_annotations(out_dir / "annotations.csv", dataset.annotations)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# synthetic data


def class_means(num_classes: int, d: int, separation: float) -> np.ndarray:
    """Class centres on scaled basis vectors, pairwise distance ``separation``."""
    means = np.zeros((num_classes, d))
    means[np.arange(num_classes), np.arange(num_classes)] = separation / math.sqrt(2.0)
    return means


def _run_lengths(total: int, rng: np.random.Generator) -> list[int]:
    # runs of >= 2 windows keep every window's own label the majority overlap
    if total == 1:
        return [1]
    runs = []
    remaining = total
    while remaining > 0:
        n = int(rng.integers(2, 5))
        if remaining - n == 1:
            n += 1
        n = min(n, remaining)
        runs.append(n)
        remaining -= n
    return runs


def gen_synthetic(
    num_classes: int,
    d: int,
    videos: int,
    windows_per_video: int,
    class_separation: float,
    seed: int,
    *,
    noise: float = 1.0,
    fps: float = 2.0,
    encoder_name: str = "synthetic",
) -> EmbeddingDataset:
    """Gaussian class clusters laid out as windowed videos.

    Each video is a sequence of class runs. Annotation boundaries sit at the
    quarter points between window centres, so every window's largest-overlap
    label is the class its embedding was drawn from. With ``num_classes == 4``
    the fourth class is ``NONE`` and is left unannotated.
    """
    if not 1 <= num_classes <= NUM_CLASSES:
        raise InvalidArgument(f"num_classes must be in 1..{NUM_CLASSES}, got {num_classes}")
    if d < num_classes:
        raise InvalidArgument(f"d={d} must be at least num_classes={num_classes}")
    if videos < 1 or windows_per_video < 1:
        raise InvalidArgument("videos and windows_per_video must be positive")
    if class_separation < 0 or noise < 0:
        raise InvalidArgument("class_separation and noise must be non-negative")

    rng = substream(seed, "data")
    means = class_means(num_classes, d, class_separation)
    window, stride = DEFAULT_WINDOW_SEC, DEFAULT_STRIDE_SEC
    duration = window + stride * (windows_per_video - 1)
    out_videos, annotations = [], []
    for v in range(videos):
        video_id = f"synth_{v:03d}"
        classes = []
        for n in _run_lengths(windows_per_video, rng):
            classes.extend([int(rng.integers(num_classes))] * n)
        rows = means[classes] + noise * rng.standard_normal((windows_per_video, d))
        # window i owns [stride*i + stride/2, stride*i + 3*stride/2), ends stretched to the video edges
        edges = [stride * i + stride / 2 for i in range(windows_per_video + 1)]
        edges[0], edges[-1] = 0.0, duration
        i = 0
        while i < windows_per_video:
            j = i
            while j + 1 < windows_per_video and classes[j + 1] == classes[i]:
                j += 1
            if Label(classes[i]) != Label.NONE:
                annotations.append(SegmentAnnotation(video_id, edges[i], edges[j + 1], Label(classes[i])))
            i = j + 1
        out_videos.append(
            VideoEmbeddings(
                video_id=video_id,
                encoder_name=encoder_name,
                fps=fps,
                duration_sec=duration,
                rows=rows.astype(np.float32)[:, None, :],
                window_sec=window,
                stride_sec=stride,
            )
        )
    return EmbeddingDataset(videos=tuple(out_videos), annotations=tuple(annotations))
