"""Frame-level scoring of windowed predictions.

Frame ``f`` of a video is stamped at its temporal midpoint ``(f + 0.5) / fps``.
Overlapping windows vote for a shared frame through a selection rule:
``nearest-center`` (default, ties to the earlier window) or
``latest-window`` (the covering window that starts last).
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import NUM_CLASSES, EmbeddingDataset, Label, SegmentAnnotation, VideoEmbeddings
from .errors import CorruptFile, EmptyInput, InvalidArgument, MissingFile, MissingMeta

FRAME_RULES = ("nearest-center", "latest-window")
FRAME_MODES = ("all", "annotated")


@dataclass(frozen=True)
class WindowPrediction:
    video_id: str
    start_sec: float
    end_sec: float
    pred: Label
    source: str = "encoder"
    raw_text: str | None = None
    parse_ok: bool = True

    def __post_init__(self):
        if not self.end_sec > self.start_sec:
            raise InvalidArgument(f"{self.video_id}: prediction window [{self.start_sec}, {self.end_sec}) is empty")


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    duration_sec: float
    fps: float

    @property
    def num_frames(self) -> int:
        return int(round(self.duration_sec * self.fps))

    @classmethod
    def of(cls, video: VideoEmbeddings) -> "VideoMeta":
        return cls(video.video_id, video.duration_sec, video.fps)


@dataclass(frozen=True, eq=False)
class FrameSeries:
    video_id: str
    fps: float
    gt: np.ndarray
    pred: np.ndarray

    def __len__(self) -> int:
        return int(self.gt.shape[0])


@dataclass
class AccuracyReport:
    overall: float
    per_video_mean: float
    per_video_std: float
    confusion: np.ndarray  # rows: ground truth, columns: prediction
    per_video: dict[str, float] = field(default_factory=dict)
    num_frames: int = 0
    parse_failures: int = 0
    num_predictions: int = 0
    mode: str = "all"
    std: str = "population"

    def table_row(self) -> str:
        """``overall`` and ``mean ± std`` rendered to two decimals."""
        return f"{self.overall:.2f}\t{self.per_video_mean:.2f} ± {self.per_video_std:.2f}"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["confusion"] = self.confusion.astype(int).tolist()
        out["labels"] = [lab.text for lab in Label]
        out["metadata"] = {
            "frame_mode": self.mode,
            "per_video_std": self.std,
            "frame_timestamp": "midpoint",
        }
        return out


def frame_times(num_frames: int, fps: float) -> np.ndarray:
    return (np.arange(num_frames, dtype=np.float64) + 0.5) / fps


def ground_truth_frames(meta: VideoMeta, annotations: Sequence[SegmentAnnotation]) -> np.ndarray:
    t = frame_times(meta.num_frames, meta.fps)
    gt = np.full(t.shape, int(Label.NONE), dtype=np.int64)
    # reversed so that, on overlap, the first listed segment wins
    for ann in reversed([a for a in annotations if a.video_id == meta.video_id]):
        gt[(t >= ann.start_sec) & (t < ann.end_sec)] = int(ann.label)
    return gt


def _resolve_meta(meta) -> VideoMeta:
    if isinstance(meta, VideoEmbeddings):
        return VideoMeta.of(meta)
    if isinstance(meta, VideoMeta):
        if not (meta.fps > 0 and meta.duration_sec >= 0):
            raise MissingMeta(f"{meta.video_id}: invalid fps or duration")
        return meta
    raise MissingMeta("video metadata (duration, fps) is required")


def windows_to_frames(
    preds: Iterable[WindowPrediction],
    meta: VideoMeta | VideoEmbeddings | None,
    annotations: Sequence[SegmentAnnotation] = (),
    rule: str = "nearest-center",
) -> FrameSeries:
    """Expand window predictions onto the frame grid of one video.

    Frames covered by no window predict ``NONE``.
    """
    meta = _resolve_meta(meta)
    if rule not in FRAME_RULES:
        raise InvalidArgument(f"unknown frame rule {rule!r}")
    mine = [p for p in preds if p.video_id == meta.video_id]
    # stable sort: equal starts keep input order
    mine.sort(key=lambda p: p.start_sec)
    t = frame_times(meta.num_frames, meta.fps)
    pred = np.full(t.shape, int(Label.NONE), dtype=np.int64)
    if mine and t.size:
        starts = np.array([p.start_sec for p in mine])
        ends = np.array([p.end_sec for p in mine])
        labels = np.array([int(p.pred) for p in mine])
        covered = (starts[None, :] <= t[:, None]) & (t[:, None] < ends[None, :])
        if rule == "nearest-center":
            dist = np.abs((starts + ends)[None, :] / 2.0 - t[:, None])
            choice = np.argmin(np.where(covered, dist, np.inf), axis=1)
        else:
            # last covering window in sorted order
            order = np.where(covered, np.arange(len(mine))[None, :], -1)
            choice = np.max(order, axis=1)
        hit = covered.any(axis=1)
        pred[hit] = labels[choice[hit]]
    return FrameSeries(meta.video_id, meta.fps, ground_truth_frames(meta, annotations), pred)


def frame_accuracy(series: Sequence[FrameSeries], mode: str = "all") -> AccuracyReport:
    """Pooled frame accuracy plus the mean and population std over videos.

    ``mode="annotated"`` scores only frames whose ground truth is a move.
    """
    if mode not in FRAME_MODES:
        raise InvalidArgument(f"unknown frame mode {mode!r}")
    if not series:
        raise EmptyInput("frame_accuracy needs at least one video")
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    per_video = {}
    for s in series:
        keep = s.gt != int(Label.NONE) if mode == "annotated" else np.ones(len(s), dtype=bool)
        gt, pred = s.gt[keep], s.pred[keep]
        if gt.size == 0:
            continue
        np.add.at(confusion, (gt, pred), 1)
        per_video[s.video_id] = float(np.mean(gt == pred))
    total = int(confusion.sum())
    if total == 0:
        raise EmptyInput("no frames to score")
    accs = np.array(list(per_video.values()))
    return AccuracyReport(
        overall=float(np.trace(confusion) / total),
        per_video_mean=float(accs.mean()),
        per_video_std=float(accs.std()),
        confusion=confusion,
        per_video=per_video,
        num_frames=total,
        mode=mode,
    )


def score_predictions(
    preds: Sequence[WindowPrediction],
    dataset: EmbeddingDataset,
    rule: str = "nearest-center",
    mode: str = "all",
) -> AccuracyReport:
    """Expand and score predictions for every video of ``dataset``."""
    series = [windows_to_frames(preds, v, dataset.annotations_for(v.video_id), rule) for v in dataset.videos]
    report = frame_accuracy(series, mode)
    known = set(dataset.video_ids)
    scored = [p for p in preds if p.video_id in known]
    report.parse_failures = sum(not p.parse_ok for p in scored)
    report.num_predictions = len(scored)
    return report


# ---------------------------------------------------------------------------
# decoder outputs

_ANSWER = re.compile(r"move\s*::\s*(powermove|footwork|toprock|none)\b", re.IGNORECASE)


def parse_decoder_output(text: str | None) -> tuple[Label, bool]:
    """Extract the label of the last ``Move :: <label>`` answer.

    Never raises; returns ``(Label.NONE, False)`` when nothing parses.
    """
    if not text:
        return Label.NONE, False
    matches = _ANSWER.findall(text)
    if not matches:
        return Label.NONE, False
    return Label.parse(matches[-1]), True


@dataclass(frozen=True)
class ParseStats:
    parsed: int
    failed: int

    @property
    def total(self) -> int:
        return self.parsed + self.failed


def parse_stats(texts: Iterable[str | None]) -> ParseStats:
    ok = [parse_decoder_output(t)[1] for t in texts]
    return ParseStats(parsed=sum(ok), failed=len(ok) - sum(ok))


# ---------------------------------------------------------------------------
# predictions.jsonl


def read_predictions(path) -> list[WindowPrediction]:
    """Encoder lines carry ``pred``; decoder lines carry ``raw_text`` and are parsed."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"predictions file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                base = dict(video_id=str(rec["video_id"]), start_sec=float(rec["start_sec"]), end_sec=float(rec["end_sec"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorruptFile(f"{path}:{lineno}: {exc}") from None
            if "raw_text" in rec:
                label, ok = parse_decoder_output(rec["raw_text"])
                out.append(WindowPrediction(**base, pred=label, source="decoder", raw_text=rec["raw_text"], parse_ok=ok))
            elif "pred" in rec:
                out.append(WindowPrediction(**base, pred=Label.parse(rec["pred"])))
            else:
                raise CorruptFile(f"{path}:{lineno}: record needs 'pred' or 'raw_text'")
    return out


def write_predictions(path, preds: Iterable[WindowPrediction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            rec = {"video_id": p.video_id, "start_sec": p.start_sec, "end_sec": p.end_sec}
            if p.source == "decoder" and p.raw_text is not None:
                rec["raw_text"] = p.raw_text
            else:
                rec["pred"] = p.pred.text
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# multi-run aggregation


def format_mean_std(values: Sequence[float], scale: float = 100.0) -> str:
    """``MM.MM(S.SS)``: mean and population std of ``values * scale``."""
    arr = np.asarray(values, dtype=np.float64) * scale
    if arr.size == 0:
        raise EmptyInput("need at least one run")
    return f"{arr.mean():.2f}({arr.std():.2f})"


def aggregate_runs(runs: Sequence[Mapping[str, float]], scale: float = 100.0) -> dict[str, str]:
    """Aggregate metric dicts from repeated runs, e.g. ``overall`` and ``per_video_mean``."""
    if not runs:
        raise EmptyInput("need at least one run")
    keys = list(runs[0].keys())
    for r in runs[1:]:
        if set(r) != set(keys):
            raise InvalidArgument("all runs must report the same metrics")
    return {k: format_mean_std([r[k] for r in runs], scale) for k in keys}
