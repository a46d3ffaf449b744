"""One-shot tracking with network features and the correctly-tracked-frames metric.

A target is presented once; every later frame is searched on a grid of
translated and rescaled boxes around the previous estimate and the box whose
features are closest (cosine) to the initial template wins.  The template is
never updated.
"""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import contrast_normalize_channels
from .errors import DataConsistencyError, FormatError, TrackerStateError
from .network import Network, forward_features
from .tensor import load_tensor

SCALES = (0.95, 1.0, 1.05)
_TIE_TOL = 1e-12


@dataclass(frozen=True)
class BoundingBox:
    x: int = 0
    y: int = 0
    w: int = 0
    h: int = 0
    absent: bool = False

    def __post_init__(self):
        if not self.absent and (self.w <= 0 or self.h <= 0):
            raise ValueError(f"visible box needs positive extent, got {self.w}x{self.h}")

    @classmethod
    def missing(cls) -> "BoundingBox":
        return cls(absent=True)

    @property
    def area(self) -> int:
        return 0 if self.absent else self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def inside(self, rows: int, cols: int) -> bool:
        return not self.absent and self.x >= 0 and self.y >= 0 and self.x + self.w <= cols and self.y + self.h <= rows


def iou(a: BoundingBox, b: BoundingBox) -> float:
    if a.absent or b.absent:
        return 1.0 if a.absent and b.absent else 0.0
    ix = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def sequence_precision(predicted: Sequence[BoundingBox], truth: Sequence[BoundingBox], tau: float = 0.5) -> float:
    """Fraction of frames with a visible target whose prediction has IoU >= tau."""
    if len(predicted) != len(truth):
        raise ValueError(f"{len(predicted)} predictions for {len(truth)} ground-truth frames")
    scored = [iou(p, t) >= tau for p, t in zip(predicted, truth) if not t.absent]
    return float(np.mean(scored)) if scored else float("nan")


# -- cropping ---------------------------------------------------------------------

def _as_frame(frame) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    return f[None] if f.ndim == 2 else f


def crop_resample(frame: np.ndarray, box: BoundingBox, out_rows: int, out_cols: int) -> np.ndarray:
    """Bilinear resample of ``box`` to ``out_rows`` x ``out_cols`` (pixel-centre aligned).

    A box already of the output size is copied exactly.
    """
    frame = _as_frame(frame)
    _, rows, cols = frame.shape
    ys = box.y + (np.arange(out_rows) + 0.5) * box.h / out_rows - 0.5
    xs = box.x + (np.arange(out_cols) + 0.5) * box.w / out_cols - 0.5
    ys = np.clip(ys, 0, rows - 1)
    xs = np.clip(xs, 0, cols - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, rows - 1)
    x1 = np.minimum(x0 + 1, cols - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = frame[:, y0][:, :, x0] * (1 - fx) + frame[:, y0][:, :, x1] * fx
    bot = frame[:, y1][:, :, x0] * (1 - fx) + frame[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def _match_planes(patch: np.ndarray, planes: int) -> np.ndarray:
    if patch.shape[-3] == planes:
        return patch
    if planes == 1:
        return patch.mean(axis=-3, keepdims=True)
    if patch.shape[-3] == 1:
        return np.repeat(patch, planes, axis=-3)
    raise ValueError(f"cannot feed {patch.shape[-3]}-plane frames to a {planes}-plane network")


def _features(net: Network, crops: np.ndarray) -> np.ndarray:
    crops = _match_planes(crops, net.spec.input_shape[0])
    return forward_features(net, contrast_normalize_channels(crops, epsilon=net.spec.epsilon))


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity of ``a`` with each row of ``b``; zero when either vector is zero."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    return np.divide(b @ a, denom, out=np.zeros_like(nb), where=denom > 0)


# -- tracking ------------------------------------------------------------------------

@dataclass
class SearchConfig:
    radius: int | None = None  # pixels; None means 20% of the frame diagonal
    stride: int = 2
    scales: tuple[float, ...] = SCALES
    chunk: int = 64


@dataclass
class TrackerState:
    net: Network
    template: np.ndarray
    box: BoundingBox
    frame_shape: tuple[int, int, int]
    search: SearchConfig = field(default_factory=SearchConfig)

    @property
    def radius(self) -> int:
        if self.search.radius is not None:
            return int(self.search.radius)
        _, rows, cols = self.frame_shape
        return max(1, int(round(0.2 * math.hypot(rows, cols))))


def init_tracker(net: Network, frame, box: BoundingBox, search: SearchConfig | None = None) -> TrackerState:
    frame = _as_frame(frame)
    if box.absent or not box.inside(frame.shape[1], frame.shape[2]):
        raise ValueError(f"initial box {box} must be visible and inside the {frame.shape[1]}x{frame.shape[2]} frame")
    _, rows, cols = net.spec.input_shape
    template = _features(net, crop_resample(frame, box, rows, cols)[None])[0]
    return TrackerState(net, template, box, frame.shape, search or SearchConfig())


def candidate_boxes(box: BoundingBox, rows: int, cols: int, radius: int, stride: int,
                    scales: Sequence[float]) -> list[BoundingBox]:
    """In-frame candidates ordered by displacement, then scale change, then position."""
    cx, cy = box.center
    steps = range(-(radius // stride) * stride, radius + 1, stride)
    seen = set()
    keyed = []
    for s in scales:
        w = max(1, int(round(box.w * s)))
        h = max(1, int(round(box.h * s)))
        for dy in steps:
            for dx in steps:
                x = int(round(cx + dx - w / 2.0))
                y = int(round(cy + dy - h / 2.0))
                cand = (x, y, w, h)
                if cand in seen or x < 0 or y < 0 or x + w > cols or y + h > rows:
                    continue
                seen.add(cand)
                keyed.append(((dx * dx + dy * dy, abs(s - 1.0), dy, dx), BoundingBox(*cand)))
    keyed.sort(key=lambda kv: kv[0])
    return [b for _, b in keyed]


def track_frame(state: TrackerState, frame) -> tuple[BoundingBox, float]:
    """Move ``state.box`` to the best-matching candidate in ``frame``."""
    frame = _as_frame(frame)
    if frame.shape != state.frame_shape:
        raise ValueError(f"frame shape {frame.shape} differs from the initial {state.frame_shape}")
    if state.box.absent or state.box.w <= 0 or state.box.h <= 0:
        raise TrackerStateError("previous box is degenerate")
    _, rows, cols = frame.shape
    cands = candidate_boxes(state.box, rows, cols, state.radius, state.search.stride, state.search.scales)
    if not cands:
        return state.box, 0.0
    _, in_rows, in_cols = state.net.spec.input_shape
    scores = np.empty(len(cands))
    for start in range(0, len(cands), state.search.chunk):
        part = cands[start:start + state.search.chunk]
        crops = np.stack([crop_resample(frame, b, in_rows, in_cols) for b in part])
        scores[start:start + len(part)] = cosine(state.template, _features(state.net, crops))
    best = int(np.flatnonzero(scores >= scores.max() - _TIE_TOL)[0])
    state.box = cands[best]
    return state.box, float(scores[best])


@dataclass
class TrackSequence:
    frames: np.ndarray  # (n, planes, rows, cols)
    ground_truth: list[BoundingBox]
    name: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim == 3:
            self.frames = self.frames[:, None]
        if len(self.frames) != len(self.ground_truth):
            raise DataConsistencyError(f"{len(self.frames)} frames but {len(self.ground_truth)} ground-truth boxes")


@dataclass
class TrackResult:
    name: str
    boxes: list[BoundingBox]
    scores: list[float]
    ious: list[float]
    precision: float


def run_tracker(net: Network, seq: TrackSequence, search: SearchConfig | None = None,
                tau: float = 0.5, init_box: BoundingBox | None = None) -> TrackResult:
    """Initialize on the first frame's ground truth and track the rest."""
    box0 = init_box or seq.ground_truth[0]
    state = init_tracker(net, seq.frames[0], box0, search)
    boxes, scores = [box0], [1.0]
    for frame in seq.frames[1:]:
        b, s = track_frame(state, frame)
        boxes.append(b)
        scores.append(s)
    ious = [iou(p, t) for p, t in zip(boxes, seq.ground_truth)]
    return TrackResult(seq.name, boxes, scores, ious, sequence_precision(boxes, seq.ground_truth, tau))


# -- synthetic sequences --------------------------------------------------------------

def _textured_square(size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0, (size, size))


def static_sequence(frames: int = 5, rows: int = 64, cols: int = 64, box_size: int = 20,
                    seed: int = 0) -> TrackSequence:
    rng = np.random.default_rng(seed)
    frame = rng.uniform(0.0, 1.0, (1, rows, cols))
    box = BoundingBox((cols - box_size) // 2, (rows - box_size) // 2, box_size, box_size)
    return TrackSequence(np.repeat(frame[None], frames, axis=0), [box] * frames, "static")


def translating_sequence(frames: int = 6, rows: int = 64, cols: int = 96, box_size: int = 20,
                         step: tuple[int, int] = (2, 0), seed: int = 0, background: float = 0.5) -> TrackSequence:
    """A distinctive textured square moving ``step`` (dx, dy) pixels per frame over a flat background."""
    rng = np.random.default_rng(seed)
    patch = _textured_square(box_size, rng)
    x0, y0 = 4, (rows - box_size) // 2
    imgs, truth = [], []
    for t in range(frames):
        x, y = x0 + step[0] * t, y0 + step[1] * t
        img = np.full((rows, cols), background)
        img[y:y + box_size, x:x + box_size] = patch
        imgs.append(img[None])
        truth.append(BoundingBox(x, y, box_size, box_size))
    return TrackSequence(np.stack(imgs), truth, "translating")


# -- files -------------------------------------------------------------------------

def parse_ground_truth(text: str) -> list[BoundingBox]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise FormatError(f"ground truth line {lineno}: expected x,y,w,h, got {line!r}")
        if all(p.lower() == "nan" for p in parts):
            boxes.append(BoundingBox.missing())
            continue
        try:
            x, y, w, h = (int(round(float(p))) for p in parts)
            boxes.append(BoundingBox(x, y, w, h))
        except ValueError as exc:
            raise FormatError(f"ground truth line {lineno}: {exc}") from exc
    return boxes


def format_ground_truth(boxes: Sequence[BoundingBox]) -> str:
    return "".join("nan,nan,nan,nan\n" if b.absent else f"{b.x},{b.y},{b.w},{b.h}\n" for b in boxes)


def read_pgm(path) -> np.ndarray:
    """Greyscale P5 or P2 image scaled to [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if not m:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        body = data[pos + 1:]
        count = width * height
        if len(body) < count * np.dtype(dtype).itemsize:
            raise FormatError(f"{path}: truncated PGM pixel data")
        pix = np.frombuffer(body, dtype=dtype, count=count)
    elif magic == b"P2":
        pix = np.array(data[pos:].split()[:width * height], dtype=np.float64)
        if pix.size != width * height:
            raise FormatError(f"{path}: truncated PGM pixel data")
    else:
        raise FormatError(f"{path}: not a PGM file (magic {magic!r})")
    return pix.astype(np.float64).reshape(height, width) / maxval


def load_frames(directory) -> np.ndarray:
    """Frames from numbered ``.clt`` tensors or ``.pgm`` images, in numeric filename order."""
    directory = Path(directory)
    files = [p for p in directory.iterdir() if p.suffix.lower() in (".clt", ".pgm")]
    if not files:
        raise FileNotFoundError(f"{directory}: no .clt or .pgm frames")

    def key(p: Path):
        nums = re.findall(r"\d+", p.stem)
        return (int(nums[-1]) if nums else -1, p.name)

    frames = []
    for f in sorted(files, key=key):
        frames.append(load_tensor(f) if f.suffix.lower() == ".clt" else read_pgm(f)[None])
    if len({f.shape for f in frames}) != 1:
        raise FormatError(f"{directory}: frames have differing shapes")
    return np.stack(frames)


def load_sequence(frames_dir, truth_path, name: str | None = None) -> TrackSequence:
    frames = load_frames(frames_dir)
    truth = parse_ground_truth(Path(truth_path).read_text())
    return TrackSequence(frames, truth, name or Path(frames_dir).name)


def write_track_csv(path, result: TrackResult) -> None:
    """Per-frame rows then a summary block with the sequence, frame count and precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "x", "y", "w", "h", "score", "iou"])
        for t, (b, s, o) in enumerate(zip(result.boxes, result.scores, result.ious)):
            if b.absent:
                w.writerow([t, "nan", "nan", "nan", "nan", f"{s:.6f}", f"{o:.6f}"])
            else:
                w.writerow([t, b.x, b.y, b.w, b.h, f"{s:.6f}", f"{o:.6f}"])
        w.writerow([])
        w.writerow(["sequence", "frames", "precision"])
        w.writerow([result.name, len(result.boxes), f"{result.precision:.4f}"])


# Correct-frame fractions for the CL tracker and the supervised CNN tracker on
# TLD sequences, full-scale reference values (not reproduced at desk scale).
REFERENCE_PRECISION = {
    "David": (761, 0.18, 0.08),
    "Jumping": (313, 0.37, 0.20),
    "Pedestrian 1": (140, 0.81, 0.69),
    "Pedestrian 2": (338, 0.78, 0.79),
    "Pedestrian 3": (184, 0.45, 0.44),
    "Car": (945, 0.67, 0.48),
    "Carchase": (9928, 0.38, 0.26),
}
