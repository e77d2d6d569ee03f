"""Segmentation masks to direction cues.

Per frame: binarize the walkable classes, keep the largest 4-connected
region, score left/center/right strip confidences, pick a direction against
a threshold, then smooth the stream with a sliding-window majority vote.
Straight is a silent state: continuing needs no announcement.
"""

from __future__ import annotations

import logging
import shlex
import subprocess
from collections import Counter, deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Iterator, Optional

import numpy as np

from .errors import ConfigurationError
from .model import ModelGraph

logger = logging.getLogger(__name__)

WALKABLE = 255


class Direction(Enum):
    LEFT = "Left"
    SLIGHT_LEFT = "Slight Left"
    STRAIGHT = "Straight"
    SLIGHT_RIGHT = "Slight Right"
    RIGHT = "Right"
    STOP = "Stop"


MIRRORED = {Direction.LEFT: Direction.RIGHT, Direction.RIGHT: Direction.LEFT,
            Direction.SLIGHT_LEFT: Direction.SLIGHT_RIGHT,
            Direction.SLIGHT_RIGHT: Direction.SLIGHT_LEFT,
            Direction.STRAIGHT: Direction.STRAIGHT, Direction.STOP: Direction.STOP}

CAMERA_ERROR_CUE = "camera error"


@dataclass(frozen=True)
class PartitionConfidence:
    left: float
    center: float
    right: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.left, self.center, self.right)


def extract_walkable(mask: np.ndarray, walkable_classes) -> np.ndarray:
    """255/0 grayscale of the largest 4-connected walkable region."""
    mask = np.asarray(mask)
    walkable = np.isin(mask, list(walkable_classes))
    out = np.zeros(mask.shape, dtype=np.uint8)
    if not walkable.any():
        return out
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    sizes = [0]  # label 0 = not walkable
    for sy in range(h):
        for sx in range(w):
            if not walkable[sy, sx] or labels[sy, sx]:
                continue
            label = len(sizes)
            sizes.append(0)
            queue = deque([(sy, sx)])
            labels[sy, sx] = label
            while queue:
                y, x = queue.popleft()
                sizes[label] += 1
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and walkable[ny, nx] \
                            and not labels[ny, nx]:
                        labels[ny, nx] = label
                        queue.append((ny, nx))
    largest = int(np.argmax(sizes))
    out[labels == largest] = WALKABLE
    return out


def partition_widths(width: int) -> tuple[int, int, int]:
    """Left/center/right strip widths; the remainder is split symmetrically."""
    q, r = divmod(width, 3)
    if r == 0:
        return (q, q, q)
    if r == 1:
        return (q, q + 1, q)
    return (q + 1, q, q + 1)


def partition_confidence(mask: np.ndarray) -> PartitionConfidence:
    """Mean walkable fraction of three side-by-side vertical strips."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if w < 3:
        raise ConfigurationError(f"mask width {w} too small to partition in three")
    lw, cw, _ = partition_widths(w)
    strips = (mask[:, :lw], mask[:, lw:lw + cw], mask[:, lw + cw:])
    vals = [float(s.astype(np.float64).mean() / WALKABLE) for s in strips]
    return PartitionConfidence(*vals)


def decide_direction(conf: PartitionConfidence, threshold: float = 0.4) -> Direction:
    """Map a confidence triple to one direction.

    Center wins ties at the top; an exact left/right tie is treated as an
    undecidable fork and maps to Straight or Stop by the center confidence,
    keeping the rule mirror-symmetric.
    """
    if not (0.0 < threshold < 1.0):
        raise ConfigurationError(f"threshold must lie in (0, 1), got {threshold}")
    left, center, right = conf.as_tuple()
    top = max(left, center, right)
    if top < threshold:
        return Direction.STOP
    if center == top:
        return Direction.STRAIGHT
    if left == right:
        return Direction.STRAIGHT if center >= threshold else Direction.STOP
    if left > right:
        return Direction.SLIGHT_LEFT if center >= threshold else Direction.LEFT
    return Direction.SLIGHT_RIGHT if center >= threshold else Direction.RIGHT


class VoteWindow:
    """Ring buffer of the last W directions; majority with newest-wins ties."""

    def __init__(self, size: int):
        if size < 1:
            raise ConfigurationError(f"vote window size must be >= 1, got {size}")
        self.size = size
        self.buffer: deque[Direction] = deque(maxlen=size)

    def push(self, direction: Direction) -> Direction:
        self.buffer.append(direction)
        return self.majority()

    def majority(self) -> Direction:
        counts = Counter(self.buffer)
        best = max(counts.values())
        # ties break toward the direction whose latest entry is most recent
        for d in reversed(self.buffer):
            if counts[d] == best:
                return d
        raise RuntimeError("empty vote window has no majority")


def vote(window: VoteWindow, direction: Direction) -> tuple[VoteWindow, Direction]:
    return window, window.push(direction)


def emit_cue(direction: Direction) -> Optional[str]:
    """Spoken token for a direction; Straight is silent."""
    if direction is Direction.STRAIGHT:
        return None
    return direction.value


def command_hook(command: str) -> Callable[[str], None]:
    """Wrap an external command; it receives the cue text as its last argument."""
    argv = shlex.split(command)

    def run(cue: str) -> None:
        subprocess.run(argv + [cue], check=True,
                       stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    return run


@dataclass
class NavConfig:
    threshold: float = 0.4
    window: int = 5
    walkable_classes: frozenset = frozenset({2, 3})
    cue_hook: Optional[Callable[[str], None]] = None


@dataclass
class FrameResult:
    frame_id: int
    confidence: Optional[PartitionConfidence]
    direction: Optional[Direction]    # per-frame decision
    majority: Optional[Direction]     # windowed decision
    cue: Optional[str]
    failed: bool = False

    def log_line(self) -> str:
        if self.failed:
            conf = "-"
            direction = "-"
        else:
            conf = ",".join(f"{v:.3f}" for v in self.confidence.as_tuple())
            direction = self.majority.value
        return f"{self.frame_id}\t{conf}\t{direction}\t{self.cue or '-'}"


def _fire_hook(config: NavConfig, cue: Optional[str]) -> None:
    if cue is None or config.cue_hook is None:
        return
    try:
        config.cue_hook(cue)
    except Exception as exc:  # hook failure must never kill the frame loop
        logger.warning("cue hook failed for %r: %s", cue, exc)


def run_pipeline(frames: Iterable[Optional[np.ndarray]],
                 segment: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 config: NavConfig | None = None) -> Iterator[FrameResult]:
    """Drive the frame loop.

    `frames` yields images (or ready-made class masks when `segment` is
    None); a None item models a failed camera read and emits the camera
    error cue without stopping the stream.
    """
    config = config or NavConfig()
    if not (0.0 < config.threshold < 1.0):
        raise ConfigurationError(f"threshold must lie in (0, 1), got {config.threshold}")
    window = VoteWindow(config.window)
    for frame_id, frame in enumerate(frames):
        if frame is None:
            _fire_hook(config, CAMERA_ERROR_CUE)
            yield FrameResult(frame_id=frame_id, confidence=None, direction=None,
                              majority=None, cue=CAMERA_ERROR_CUE, failed=True)
            continue
        mask = segment(frame) if segment is not None else frame
        walkable = extract_walkable(mask, config.walkable_classes)
        conf = partition_confidence(walkable)
        direction = decide_direction(conf, config.threshold)
        majority = window.push(direction)
        cue = emit_cue(majority)
        _fire_hook(config, cue)
        yield FrameResult(frame_id=frame_id, confidence=conf, direction=direction,
                          majority=majority, cue=cue)


def model_segmenter(model: ModelGraph) -> Callable[[np.ndarray], np.ndarray]:
    return model.predict


def directory_frames(directory, masks: bool = False) -> Iterator[Optional[np.ndarray]]:
    """Frames from a directory in lexicographic order.

    Reads P6 images (or P5 class masks when masks=True); an unreadable file
    yields None, which the pipeline reports as a camera error.
    """
    from pathlib import Path

    from .scenegen import read_pgm, read_ppm

    reader = read_pgm if masks else read_ppm
    for path in sorted(Path(directory).glob("*.pgm" if masks else "*.ppm")):
        try:
            yield reader(path)
        except Exception as exc:
            logger.warning("failed to read frame %s: %s", path, exc)
            yield None
