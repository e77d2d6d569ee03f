"""Deterministic synthetic outdoor scenes: (image, ground-truth mask) pairs.

Scenes are flat-colored class regions (road band, sidewalk strip, crosswalk
where they intersect, vehicles, obstacles) plus seeded Gaussian pixel noise.
The mask is exact by construction, which makes IoU oracles exact. Stands in
for street-level datasets at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError

CLASS_BACKGROUND = 0
CLASS_ROAD = 1
CLASS_SIDEWALK = 2
CLASS_CROSSWALK = 3
CLASS_VEHICLE = 4
CLASS_OBSTACLE = 5

WALKABLE_CLASSES = frozenset({CLASS_SIDEWALK, CLASS_CROSSWALK})

# RGB palette, one flat color per class id.
PALETTE = np.array([
    [0.45, 0.55, 0.45],   # background
    [0.25, 0.25, 0.28],   # road
    [0.75, 0.72, 0.65],   # sidewalk
    [0.92, 0.92, 0.90],   # crosswalk
    [0.20, 0.30, 0.75],   # vehicle
    [0.80, 0.25, 0.20],   # obstacle
], dtype=np.float32)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    sidewalk: bool = True
    sidewalk_pos: int = 28          # leftmost column of the strip
    sidewalk_width: int = 10
    sidewalk_curve: int = 0         # max horizontal deflection, px
    road_band: tuple[int, int] | None = (42, 54)  # [row0, row1)
    crosswalk: bool = True          # draw sidewalk/road intersection as crosswalk
    obstacle_count: int = 2
    obstacle_max_size: int = 6
    vehicle_count: int = 1
    noise_amp: float = 0.04


def _strip_offsets(spec: SceneSpec) -> np.ndarray:
    rows = np.arange(spec.height)
    if spec.sidewalk_curve == 0:
        return np.zeros(spec.height, dtype=np.int64)
    return np.round(spec.sidewalk_curve *
                    np.sin(np.pi * rows / max(spec.height - 1, 1))).astype(np.int64)


def _validate(spec: SceneSpec) -> None:
    if spec.height < 4 or spec.width < 4:
        raise ConfigurationError(f"frame {spec.height}x{spec.width} too small")
    if spec.sidewalk:
        if spec.sidewalk_width < 1 or spec.sidewalk_width > spec.width:
            raise ConfigurationError(
                f"sidewalk width {spec.sidewalk_width} does not fit frame width {spec.width}")
        offs = _strip_offsets(spec)
        lo = spec.sidewalk_pos + int(offs.min())
        hi = spec.sidewalk_pos + int(offs.max()) + spec.sidewalk_width
        if lo < 0 or hi > spec.width:
            raise ConfigurationError(
                f"sidewalk strip spans columns [{lo}, {hi}), outside frame width {spec.width}")
    if spec.road_band is not None:
        r0, r1 = spec.road_band
        if not (0 <= r0 < r1 <= spec.height):
            raise ConfigurationError(f"road band {spec.road_band} outside frame")
    if spec.obstacle_count < 0 or spec.vehicle_count < 0 or spec.noise_amp < 0:
        raise ConfigurationError("counts and noise amplitude must be nonnegative")


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render one scene. Returns (image [3,H,W] float32 in [0,1], mask [H,W] int32)."""
    _validate(spec)
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    mask = np.full((h, w), CLASS_BACKGROUND, dtype=np.int32)

    if spec.road_band is not None:
        r0, r1 = spec.road_band
        mask[r0:r1, :] = CLASS_ROAD

    if spec.sidewalk:
        offs = _strip_offsets(spec)
        for r in range(h):
            c0 = spec.sidewalk_pos + int(offs[r])
            on_road = spec.road_band is not None and spec.road_band[0] <= r < spec.road_band[1]
            cls = CLASS_CROSSWALK if (on_road and spec.crosswalk) else CLASS_SIDEWALK
            mask[r, c0:c0 + spec.sidewalk_width] = cls

    for _ in range(spec.vehicle_count):
        if spec.road_band is None:
            break
        r0, r1 = spec.road_band
        vh = int(rng.integers(2, max(3, (r1 - r0))))
        vw = int(rng.integers(3, max(4, w // 6)))
        top = int(rng.integers(r0, max(r0 + 1, r1 - vh)))
        left = int(rng.integers(0, w - vw))
        mask[top:top + vh, left:left + vw] = CLASS_VEHICLE

    for _ in range(spec.obstacle_count):
        size = int(rng.integers(2, max(3, spec.obstacle_max_size + 1)))
        top = int(rng.integers(0, h - size))
        left = int(rng.integers(0, w - size))
        mask[top:top + size, left:left + size] = CLASS_OBSTACLE

    image = PALETTE[mask].transpose(2, 0, 1).copy()
    if spec.noise_amp > 0:
        image += rng.normal(0.0, spec.noise_amp, size=image.shape).astype(np.float32)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def generate_walk_sequence(spec: SceneSpec, n_frames: int,
                           drift: str = "none") -> list[tuple[np.ndarray, np.ndarray]]:
    """Frames whose sidewalk strip translates one column per frame.

    drift: "left" moves the strip toward column 0, "right" away from it,
    "none" repeats the identical scene.
    """
    if n_frames < 1:
        raise ConfigurationError(f"n_frames must be >= 1, got {n_frames}")
    step = {"none": 0, "left": -1, "right": 1}.get(drift)
    if step is None:
        raise ConfigurationError(f"drift must be none|left|right, got {drift!r}")
    frames = []
    for i in range(n_frames):
        frames.append(generate_scene(replace(spec, sidewalk_pos=spec.sidewalk_pos + step * i)))
    return frames


# -- PPM / PGM files --------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 portable pixmap from a [3,H,W] float image in [0,1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected [3,H,W] image, got {image.shape}")
    h, w = image.shape[1:]
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    header, data = _read_netpbm(path, b"P6")
    w, h = header
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / 255.0)


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary P5 portable graymap of class ids."""
    if mask.ndim != 2:
        raise DimensionError(f"expected [H,W] mask, got {mask.shape}")
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(mask.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    header, data = _read_netpbm(path, b"P5")
    w, h = header
    return np.frombuffer(data, dtype=np.uint8, count=h * w).reshape(h, w).astype(np.int32)


def _read_netpbm(path, magic: bytes):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(magic):
        raise IOError(f"{path}: not a {magic.decode()} file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":  # comment line
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise IOError(f"{path}: unsupported maxval {maxval}")
    return (w, h), blob[pos:]


def scene_basename(seed: int, index: int) -> str:
    return f"scene_{seed}_{index:04d}"


def save_scene_files(directory, seed: int, index: int,
                     image: np.ndarray, mask: np.ndarray) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    base = directory / scene_basename(seed, index)
    ppm = base.with_suffix(".ppm")
    pgm = base.with_suffix(".pgm")
    write_ppm(ppm, image)
    write_pgm(pgm, mask)
    return ppm, pgm


def calibration_scenes(count: int, seed: int = 0, size: int = 64) -> list[np.ndarray]:
    """Seeded scene images used to gather activation statistics."""
    if count < 1:
        raise ConfigurationError(f"calibration count must be >= 1, got {count}")
    road0 = (2 * size) // 3
    road = (road0, min(size, road0 + max(2, size // 6)))
    images = []
    for i in range(count):
        rng = np.random.default_rng(10_000 + seed + i)
        spec = SceneSpec(seed=seed + i,
                         height=size, width=size,
                         sidewalk_pos=int(rng.integers(2, size - 14)),
                         sidewalk_width=int(rng.integers(6, 13)),
                         sidewalk_curve=int(rng.integers(0, 3)),
                         road_band=road,
                         obstacle_count=int(rng.integers(0, 4)),
                         vehicle_count=int(rng.integers(0, 3)))
        images.append(generate_scene(spec)[0])
    return images
