"""Piecewise-constant synthetic phantoms of overlapping ellipses and line segments.

Shapes are rasterised by pixel-centre membership (no anti-aliasing), so each
shape contributes an exactly uniform increment and the composed image stays
gradient-sparse. Increments add up over a constant background and the result
is clipped to ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import GridSpec
from .io import IMAGE_EXT, file_checksum, write_json, write_raw


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    rotation_deg: float
    intensity: float
    kind: str = field(default="ellipse", init=False)

    def __post_init__(self):
        a, b = self.semi_axes
        if not (a > 0 and b > 0):
            raise ValueError(f"ellipse semi-axes must be positive, got {self.semi_axes}")
        if not np.all(np.isfinite([*self.center, a, b, self.rotation_deg])):
            raise ValueError("ellipse parameters must be finite")
        _check_intensity(self.intensity)

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        theta = math.radians(self.rotation_deg)
        dx, dy = x - self.center[0], y - self.center[1]
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        a, b = self.semi_axes
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0


@dataclass(frozen=True)
class LineSegment:
    start: tuple[float, float]
    end: tuple[float, float]
    thickness: float
    intensity: float
    kind: str = field(default="line", init=False)

    def __post_init__(self):
        if tuple(self.start) == tuple(self.end):
            raise ValueError("line endpoints must be distinct")
        if not self.thickness > 0:
            raise ValueError("line thickness must be positive")
        if not np.all(np.isfinite([*self.start, *self.end, self.thickness])):
            raise ValueError("line parameters must be finite")
        _check_intensity(self.intensity)

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        p0 = np.asarray(self.start, dtype=float)
        d = np.asarray(self.end, dtype=float) - p0
        t = ((x - p0[0]) * d[0] + (y - p0[1]) * d[1]) / float(d @ d)
        t = np.clip(t, 0.0, 1.0)
        dist2 = (x - p0[0] - t * d[0]) ** 2 + (y - p0[1] - t * d[1]) ** 2
        return dist2 <= (0.5 * self.thickness) ** 2


ShapeElement = Ellipse | LineSegment


def _check_intensity(value):
    if not -1.0 <= value <= 1.0:
        raise ValueError(f"intensity must lie in [-1, 1], got {value}")


def rasterize_element(elem: ShapeElement, grid: GridSpec) -> np.ndarray:
    """Increment image: ``elem.intensity`` on pixels whose centre lies in the shape, else 0."""
    x, y = grid.pixel_centers()
    return np.where(elem.contains(x, y), float(elem.intensity), 0.0)


@dataclass(frozen=True)
class PhantomSpec:
    """Distribution of random phantoms.

    ``size_range`` (ellipse semi-axes) and ``line_length_range`` are fractions
    of the grid half-width; ``line_thickness_range`` is in pixels.
    """

    grid: GridSpec = GridSpec(64)
    num_ellipses_range: tuple[int, int] = (3, 7)
    num_lines_range: tuple[int, int] = (0, 3)
    intensity_range: tuple[float, float] = (0.15, 0.85)
    size_range: tuple[float, float] = (0.08, 0.45)
    line_length_range: tuple[float, float] = (0.3, 1.2)
    line_thickness_range: tuple[float, float] = (1.0, 2.5)
    background: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_ellipses_range", "num_lines_range", "intensity_range", "size_range",
                     "line_length_range", "line_thickness_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if self.num_ellipses_range[0] < 0 or self.num_lines_range[0] < 0:
            raise ValueError("element counts must be nonnegative")
        if self.size_range[0] <= 0 or self.line_thickness_range[0] <= 0:
            raise ValueError("sizes must be positive")
        if not (-1 <= self.intensity_range[0] and self.intensity_range[1] <= 1):
            raise ValueError("intensity_range must lie within [-1, 1]")
        if not 0 <= self.background <= 1:
            raise ValueError("background must lie in [0, 1]")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["grid"] = self.grid.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        doc = dict(doc)
        grid = doc.pop("grid", None)
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
        if grid is not None:
            kwargs["grid"] = GridSpec(**grid) if isinstance(grid, dict) else grid
        return cls(**kwargs)


def sample_elements(spec: PhantomSpec, index: int) -> list[ShapeElement]:
    """Draw the shapes of phantom ``index``; fully determined by ``(spec.seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    h = spec.grid.half_width
    ps = spec.grid.pixel_size
    elements: list[ShapeElement] = []
    for _ in range(rng.integers(spec.num_ellipses_range[0], spec.num_ellipses_range[1] + 1)):
        center = tuple(rng.uniform(-0.7 * h, 0.7 * h, size=2))
        axes = tuple(rng.uniform(*spec.size_range, size=2) * h)
        elements.append(Ellipse(center, axes, float(rng.uniform(0, 180)), float(rng.uniform(*spec.intensity_range))))
    for _ in range(rng.integers(spec.num_lines_range[0], spec.num_lines_range[1] + 1)):
        start = rng.uniform(-0.8 * h, 0.8 * h, size=2)
        angle = rng.uniform(0, 2 * math.pi)
        length = rng.uniform(*spec.line_length_range) * h
        end = start + length * np.array([math.cos(angle), math.sin(angle)])
        thickness = rng.uniform(*spec.line_thickness_range) * ps
        elements.append(LineSegment(tuple(start), tuple(end), thickness, float(rng.uniform(*spec.intensity_range))))
    return elements


def compose(elements, grid: GridSpec, background: float = 0.0) -> np.ndarray:
    image = np.full(grid.shape, float(background))
    for elem in elements:
        image += rasterize_element(elem, grid)
    return np.clip(image, 0.0, 1.0)


def generate_phantom(spec: PhantomSpec, index: int) -> np.ndarray:
    """Phantom ``index`` of the family described by ``spec``, values in ``[0, 1]``."""
    return compose(sample_elements(spec, index), spec.grid, spec.background)


def gradient_support_fraction(image: np.ndarray) -> float:
    """Fraction of pixels with a nonzero forward-difference gradient (replicate boundary)."""
    dx = np.diff(image, axis=1, append=image[:, -1:])
    dy = np.diff(image, axis=0, append=image[-1:, :])
    return float(np.mean((dx != 0) | (dy != 0)))


def default_test_count(count: int) -> int:
    # 30 test images out of 430 in the reference dataset
    return int(round(count * 30 / 430))


def generate_dataset(
    spec: PhantomSpec,
    count: int,
    out_dir: str | Path,
    n_test: int | None = None,
) -> dict:
    """Write ``count`` phantoms under ``out_dir/gt`` and a ``manifest.json``.

    The first ``count - n_test`` entries form the train split, the rest the
    test split. Returns the manifest document.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if n_test is None:
        n_test = default_test_count(count)
    if not 0 <= n_test <= count:
        raise ValueError(f"n_test={n_test} outside [0, {count}]")
    out_dir = Path(out_dir)
    entries = []
    for index in range(count):
        entry_id = f"img{index:04d}"
        rel = f"gt/{entry_id}{IMAGE_EXT}"
        try:
            write_raw(out_dir / rel, generate_phantom(spec, index))
        except OSError as exc:
            raise OSError(f"cannot write phantom {out_dir / rel}: {exc}") from exc
        entries.append({
            "id": entry_id,
            "file": rel,
            "seed": [spec.seed, index],
            "split": "train" if index < count - n_test else "test",
            "checksum": file_checksum(out_dir / rel),
        })
    manifest = {
        "spec": spec.to_dict(),
        "split": {"train": count - n_test, "test": n_test},
        "entries": entries,
    }
    try:
        write_json(out_dir / "manifest.json", manifest)
    except OSError as exc:
        raise OSError(f"cannot write manifest in {out_dir}: {exc}") from exc
    return manifest
