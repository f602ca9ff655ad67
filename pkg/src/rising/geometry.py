"""Acquisition geometry: the image grid and parallel/fan-beam scan descriptions.

Coordinates are dimensionless. The image is centred on the origin, column index
grows with ``x`` and row index grows with ``-y`` (row 0 is the top row), so a
``(n, n)`` numpy array maps directly onto the grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PARALLEL = "parallel"
FAN = "fan"


@dataclass(frozen=True)
class GridSpec:
    """Square ``n x n`` pixel grid centred at the origin."""

    n: int
    pixel_size: float = 1.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"grid size n must be an integer >= 2, got {self.n!r}")
        if not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size!r}")

    @property
    def half_width(self) -> float:
        return 0.5 * self.n * self.pixel_size

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x, y)`` arrays of shape ``(n, n)`` holding pixel-centre coordinates."""
        offsets = (np.arange(self.n) - (self.n - 1) / 2.0) * self.pixel_size
        x = np.broadcast_to(offsets[None, :], self.shape)
        y = np.broadcast_to(-offsets[:, None], self.shape)
        return x, y

    def to_dict(self) -> dict:
        return {"n": self.n, "pixel_size": self.pixel_size}


@dataclass(frozen=True)
class ScanGeometry:
    """Parallel- or fan-beam acquisition over a list of source angles (degrees).

    For fan beam, ``source_to_center`` is the source/rotation-axis distance and
    ``source_to_detector`` the source/detector distance. Parallel beam ignores both.
    """

    mode: str
    angles: tuple[float, ...]
    num_detectors: int
    detector_spacing: float
    source_to_center: float | None = None
    source_to_detector: float | None = None
    _angles_rad: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        object.__setattr__(self, "angles", angles)
        if self.mode not in (PARALLEL, FAN):
            raise ValueError(f"mode must be 'parallel' or 'fan', got {self.mode!r}")
        if not angles:
            raise ValueError("at least one view angle is required")
        arr = np.asarray(angles)
        if np.any(arr < 0) or np.any(arr >= 360):
            raise ValueError("angles must lie in [0, 360)")
        if np.any(np.diff(arr) <= 0):
            raise ValueError("angles must be strictly increasing")
        if int(self.num_detectors) != self.num_detectors or self.num_detectors < 1:
            raise ValueError("num_detectors must be a positive integer")
        if not self.detector_spacing > 0:
            raise ValueError("detector_spacing must be positive")
        if self.mode == FAN:
            dso, dsd = self.source_to_center, self.source_to_detector
            if dso is None or dsd is None or not dso > 0 or not dsd > 0:
                raise ValueError("fan beam needs positive source_to_center and source_to_detector")
            if not dsd > dso:
                raise ValueError("source_to_detector must exceed source_to_center")
        object.__setattr__(self, "_angles_rad", np.deg2rad(arr))

    @property
    def num_views(self) -> int:
        return len(self.angles)

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.num_views, self.num_detectors)

    def detector_offsets(self) -> np.ndarray:
        return (np.arange(self.num_detectors) - (self.num_detectors - 1) / 2.0) * self.detector_spacing

    def ray_endpoints(self, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
        """Source and destination points of every ray, each of shape ``(views, detectors, 2)``.

        Endpoints depend only on the geometry (and, for parallel beam, on the
        grid extent used to place the ends safely outside the image).
        """
        theta = self._angles_rad
        e_s = np.stack([np.cos(theta), np.sin(theta)], axis=-1)[:, None, :]
        e_u = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)[:, None, :]
        u = self.detector_offsets()[None, :, None]
        if self.mode == PARALLEL:
            reach = 2.0 * grid.half_width * math.sqrt(2.0) + 1.0
            src = u * e_u + reach * e_s
            dst = u * e_u - reach * e_s
        else:
            dso, dsd = self.source_to_center, self.source_to_detector
            src = np.broadcast_to(dso * e_s, (self.num_views, self.num_detectors, 2))
            dst = -(dsd - dso) * e_s + u * e_u
        return np.ascontiguousarray(src), np.ascontiguousarray(dst)

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "angles_deg": list(self.angles),
            "num_detectors": self.num_detectors,
            "detector_spacing": self.detector_spacing,
        }
        if self.mode == FAN:
            out["dso"] = self.source_to_center
            out["dsd"] = self.source_to_detector
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ScanGeometry":
        if "angles_deg" in doc:
            angles = doc["angles_deg"]
            if isinstance(angles, dict):
                angles = _expand_angle_range(angles)
        else:
            angles = doc["angles"]
        return cls(
            mode=doc["mode"],
            angles=tuple(angles),
            num_detectors=int(doc["num_detectors"]),
            detector_spacing=float(doc["detector_spacing"]),
            source_to_center=doc.get("dso"),
            source_to_detector=doc.get("dsd"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ScanGeometry":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _expand_angle_range(doc: dict) -> list[float]:
    start, count, step = float(doc["start_deg"]), int(doc["count"]), float(doc["step_deg"])
    return [start + i * step for i in range(count)]


def protocol_angles(angular_range: float, num_views: int) -> list[float]:
    """Angles of protocol ``P_{range, views}``: ``num_views`` evenly spaced over ``[0, range)``."""
    if num_views < 1 or not 0 < angular_range <= 360:
        raise ValueError(f"invalid protocol P_{{{angular_range},{num_views}}}")
    step = angular_range / num_views
    return [i * step for i in range(num_views)]


def parse_protocol(name: str) -> tuple[float, int]:
    """Parse ``"P_360_60"``, ``"P_{360,60}"`` or ``"360,60"`` into ``(range, views)``."""
    cleaned = name.strip()
    for token in ("P_", "p_", "{", "}"):
        cleaned = cleaned.replace(token, "")
    parts = [p for p in cleaned.replace("_", ",").split(",") if p]
    if len(parts) != 2:
        raise ValueError(f"cannot parse protocol name {name!r}")
    return float(parts[0]), int(parts[1])


def default_fan_geometry(grid: GridSpec, angles) -> ScanGeometry:
    """Fan beam with source at ``2n`` and detector at ``4n`` pixel lengths, ``2n`` cells.

    The detector spacing is chosen so the fan exactly covers the circle
    circumscribing the image.
    """
    ps = grid.pixel_size
    dso = 2.0 * grid.n * ps
    dsd = 4.0 * grid.n * ps
    num_det = 2 * grid.n
    radius = grid.half_width * math.sqrt(2.0)
    half_fan = math.asin(radius / dso)
    spacing = 2.0 * dsd * math.tan(half_fan) / num_det
    return ScanGeometry(FAN, tuple(angles), num_det, spacing, dso, dsd)


def default_parallel_geometry(grid: GridSpec, angles) -> ScanGeometry:
    """Parallel beam whose ``2n`` detector cells span the image diagonal."""
    num_det = 2 * grid.n
    spacing = 2.0 * grid.half_width * math.sqrt(2.0) / num_det
    return ScanGeometry(PARALLEL, tuple(angles), num_det, spacing)


def protocol_geometry(grid: GridSpec, protocol: str, mode: str = FAN) -> ScanGeometry:
    angular_range, views = parse_protocol(protocol)
    angles = protocol_angles(angular_range, views)
    if mode == FAN:
        return default_fan_geometry(grid, angles)
    return default_parallel_geometry(grid, angles)
