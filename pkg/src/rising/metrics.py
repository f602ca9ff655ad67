"""Full-reference image quality metrics and their aggregate reports.

``relative_error`` keeps the squared-norm ratio
``||x - x_gt||^2 / ||x_gt||^2`` (not the more common unsquared ratio).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def relative_error(x: np.ndarray, x_gt: np.ndarray) -> float:
    x, x_gt = _pair(x, x_gt)
    denom = float(np.sum(x_gt * x_gt))
    if denom == 0:
        raise ValueError("relative error is undefined for an all-zero ground truth")
    return float(np.sum((x - x_gt) ** 2)) / denom


def rmse(x: np.ndarray, y: np.ndarray) -> float:
    x, y = _pair(x, y)
    return math.sqrt(float(np.sum((x - y) ** 2)) / x.size)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img, w):
    # separable correlation, keeping only positions where the window fits
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    half = len(w) // 2
    return out[half : img.shape[0] - half, half : img.shape[1] - half]


def ssim(x: np.ndarray, y: np.ndarray, data_range: float = 1.0, win_size: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with a Gaussian window, computed on valid window positions."""
    x, y = _pair(x, y)
    if min(x.shape) < win_size:
        raise ValueError(f"images smaller than the {win_size}x{win_size} window")
    w = gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(y * y, w) - my * my
    sxy = _filter_valid(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


METRICS = ("re", "rmse", "ssim")


@dataclass
class MetricsReport:
    """Per-image metric records plus mean/std aggregates per ``(role, metric)``.

    ``reference`` names what the metrics were computed against (``"gt"`` by
    default, ``"is"`` for the learnability analysis).
    """

    records: list[dict] = field(default_factory=list)

    def add(self, image_id: str, role: str, x: np.ndarray, reference: np.ndarray, reference_name: str = "gt",
            column: str = ""):
        self.records.append({
            "id": image_id,
            "role": role,
            "reference": reference_name,
            "column": column,
            "re": relative_error(x, reference) if np.any(reference) else math.nan,
            "rmse": rmse(x, reference),
            "ssim": ssim(x, reference),
        })

    def aggregate(self) -> dict[tuple[str, str, str, str], tuple[float, float]]:
        """``{(column, role, reference, metric): (mean, population std)}``."""
        groups: dict[tuple[str, str, str], list[dict]] = {}
        for rec in self.records:
            groups.setdefault((rec["column"], rec["role"], rec["reference"]), []).append(rec)
        out = {}
        for (column, role, ref), recs in groups.items():
            for metric in METRICS:
                vals = np.array([r[metric] for r in recs], dtype=float)
                out[(column, role, ref, metric)] = (float(np.mean(vals)), float(np.std(vals)))
        return out

    def mean(self, role: str, metric: str, reference: str = "gt", column: str = "") -> float:
        return self.aggregate()[(column, role, reference, metric)][0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["id", "column", "role", "reference", *METRICS])
            writer.writeheader()
            for rec in self.records:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})

    @classmethod
    def from_csv(cls, path) -> "MetricsReport":
        report = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rec = dict(row)
                for metric in METRICS:
                    rec[metric] = float(rec[metric])
                report.records.append(rec)
        return report

    def format_table(self, reference: str = "gt") -> str:
        """Text table: rows are metric x role, columns are configurations, cells ``mean ± std``."""
        agg = self.aggregate()
        columns = sorted({k[0] for k in agg if k[2] == reference}, key=str)
        roles = []
        for rec in self.records:
            if rec["reference"] == reference and rec["role"] not in roles:
                roles.append(rec["role"])
        head = ["", ""] + [c or "value" for c in columns]
        rows = [head]
        for metric in METRICS:
            for i, role in enumerate(roles):
                row = [metric.upper() if i == 0 else "", role]
                for column in columns:
                    cell = agg.get((column, role, reference, metric))
                    row.append("-" if cell is None else f"{cell[0]:.4f} ± {cell[1]:.4f}")
                rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines)
