"""Unoriented angular error, RMSE and benchmark reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, InvalidInput, ShapeError

# Average RMSE (degrees) reported on the PCPNet test set with Gaussian noise.
# Documentation only: desk-scale synthetic runs are not expected to match.
REFERENCE_RMSE = {
    "note": "published PCPNet-benchmark averages; not reproducible at desk scale",
    "reproducible_at_desk_scale": False,
    "noise_levels": [0.0036, 0.006, 0.0084, 0.012],
    "methods": {
        "weighted normals": [13.25, 16.38, 18.57, 21.48, 17.42],
        "PCA small (k=18)": [29.49, 41.82, 48.40, 53.34, 43.26],
        "PCA medium (k=112)": [15.07, 18.47, 22.27, 27.72, 20.88],
        "PCA large (k=450)": [17.54, 18.99, 20.87, 23.54, 20.23],
    },
}


def _check_unit(v, what):
    norms = np.linalg.norm(v, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= 1e-6):
        raise InvalidInput(f"{what} must be unit vectors")


def unoriented_angle(a, b) -> np.ndarray | float:
    """Angle in degrees between lines spanned by ``a`` and ``b``, in [0, 90]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.shape[-1] != 3:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not matching 3-vectors")
    _check_unit(a, "a")
    _check_unit(b, "b")
    c = np.minimum(1.0, np.abs(np.sum(a * b, axis=-1)))
    deg = np.degrees(np.arccos(c))
    return float(deg) if deg.ndim == 0 else deg


def rmse_degrees(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) != len(gt):
        raise ShapeError(f"{len(pred)} predictions for {len(gt)} ground-truth normals")
    if len(pred) == 0:
        raise InvalidInput("rmse of an empty set")
    ang = unoriented_angle(pred, gt)
    return float(np.sqrt(np.mean(np.square(ang))))


@dataclass
class EvalRow:
    method: str
    shape: str
    noise: float
    rmse: float
    count: int


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def noise_levels(self) -> list[float]:
        return sorted({r.noise for r in self.rows})

    def mean_by_noise(self, method: str) -> dict[float, float]:
        out = {}
        for level in self.noise_levels():
            vals = [r.rmse for r in self.rows if r.method == method and r.noise == level]
            if vals:
                out[level] = float(np.mean(vals))
        return out

    def overall_mean(self, method: str) -> float:
        """Mean over noise levels of the per-level shape averages."""
        per = self.mean_by_noise(method)
        return float(np.mean(list(per.values())))

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["method", "shape", "noise", "rmse_deg", "points"])
        for r in self.rows:
            w.writerow([r.method, r.shape, f"{r.noise:g}", f"{r.rmse:.6f}", r.count])
        return buf.getvalue()

    def summary(self) -> str:
        levels = self.noise_levels()
        head = ["noise"] + self.methods()
        table = []
        for level in levels:
            table.append([f"{100 * level:.2f}%"] + [
                f"{self.mean_by_noise(m).get(level, float('nan')):.2f}" for m in self.methods()])
        table.append(["avg"] + [f"{self.overall_mean(m):.2f}" for m in self.methods()])
        widths = [max(len(str(row[i])) for row in [head] + table) for i in range(len(head))]
        lines = ["  ".join(str(c).rjust(w) for c, w in zip(row, widths)) for row in [head] + table]
        lines.append("")
        lines.append("unoriented RMSE in degrees, averaged per shape then across shapes")
        return "\n".join(lines) + "\n"

    def write(self, directory, stem: str = "report"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.tsv").write_text(self.to_tsv())
        (directory / f"{stem}.txt").write_text(self.summary())


def benchmark(methods: dict, entries, clouds=None, queries=None) -> EvalReport:
    """Run every method on every dataset entry.

    ``methods`` maps a name to ``fn(cloud, indices) -> (len(indices), 3)``.
    ``clouds`` optionally supplies pre-built clouds keyed by entry name and
    ``queries`` the evaluated point indices per entry (default: all points).
    """
    report = EvalReport(metadata={"reference": REFERENCE_RMSE})
    for entry in entries:
        cloud = clouds[entry.name] if clouds is not None else entry.build()
        if cloud.normals is None:
            raise ConsistencyError(f"{entry.name} has no ground-truth normals")
        idx = np.arange(len(cloud)) if queries is None else np.asarray(queries[entry.name])
        for name, fn in methods.items():
            pred = np.asarray(fn(cloud, idx))
            if pred.shape != (len(idx), 3):
                raise ConsistencyError(f"{name} returned {pred.shape} for {len(idx)} points of {entry.name}")
            report.rows.append(EvalRow(name, entry.shape.name, float(entry.noise.level),
                                       rmse_degrees(pred, cloud.normals[idx]), len(idx)))
    return report
