"""DSC, Hausdorff and average asymmetric surface distance, plus table aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import EmptyInput, EmptyMask, ShapeMismatch

NAN = float("nan")


@dataclass
class MetricResult:
    case_id: str
    dsc: float
    hd: float = NAN
    asd: float = NAN

    @property
    def distances_defined(self) -> bool:
        return not (math.isnan(self.hd) or math.isnan(self.asd))


def _data(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "data", mask)).astype(bool)


def dsc(a, b) -> float:
    a, b = _data(a), _data(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError("connectivity must be 6 or 26")


def surface_voxels(mask, spacing=(1.0, 1.0, 1.0), connectivity: int = 6) -> np.ndarray:
    """Foreground voxels touching background (or the border), as mm coordinates (N, 3)."""
    m = _data(mask)
    if not m.any():
        raise EmptyMask("surface of an empty mask")
    interior = ndimage.binary_erosion(m, structure=_structure(connectivity), border_value=0)
    idx = np.argwhere(m & ~interior)
    return idx.astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Per-point distance from ``src`` to the nearest point of ``dst``.

    The KD-tree only picks the neighbour; the distance is recomputed
    explicitly so repeated evaluations agree bit for bit.
    """
    _, nearest = cKDTree(dst).query(src, k=1)
    diff = src - dst[nearest]
    return np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2])


def _spacing_of(a, spacing):
    if spacing is not None:
        return spacing
    return getattr(a, "spacing", (1.0, 1.0, 1.0))


def hausdorff(a, b, spacing=None, connectivity: int = 6) -> float:
    spacing = _spacing_of(a, spacing)
    sa = surface_voxels(a, spacing, connectivity)
    sb = surface_voxels(b, spacing, connectivity)
    return float(max(_directed(sa, sb).max(), _directed(sb, sa).max()))


def asd(a, b, spacing=None, connectivity: int = 6) -> float:
    """Mean distance from the surface of ``a`` to the surface of ``b`` (directed a -> b)."""
    spacing = _spacing_of(a, spacing)
    sa = surface_voxels(a, spacing, connectivity)
    sb = surface_voxels(b, spacing, connectivity)
    return float(_directed(sa, sb).mean())


def evaluate_case(prediction, reference, case_id: str = "", spacing=None, direction: str = "pred_to_ref",
                  connectivity: int = 6) -> MetricResult:
    """All three metrics for one case; distances stay NaN when a mask is empty."""
    spacing = _spacing_of(reference, spacing)
    pred, ref = _data(prediction), _data(reference)
    result = MetricResult(case_id, dsc(pred, ref))
    if pred.any() and ref.any():
        result.hd = hausdorff(pred, ref, spacing, connectivity)
        src, dst = (pred, ref) if direction == "pred_to_ref" else (ref, pred)
        result.asd = asd(src, dst, spacing, connectivity)
    return result


@dataclass
class Summary:
    n: int
    mean: float
    std: float

    def render(self) -> str:
        if self.n == 0:
            return "n/a"
        return f"{self.mean:.4f} ± {self.std:.4f}"


def summarize(values: Sequence[float]) -> Summary:
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return Summary(0, NAN, NAN)
    arr = np.asarray(vals, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return Summary(len(arr), float(arr.mean()), std)


@dataclass
class TableRow:
    method: str
    n_cases: int
    dsc: Summary
    hd: Summary
    asd: Summary
    n_undefined: int

    def cells(self) -> list[str]:
        return [self.method, self.dsc.render(), self.hd.render(), self.asd.render(), str(self.n_undefined)]


def aggregate(results: Sequence[MetricResult], method: str = "") -> TableRow:
    if not results:
        raise EmptyInput("no results to aggregate")
    undefined = sum(not r.distances_defined for r in results)
    return TableRow(
        method,
        len(results),
        summarize([r.dsc for r in results]),
        summarize([r.hd for r in results]),
        summarize([r.asd for r in results]),
        undefined,
    )


HEADER = ["Method", "DSC ↑", "HD ↓", "ASD ↓", "undefined HD/ASD"]


def render_table(rows: Iterable[TableRow]) -> str:
    rows = sorted(rows, key=lambda r: r.method)
    lines = ["| " + " | ".join(HEADER) + " |", "|" + "---|" * len(HEADER)]
    lines += ["| " + " | ".join(r.cells()) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def write_case_csv(results: Sequence[MetricResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "dsc", "hd", "asd", "hd_undefined", "asd_undefined"])
        for r in results:
            writer.writerow([r.case_id, repr(r.dsc), repr(r.hd), repr(r.asd),
                             int(math.isnan(r.hd)), int(math.isnan(r.asd))])
    return path


def read_case_csv(path) -> list[MetricResult]:
    with open(path, newline="") as fh:
        return [MetricResult(row["case_id"], float(row["dsc"]), float(row["hd"]), float(row["asd"]))
                for row in csv.DictReader(fh)]


def write_table_csv(rows: Iterable[TableRow], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "n_cases", "dsc_mean", "dsc_std", "hd_mean", "hd_std",
                         "asd_mean", "asd_std", "n_undefined"])
        for r in sorted(rows, key=lambda r: r.method):
            writer.writerow([r.method, r.n_cases, r.dsc.mean, r.dsc.std, r.hd.mean, r.hd.std,
                             r.asd.mean, r.asd.std, r.n_undefined])
    return path


def as_dict(result: MetricResult) -> dict:
    return asdict(result)
