"""Monocular depth evaluation with depth capping and per-image median scaling."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

ERROR_KEYS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "log10")
ACCURACY_KEYS = ("delta1", "delta2", "delta3")
METRIC_KEYS = ERROR_KEYS + ACCURACY_KEYS


class MetricsError(ValueError):
    """No valid pixels, or prediction and ground truth disagree in shape."""


@dataclass(frozen=True)
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    n_images: int = 1
    cap: float = 80.0
    median_scaled: bool = True

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in METRIC_KEYS)

    def as_dict(self) -> dict:
        return asdict(self)


def valid_mask(gt: np.ndarray, cap: float, crop: Optional[Callable[[tuple], np.ndarray]] = None) -> np.ndarray:
    """gt > 0 and gt <= cap, optionally intersected with a crop mask built from the image shape."""
    mask = (gt > 0) & (gt <= cap)
    if crop is not None:
        mask &= crop(gt.shape)
    return mask


def image_metrics(pred: np.ndarray, gt: np.ndarray, cap: float = 80.0, cap_min: float = 1e-3,
                  median_scale: bool = True, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """The eight metrics of one depth map, in ``METRIC_KEYS`` order."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricsError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if mask is None:
        mask = valid_mask(gt, cap)
    if not mask.any():
        raise MetricsError("validity mask is empty")
    p, g = pred[mask], gt[mask]
    if median_scale:
        p = p * (np.median(g) / np.median(p))
    p = np.clip(p, cap_min, cap)

    diff = p - g
    log_diff = np.log(p) - np.log(g)
    ratio = np.maximum(p / g, g / p)
    return np.array([
        np.mean(np.abs(diff) / g),
        np.mean(diff ** 2 / g),
        np.sqrt(np.mean(diff ** 2)),
        np.sqrt(np.mean(log_diff ** 2)),
        np.mean(np.abs(np.log10(p) - np.log10(g))),
        np.mean(ratio < 1.25),
        np.mean(ratio < 1.25 ** 2),
        np.mean(ratio < 1.25 ** 3),
    ])


def compute_metrics(preds: Sequence[np.ndarray] | np.ndarray, gts: Sequence[np.ndarray] | np.ndarray,
                    cap: float = 80.0, cap_min: float = 1e-3, median_scale: bool = True,
                    crop: Optional[Callable[[tuple], np.ndarray]] = None) -> MetricsReport:
    """Per-image metrics averaged with equal weight per image.

    A single (H, W) pair is treated as a one-image dataset.
    """
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, gts = [preds], [gts]
    if len(preds) != len(gts):
        raise MetricsError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    if not len(preds):
        raise MetricsError("nothing to evaluate")
    rows = [image_metrics(p, g, cap, cap_min, median_scale, valid_mask(np.asarray(g), cap, crop))
            for p, g in zip(preds, gts)]
    mean = np.mean(rows, axis=0)
    return MetricsReport(*(float(v) for v in mean), n_images=len(rows), cap=cap, median_scaled=median_scale)


_HEADERS = {"abs_rel": "Abs Rel", "sq_rel": "Sq Rel", "rmse": "RMSE", "rmse_log": "RMSE log",
            "log10": "log10", "delta1": "d<1.25", "delta2": "d<1.25^2", "delta3": "d<1.25^3"}


def format_table(report: MetricsReport, label: str = "model", notes: Iterable[str] = ()) -> str:
    keys = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3", "log10")
    width = max(10, len(label))
    lines = [f"# {n}" for n in notes]
    lines.append(f"# images={report.n_images} cap={report.cap:g} median_scaled={str(report.median_scaled).lower()}")
    lines.append(f"{'':<{width}}" + "".join(f"{_HEADERS[k]:>11}" for k in keys))
    lines.append(f"{label:<{width}}" + "".join(f"{getattr(report, k):>11.4f}" for k in keys))
    return "\n".join(lines) + "\n"


def write_metrics(report: MetricsReport, path: Path) -> None:
    """``key=value`` lines with full float precision."""
    out = []
    for f in fields(report):
        v = getattr(report, f.name)
        out.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else repr(v)}")
    Path(path).write_text("\n".join(out) + "\n")


def read_metrics(path: Path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        k, v = line.split("=", 1)
        out[k] = v == "true" if v in ("true", "false") else float(v)
    return out
