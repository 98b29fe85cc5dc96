"""RMSE, SSIM, SSIM improvement rate and per-(m, method) median tables."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .volumes import ValueSpace, Volume, WINDOW_HU

SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _hu(x) -> np.ndarray:
    if isinstance(x, Volume):
        scale = WINDOW_HU if x.value_space is ValueSpace.NORMALIZED else 1.0
        return x.data.astype(np.float64) * scale
    return np.asarray(x, dtype=np.float64)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def rmse(ref, test, mask=None) -> float:
    """Root mean squared HU difference; voxels where ``mask`` is true are excluded."""
    a, b = _hu(ref), _hu(test)
    _check_shapes(a, b)
    diff = a - b
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        _check_shapes(mask, diff)
        diff = diff[~mask]
    if diff.size == 0:
        raise ValueError("rmse over an empty voxel set")
    return float(np.sqrt(np.mean(diff * diff)))


def gaussian_kernel(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only positions where the window fits."""
    n = len(k)
    h, w = img.shape[-2:]
    rows = sum(k[j] * img[..., j:h - n + 1 + j, :] for j in range(n))
    return sum(k[j] * rows[..., :, j:w - n + 1 + j] for j in range(n))


def to_display(x, lo: float = -WINDOW_HU, hi: float = WINDOW_HU) -> np.ndarray:
    """HU mapped linearly from [lo, hi] to [0, 1] with clamping."""
    return (np.clip(_hu(x), lo, hi) - lo) / (hi - lo)


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over (..., H, W) images; output shrinks by the window size minus one."""
    if a.shape[-1] < SSIM_WIN or a.shape[-2] < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}x{SSIM_WIN}")
    k = gaussian_kernel()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a * mu_a
    var_b = _filter_valid(b * b, k) - mu_b * mu_b
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(ref, test, mask=None) -> float:
    """Mean local SSIM per slice on the [-1000, 1000] HU display range, averaged over slices.

    With ``mask``, window centres on masked voxels are excluded.
    """
    a, b = to_display(ref), to_display(test)
    _check_shapes(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
        mask = None if mask is None else np.asarray(mask)[None]
    smap = ssim_map(a, b)
    if mask is None:
        return float(smap.mean(axis=(1, 2)).mean())
    r = SSIM_WIN // 2
    keep = ~np.asarray(mask, dtype=bool)[:, r:-r, r:-r]
    per_slice = [s[k].mean() for s, k in zip(smap, keep) if k.any()]
    if not per_slice:
        raise ValueError("mask excludes every SSIM window")
    return float(np.mean(per_slice))


def improvement_rate(ssim_corrected: float, ssim_original: float) -> float:
    """Percent SSIM change of a corrected volume relative to its original."""
    if not ssim_original > 0:
        raise ValueError(f"original SSIM must be positive, got {ssim_original}")
    return (ssim_corrected - ssim_original) / ssim_original * 100.0


# --- reports -----------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    volume_id: str
    phantom_id: str
    m: int
    method: str
    rmse_hu: float
    ssim: float
    ssim_original: float
    r_s: float
    rmse_masked: float
    ssim_masked: float
    r_s_masked: float

    def check(self, tol: float = 1e-9):
        if abs(self.r_s - improvement_rate(self.ssim, self.ssim_original)) > tol:
            raise ValueError(f"{self.volume_id}/{self.method}: r_s inconsistent with ssim fields")


COLUMNS = tuple(f.name for f in fields(MetricsRow))
NUMERIC = ("rmse_hu", "ssim", "ssim_original", "r_s", "rmse_masked", "ssim_masked", "r_s_masked")


def evaluate_pair(reference: Volume, original: Volume, corrected: Volume | None, metal_mask, *,
                  volume_id: str, phantom_id: str, m: int, method: str) -> MetricsRow:
    """Metrics of ``corrected`` (or ``original`` when None) against the reference.

    HU values are clamped to the display window first, so saturated metal does
    not dominate the error of outputs that live in the normalized range.
    """
    ref, orig = np.clip(_hu(reference), -WINDOW_HU, WINDOW_HU), np.clip(_hu(original), -WINDOW_HU, WINDOW_HU)
    test = orig if corrected is None else np.clip(_hu(corrected), -WINDOW_HU, WINDOW_HU)
    s_orig, s = ssim(ref, orig), ssim(ref, test)
    s_orig_m, s_m = ssim(ref, orig, metal_mask), ssim(ref, test, metal_mask)
    return MetricsRow(
        volume_id, phantom_id, m, method,
        rmse(ref, test), s, s_orig, improvement_rate(s, s_orig),
        rmse(ref, test, metal_mask), s_m, improvement_rate(s_m, s_orig_m),
    )


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    aggregates: list[dict] = field(default_factory=list)
    group_keys: tuple[str, ...] = ("m", "method")
    omissions: list[str] = field(default_factory=list)

    def median(self, column: str, **where) -> float:
        vals = [getattr(r, column) for r in self.rows if all(getattr(r, k) == v for k, v in where.items())]
        if not vals:
            raise KeyError(f"no rows match {where}")
        return float(statistics.median(vals))

    def write_rows(self, path) -> Path:
        return _write_csv(path, COLUMNS, [asdict(r) for r in self.rows])

    def write_aggregates(self, path) -> Path:
        cols = (*self.group_keys, "count", *NUMERIC)
        return _write_csv(path, cols, self.aggregates)

    def write_omissions(self, path) -> Path:
        Path(path).write_text("".join(f"{o}\n" for o in self.omissions), encoding="utf-8")
        return Path(path)


def _write_csv(path, columns, records) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for rec in records:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items() if k in columns})
    return path


def aggregate(rows, group_keys=("m", "method")) -> MetricsReport:
    """Median of every numeric column per group (even counts average the central pair)."""
    rows = list(rows)
    if not rows:
        raise ValueError("aggregate needs at least one row")
    for r in rows:
        r.check()
    groups: dict[tuple, list[MetricsRow]] = {}
    for r in rows:
        groups.setdefault(tuple(getattr(r, k) for k in group_keys), []).append(r)
    aggregates = []
    for key in sorted(groups, key=lambda k: tuple(str(v).zfill(8) for v in k)):
        members = groups[key]
        rec = dict(zip(group_keys, key))
        rec["count"] = len(members)
        for col in NUMERIC:
            rec[col] = float(statistics.median(getattr(r, col) for r in members))
        aggregates.append(rec)
    return MetricsReport(rows, aggregates, tuple(group_keys))


# --- figures -----------------------------------------------------------------------

def _png(img_hu: np.ndarray, window: float, level: float, path: Path):
    lo = level - window / 2
    grey = np.clip((img_hu - lo) / window, 0.0, 1.0)
    Image.fromarray(np.round(grey * 255).astype(np.uint8), mode="L").save(path)


def emit_figures(report: MetricsReport, pairs, out_dir, slice_indices=None,
                 window: float = 2000.0, level: float = 0.0, diff_window: float = 500.0) -> list[Path]:
    """Grey-level slices of reference/original/corrected, difference maps and scatter CSVs.

    ``pairs`` is a list of (volume_id, reference, original, corrected) with
    volumes in HU or normalized units. Returns the written files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    wl = f"W{window:g}L{level:g}"
    dwl = f"W{diff_window:g}L{diff_window / 2:g}"
    for vid, ref, orig, corr in pairs:
        ref_hu, orig_hu, corr_hu = (_hu(v) for v in (ref, orig, corr))
        indices = slice_indices if slice_indices is not None else [ref_hu.shape[0] // 2]
        for z in indices:
            for name, img in (("reference", ref_hu), ("original", orig_hu), ("corrected", corr_hu)):
                path = out / f"{vid}_z{z:03d}_{name}_{wl}.png"
                _png(img[z], window, level, path)
                written.append(path)
            for name, img in (("diff_original", orig_hu), ("diff_corrected", corr_hu)):
                path = out / f"{vid}_z{z:03d}_{name}_{dwl}.png"
                _png(np.abs(img[z] - ref_hu[z]), diff_window, diff_window / 2, path)
                written.append(path)
    originals = {r.volume_id: r for r in report.rows if r.method == "original"}
    scatter = [
        {"volume_id": r.volume_id, "m": r.m, "method": r.method,
         "rmse_original": originals[r.volume_id].rmse_hu, "rmse_corrected": r.rmse_hu,
         "ssim_original": r.ssim_original, "ssim_corrected": r.ssim}
        for r in report.rows if r.method != "original" and r.volume_id in originals
    ]
    cols = ("volume_id", "m", "method", "rmse_original", "rmse_corrected", "ssim_original", "ssim_corrected")
    written.append(_write_csv(out / "scatter.csv", cols, scatter))
    return written


def is_finite_report(report: MetricsReport) -> bool:
    return all(math.isfinite(getattr(r, c)) for r in report.rows for c in NUMERIC)
