"""Whole-volume translation with a sliding window of N slices.

SEQUENTIAL feeds each window from the working copy, so N-1 of its input
slices are already corrected. SINGLE feeds every window from the original
volume. Both share the same window schedule and commit rule.
"""

from __future__ import annotations

import csv
import enum
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetManifest
from .volumes import DomainTag, ValueSpace, Volume, normalize_hu, save_volume, window_starts


class Mode(str, enum.Enum):
    SINGLE = "SINGLE"
    SEQUENTIAL = "SEQUENTIAL"


class Direction(str, enum.Enum):
    TOP_DOWN = "TOP_DOWN"
    BOTTOM_UP = "BOTTOM_UP"


@dataclass(frozen=True)
class TranslateConfig:
    n_slices: int = 3
    mode: Mode = Mode.SEQUENTIAL
    direction: Direction = Direction.TOP_DOWN

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")


def window_schedule(n_total: int, n: int, direction: Direction) -> list[int]:
    """Window start indices in processing order."""
    starts = list(window_starts(n_total, n, 1))
    return starts if Direction(direction) is Direction.TOP_DOWN else starts[::-1]


def committed_slices(step: int, n: int, direction: Direction) -> range:
    """Window-relative output slices kept at a given step.

    The first window commits all of its slices; later windows commit only the
    slice that entered the window last.
    """
    if step == 0:
        return range(n)
    newest = n - 1 if Direction(direction) is Direction.TOP_DOWN else 0
    return range(newest, newest + 1)


def _channels(G) -> int | None:
    return getattr(G, "n_channels", None)


def translate_volume(G, vol: Volume, cfg: TranslateConfig) -> Volume:
    """Translate a normalized volume; returns a new normalized volume."""
    if vol.value_space is not ValueSpace.NORMALIZED:
        raise ValueError("translate_volume expects a NORMALIZED volume")
    n = cfg.n_slices
    if _channels(G) not in (None, n):
        raise ValueError(f"generator takes {_channels(G)} slices but the config uses N={n}")
    original = vol.data
    work = np.array(original, dtype=np.float32, copy=True)
    source = work if cfg.mode is Mode.SEQUENTIAL else original
    was_training = getattr(G, "training", False)
    if hasattr(G, "eval"):
        G.eval()
    dtype = torch.float32
    if isinstance(G, torch.nn.Module):
        dtype = next(iter(G.parameters()), torch.empty(0)).dtype
    try:
        with torch.no_grad():
            for step, start in enumerate(window_schedule(vol.n_slices, n, cfg.direction)):
                inp = torch.as_tensor(np.array(source[start:start + n]), dtype=dtype)[None]
                out = G(inp)[0].to(torch.float32).numpy()
                for k in committed_slices(step, n, cfg.direction):
                    work[start + k] = out[k]
    finally:
        if was_training:
            G.train()
    return vol.with_data(np.clip(work, -1.0, 1.0))


def translate_batch(G, manifest: DatasetManifest, cfg: TranslateConfig, out_dir: str | os.PathLike,
                    domain: DomainTag = DomainTag.X_ARTIFACT) -> list[Volume]:
    """Translate every ``domain`` volume of the manifest; writes volumes and timing.csv."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    results, timings = [], []
    for entry in manifest.by_domain(domain):
        vol = normalize_hu(manifest.load(entry))
        t0 = time.perf_counter()
        res = translate_volume(G, vol, cfg)
        timings.append((entry.volume_id, time.perf_counter() - t0))
        res = replace(res, domain_tag=DomainTag.Y_CLEAN)
        save_volume(res, out / "volumes" / f"{entry.volume_id}.vxmr")
        results.append(res)
    with (out / "timing.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["volume_id", "seconds"])
        writer.writerows((vid, f"{sec:.6f}") for vid, sec in timings)
    return results
