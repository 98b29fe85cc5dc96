"""Unpaired training corpus, paired test set, manifests and batch sampling.

Manifests are JSON-lines files: a header record carrying the format
version and split, then one record per stored volume. Volume payloads live
next to the manifest in the VXMR format.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .artifact_sim import MetalLabel, PhysicsParams, ProjectionGeometry, select_metal_teeth, simulate_artifacts
from .phantoms import Jitter, PhantomSpec, generate_phantom, perturb_phantom, retrace_teeth
from .volumes import (DomainTag, Volume, load_volume, normalize_hu, save_volume, window_starts)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

# named substreams of the global seed
STREAMS = {"phantoms": 1, "physics": 2, "training": 3, "sampling": 4, "labels": 5, "perturb": 6}


def substream_seed(global_seed: int, stream: str, *index: int) -> int:
    """Deterministic 32-bit seed for a named substream."""
    ss = np.random.SeedSequence([global_seed, STREAMS[stream], *index])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 0
    n_clean: int = 24
    n_artifact: int = 16
    n_test_phantoms: int = 6
    m_values: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    slice_range: tuple[int, int] = (14, 22)
    image_size: tuple[int, int] = (128, 128)
    perturb: bool = True
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    physics: PhysicsParams = field(default_factory=PhysicsParams)
    geometry: ProjectionGeometry | None = None

    def __post_init__(self):
        lo, hi = self.slice_range
        if not 3 <= lo <= hi:
            raise ValueError(f"bad slice range {self.slice_range}")
        if any(not 1 <= m <= 8 for m in self.m_values):
            raise ValueError("m values must lie in 1..8")
        if min(self.n_clean, self.n_artifact) < 0 or self.n_test_phantoms < 1:
            raise ValueError("corpus counts must be non-negative and n_test_phantoms >= 1")

    @property
    def projection(self) -> ProjectionGeometry:
        return self.geometry or ProjectionGeometry.for_image(self.image_size[1])


@dataclass(frozen=True)
class ManifestEntry:
    volume_path: str  # relative to the manifest directory
    volume_id: str
    domain_tag: str
    phantom_id: str
    m: int = 0
    seeds: dict = field(default_factory=dict)
    physics: dict | None = None
    tooth_ids: tuple[int, ...] = ()
    mask_path: str | None = None
    reference_id: str | None = None  # clean partner of a paired test volume


@dataclass
class DatasetManifest:
    split: str  # TRAIN or TEST
    entries: list[ManifestEntry]
    root: Path
    config: dict = field(default_factory=dict)
    format_version: int = MANIFEST_VERSION

    def by_domain(self, tag: DomainTag) -> list[ManifestEntry]:
        return [e for e in self.entries if e.domain_tag == tag.value]

    def entry(self, volume_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.volume_id == volume_id:
                return e
        raise KeyError(volume_id)

    def load(self, entry: ManifestEntry) -> Volume:
        return load_volume(self.root / entry.volume_path)

    def load_mask(self, entry: ManifestEntry) -> np.ndarray | None:
        if entry.mask_path is None:
            return None
        return load_volume(self.root / entry.mask_path).data > 0.5

    def phantom_ids(self) -> set[str]:
        return {e.phantom_id for e in self.entries}

    def pairs(self) -> list[tuple[ManifestEntry, ManifestEntry]]:
        """(clean reference, corrupted) pairs of a test manifest."""
        refs = {e.volume_id: e for e in self.entries if e.domain_tag == DomainTag.Y_CLEAN.value}
        return [(refs[e.reference_id], e) for e in self.entries if e.reference_id is not None]


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    header = {"format_version": manifest.format_version, "split": manifest.split, "config": manifest.config}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(asdict(e), sort_keys=True) for e in manifest.entries]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {header.get('format_version')}")
    entries = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        rec["tooth_ids"] = tuple(rec.get("tooth_ids", ()))
        entries.append(ManifestEntry(**rec))
    return DatasetManifest(header["split"], entries, path.parent, header.get("config", {}))


def check_no_leakage(train: DatasetManifest, test: DatasetManifest) -> None:
    shared = train.phantom_ids() & test.phantom_ids()
    if shared:
        raise ValueError(f"phantom ids shared between TRAIN and TEST: {sorted(shared)[:5]}")


# --- building ----------------------------------------------------------------

def _phantom(cfg: DatasetConfig, phantom_id: str, index: int, stream_index: int):
    seed = substream_seed(cfg.seed, "phantoms", stream_index, index)
    rng = np.random.default_rng(seed)
    lo, hi = cfg.slice_range
    spec = replace(cfg.phantom, seed=seed, n_slices=int(rng.integers(lo, hi + 1)), image_size=cfg.image_size)
    vol, teeth = generate_phantom(spec)
    seeds = {"phantom": seed}
    if cfg.perturb:
        seeds["perturb"] = substream_seed(cfg.seed, "perturb", stream_index, index)
        vol = perturb_phantom(vol, seeds["perturb"])
        teeth = retrace_teeth(vol, teeth)
    return replace(vol, volume_id=phantom_id), teeth, seeds


def _save(root: Path, vol: Volume, tag: DomainTag) -> str:
    rel = f"volumes/{vol.volume_id}.vxmr"
    save_volume(replace(vol, domain_tag=tag), root / rel)
    return rel


def _save_mask(root: Path, label: MetalLabel, like: Volume, name: str) -> str:
    rel = f"masks/{name}.vxmr"
    save_volume(like.with_data(label.mask.astype(np.float32), volume_id=name,
                               domain_tag=DomainTag.UNLABELED), root / rel)
    return rel


def _corrupt(cfg, clean, teeth, m, label_seed, noise_seed):
    label = select_metal_teeth(teeth, m, label_seed)
    params = replace(cfg.physics, noise_seed=noise_seed)
    return simulate_artifacts(clean, label, cfg.projection, params), label, params


def build_training_corpus(cfg: DatasetConfig, out_dir: str | os.PathLike) -> DatasetManifest:
    """Y: clean phantoms; X: corrupted phantoms from disjoint seeds (unpaired)."""
    root = Path(out_dir)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    entries = []
    for i in range(cfg.n_clean):
        pid = f"train-y-{i:03d}"
        vol, _, seeds = _phantom(cfg, pid, i, stream_index=0)
        entries.append(ManifestEntry(_save(root, vol, DomainTag.Y_CLEAN), pid, DomainTag.Y_CLEAN.value, pid, seeds=seeds))
    for i in range(cfg.n_artifact):
        pid = f"train-x-{i:03d}"
        clean, teeth, seeds = _phantom(cfg, pid, i, stream_index=1)
        pick = np.random.default_rng(substream_seed(cfg.seed, "labels", 1, i))
        m = int(pick.choice(cfg.m_values))
        seeds |= {"label": substream_seed(cfg.seed, "labels", 11, i),
                  "noise": substream_seed(cfg.seed, "physics", 1, i)}
        vol, label, params = _corrupt(cfg, clean, teeth, m, seeds["label"], seeds["noise"])
        vid = f"{pid}-m{m}"
        vol = replace(vol, volume_id=vid)
        entries.append(ManifestEntry(
            _save(root, vol, DomainTag.X_ARTIFACT), vid, DomainTag.X_ARTIFACT.value, pid, m=m, seeds=seeds,
            physics=asdict(params), tooth_ids=label.tooth_ids, mask_path=_save_mask(root, label, vol, vid),
        ))
        log.info("built %s", vid)
    manifest = DatasetManifest("TRAIN", entries, root, _config_record(cfg))
    write_manifest(manifest, root / "manifest.jsonl")
    return manifest


def build_paired_testset(cfg: DatasetConfig, out_dir: str | os.PathLike) -> DatasetManifest:
    """For each test phantom: the clean reference plus one corrupted volume per m (nested labels)."""
    root = Path(out_dir)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    entries = []
    for i in range(cfg.n_test_phantoms):
        pid = f"test-{i:03d}"
        clean, teeth, seeds = _phantom(cfg, pid, i, stream_index=2)
        entries.append(ManifestEntry(_save(root, clean, DomainTag.Y_CLEAN), pid, DomainTag.Y_CLEAN.value, pid, seeds=seeds))
        label_seed = substream_seed(cfg.seed, "labels", 2, i)
        noise_seed = substream_seed(cfg.seed, "physics", 2, i)
        for m in cfg.m_values:
            # same label seed for every m, so metal sets are nested
            vol, label, params = _corrupt(cfg, clean, teeth, m, label_seed, noise_seed)
            vid = f"{pid}-m{m}"
            vol = replace(vol, volume_id=vid)
            entries.append(ManifestEntry(
                _save(root, vol, DomainTag.X_ARTIFACT), vid, DomainTag.X_ARTIFACT.value, pid, m=m,
                seeds=seeds | {"label": label_seed, "noise": noise_seed}, physics=asdict(params),
                tooth_ids=label.tooth_ids, mask_path=_save_mask(root, label, vol, vid), reference_id=pid,
            ))
        log.info("built test phantom %s", pid)
    manifest = DatasetManifest("TEST", entries, root, _config_record(cfg))
    write_manifest(manifest, root / "manifest.jsonl")
    return manifest


def _config_record(cfg: DatasetConfig) -> dict:
    rec = asdict(cfg)
    rec["geometry"] = asdict(cfg.projection)
    return rec


# --- sampling ----------------------------------------------------------------

@dataclass
class UnpairedBatch:
    x: np.ndarray  # (B, N, H, W) normalized, domain X
    y: np.ndarray  # (B, N, H, W) normalized, domain Y
    x_ids: list[str]
    y_ids: list[str]
    x_starts: list[int]
    y_starts: list[int]


class UnpairedSampler:
    """Draws X and Y windows independently from preloaded, normalized volumes."""

    def __init__(self, manifest: DatasetManifest):
        if manifest.split != "TRAIN":
            raise ValueError("sampling requires a TRAIN manifest")
        self.domains = {}
        for tag in (DomainTag.X_ARTIFACT, DomainTag.Y_CLEAN):
            entries = manifest.by_domain(tag)
            if not entries:
                raise ValueError(f"manifest has no {tag.value} volumes")
            self.domains[tag] = [(e.phantom_id, normalize_hu(manifest.load(e)).data) for e in entries]

    def _draw(self, tag, n, batch_size, rng, crop):
        vols = self.domains[tag]
        out, ids, starts = [], [], []
        for _ in range(batch_size):
            pid, data = vols[int(rng.integers(len(vols)))]
            start = int(rng.choice(window_starts(data.shape[0], n)))
            win = data[start:start + n]
            if crop is not None:
                h, w = win.shape[1:]
                r0, c0 = int(rng.integers(h - crop + 1)), int(rng.integers(w - crop + 1))
                win = win[:, r0:r0 + crop, c0:c0 + crop]
            out.append(np.array(win, copy=True))
            ids.append(pid)
            starts.append(start)
        return np.stack(out), ids, starts

    def sample(self, n: int, batch_size: int, rng: np.random.Generator, crop: int | None = None) -> UnpairedBatch:
        x, xi, xs = self._draw(DomainTag.X_ARTIFACT, n, batch_size, rng, crop)
        y, yi, ys = self._draw(DomainTag.Y_CLEAN, n, batch_size, rng, crop)
        return UnpairedBatch(x, y, xi, yi, xs, ys)


def sample_unpaired_batch(manifest: DatasetManifest, n: int, batch_size: int, rng: np.random.Generator,
                          crop: int | None = None) -> UnpairedBatch:
    return UnpairedSampler(manifest).sample(n, batch_size, rng, crop)


__all__ = [
    "DatasetConfig", "DatasetManifest", "Jitter", "ManifestEntry", "UnpairedBatch", "UnpairedSampler",
    "build_paired_testset", "build_training_corpus", "check_no_leakage", "read_manifest",
    "sample_unpaired_batch", "substream_seed", "write_manifest",
]
