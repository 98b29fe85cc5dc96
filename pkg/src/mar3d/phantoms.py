"""Procedural head phantoms with a mandible arc and teeth.

Phantoms are built slice by slice from ellipses whose parameters vary
smoothly along z. Anterior points toward row 0; slice 0 is the top of
the stack, teeth sit in a middle band of slices and the mandible body
fills the slices below them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volumes import HU_MAX, HU_MIN, Volume

EDGE_WIDTH = 2.0
MIN_IMAGE = 80
TOOTH_THRESHOLD_HU = 1250.0


class ArchPosition(str, enum.Enum):
    BACK_LEFT = "BACK_LEFT"
    SIDE_LEFT = "SIDE_LEFT"
    FRONT = "FRONT"
    SIDE_RIGHT = "SIDE_RIGHT"
    BACK_RIGHT = "BACK_RIGHT"


ARCH_CLASS = {
    ArchPosition.BACK_LEFT: "BACK",
    ArchPosition.BACK_RIGHT: "BACK",
    ArchPosition.SIDE_LEFT: "SIDE",
    ArchPosition.SIDE_RIGHT: "SIDE",
    ArchPosition.FRONT: "FRONT",
}


def arch_layout(n_teeth: int) -> list[ArchPosition]:
    """Arch classes for teeth ordered from the back-left molar to the back-right molar."""
    if n_teeth < 10:
        raise ValueError("need at least 10 teeth for two teeth per arch class")
    n_back = max(2, round(n_teeth * 3 / 14))
    n_side = max(2, round(n_teeth * 2 / 14))
    n_front = n_teeth - 2 * (n_back + n_side)
    if n_front < 2:
        raise ValueError(f"cannot lay out {n_teeth} teeth with two front teeth")
    return ([ArchPosition.BACK_LEFT] * n_back + [ArchPosition.SIDE_LEFT] * n_side
            + [ArchPosition.FRONT] * n_front
            + [ArchPosition.SIDE_RIGHT] * n_side + [ArchPosition.BACK_RIGHT] * n_back)


@dataclass(frozen=True)
class Jitter:
    """Magnitudes of the per-phantom random perturbations."""

    geometry: float = 0.05  # relative size/position jitter
    tooth_hu: float = 50.0
    tooth_slices: int = 1


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    n_slices: int = 16
    image_size: tuple[int, int] = (128, 128)
    n_teeth: int = 14
    tissue_hu: float = 40.0
    bone_hu: float = 900.0
    tooth_hu: float = 1400.0
    air_hu: float = -1000.0
    spacing_mm: tuple[float, float, float] = (2.0, 1.5, 1.5)
    jitter: Jitter = field(default_factory=Jitter)

    def __post_init__(self):
        if not self.air_hu < self.tissue_hu < self.bone_hu < self.tooth_hu:
            raise ValueError("HU levels must satisfy air < tissue < bone < tooth")
        if self.n_slices < 3:
            raise ValueError("phantoms need at least 3 slices")
        if not (HU_MIN <= self.air_hu and self.tooth_hu + self.jitter.tooth_hu <= HU_MAX):
            raise ValueError("HU levels outside the representable range")
        if self.jitter.tooth_hu >= self.tooth_hu - TOOTH_THRESHOLD_HU:
            raise ValueError("tooth HU jitter would push teeth below the tooth threshold")


@dataclass(frozen=True)
class ToothRegion:
    tooth_id: int
    voxels: np.ndarray  # flat indices into the volume, sorted
    arch_position: ArchPosition
    arc_index: int  # position along the arch, 0 = back-left


@dataclass(frozen=True)
class ToothIndexMap:
    shape: tuple[int, int, int]
    teeth: tuple[ToothRegion, ...]

    def __post_init__(self):
        seen: set[int] = set()
        for t in self.teeth:
            if t.voxels.size == 0:
                raise ValueError(f"tooth {t.tooth_id} has an empty region")
            vox = set(t.voxels.tolist())
            if vox & seen:
                raise ValueError(f"tooth {t.tooth_id} overlaps another tooth")
            seen |= vox

    def region_mask(self, tooth_id: int) -> np.ndarray:
        mask = np.zeros(int(np.prod(self.shape)), dtype=bool)
        mask[self.tooth(tooth_id).voxels] = True
        return mask.reshape(self.shape)

    def tooth(self, tooth_id: int) -> ToothRegion:
        for t in self.teeth:
            if t.tooth_id == tooth_id:
                return t
        raise KeyError(tooth_id)

    def counts(self) -> dict[ArchPosition, int]:
        out = {p: 0 for p in ArchPosition}
        for t in self.teeth:
            out[t.arch_position] += 1
        return out


def _coverage(shape_fn, h: int, w: int) -> np.ndarray:
    """Pixel coverage in [0, 1] of an implicit shape with a soft edge.

    ``shape_fn(x, y)`` returns an approximate signed distance in pixels
    (negative inside). Edges ramp linearly over EDGE_WIDTH pixels, which
    stands in for the point spread of a real scanner.
    """
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.clip(0.5 - shape_fn(x, y) / EDGE_WIDTH, 0.0, 1.0)


def _ellipse(cx, cy, a, b, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)

    def dist(x, y):
        u = (x - cx) * c + (y - cy) * s
        v = -(x - cx) * s + (y - cy) * c
        rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        grad = np.sqrt((u / a ** 2) ** 2 + (v / b ** 2) ** 2) / np.maximum(rho, 1e-9)
        return (rho - 1.0) / np.maximum(grad, 1e-9 + 1.0 / max(a, b))
    return dist


def _paint(img, alpha, value):
    img *= 1.0 - alpha
    img += alpha * value


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, ToothIndexMap]:
    """Render a phantom volume in HU and the voxel regions of its teeth."""
    h, w = spec.image_size
    if h < MIN_IMAGE or w < MIN_IMAGE:
        raise ValueError(f"image size {spec.image_size} too small to place teeth (minimum {MIN_IMAGE}x{MIN_IMAGE})")
    rng = np.random.default_rng(spec.seed)
    g = spec.jitter.geometry
    s = spec.n_slices

    def jit(scale=1.0):
        return 1.0 + g * scale * rng.uniform(-1.0, 1.0)

    cx, cy = (w - 1) / 2 + g * w * 0.1 * rng.uniform(-1, 1), (h - 1) / 2 + g * h * 0.1 * rng.uniform(-1, 1)
    head_a, head_b = 0.40 * w * jit(), 0.44 * h * jit()
    head_taper = 0.08 * jit(2)
    # dental arch: an elliptical arc opening toward the back of the head
    arc_a, arc_b = 0.30 * w * jit(), 0.30 * h * jit()
    arc_cy = cy + 0.08 * h * jit()
    bone_half = max(1.5, 0.03 * w) * jit()
    body_half = max(2.0, 0.045 * w) * jit()
    airway = (cx + g * w * 0.05 * rng.uniform(-1, 1), cy + 0.22 * h * jit(), 0.06 * w * jit(), 0.045 * h * jit())
    spine = (cx, cy + 0.33 * h * jit(0.5), 0.07 * w * jit(), 0.06 * h * jit())

    z0 = int(round(0.25 * s)) + int(rng.integers(-spec.jitter.tooth_slices, spec.jitter.tooth_slices + 1))
    z1 = int(round(0.70 * s)) + int(rng.integers(-spec.jitter.tooth_slices, spec.jitter.tooth_slices + 1))
    z0, z1 = max(0, z0), min(s - 1, max(z1, z0 + 1))

    layout = arch_layout(spec.n_teeth)
    phi_max = np.deg2rad(80.0) * jit(0.5)
    phis = np.linspace(-phi_max, phi_max, spec.n_teeth)
    along = max(1.6, 0.022 * w)
    teeth_params = []
    for k, pos in enumerate(layout):
        size = {"BACK": 1.15, "SIDE": 1.0, "FRONT": 0.9}[ARCH_CLASS[pos]]
        ra = along * size * (1.0 + 0.5 * g * rng.uniform(-1, 1))
        rn = 1.25 * ra * (1.0 + 0.5 * g * rng.uniform(-1, 1))
        hu = spec.tooth_hu + spec.jitter.tooth_hu * rng.uniform(-1, 1)
        teeth_params.append((phis[k], ra, rn, hu))

    vol = np.empty((s, h, w), dtype=np.float64)
    tooth_full = np.zeros((len(layout), s, h, w), dtype=bool)
    zc, hz = (z0 + z1) / 2, (z1 - z0) / 2 + 0.75
    for z in range(s):
        t = z / max(1, s - 1)
        img = np.full((h, w), spec.air_hu)
        scale = 1.0 - head_taper * (2 * t - 1) ** 2
        _paint(img, _coverage(_ellipse(cx, cy, head_a * scale, head_b * scale), h, w), spec.tissue_hu)
        _paint(img, _coverage(_ellipse(*airway), h, w), spec.air_hu)
        _paint(img, _coverage(_ellipse(*spine), h, w), spec.bone_hu)
        # alveolar bone around the teeth, mandible body below them
        half = bone_half if z <= z1 else body_half
        if z >= z0:
            ring_out = _ellipse(cx, arc_cy, arc_a + half, arc_b + half)
            ring_in = _ellipse(cx, arc_cy, arc_a - half, arc_b - half)

            def mandible(x, y):
                return np.maximum.reduce([ring_out(x, y), -ring_in(x, y), y - (arc_cy + 0.15 * arc_b)])
            _paint(img, _coverage(mandible, h, w), spec.bone_hu)
        if z0 <= z <= z1:
            shrink = np.sqrt(max(0.0, 1.0 - ((z - zc) / hz) ** 4))
            for k, (phi, ra, rn, hu) in enumerate(teeth_params):
                tx, ty = cx + arc_a * np.sin(phi), arc_cy - arc_b * np.cos(phi)
                # long axis along the arch tangent
                angle = np.arctan2(arc_b * np.sin(phi), arc_a * np.cos(phi))
                cov = _coverage(_ellipse(tx, ty, ra * shrink, rn * shrink, angle), h, w)
                _paint(img, cov, hu)
                tooth_full[k, z] = cov >= 1.0
        vol[z] = img

    teeth = []
    for k, pos in enumerate(layout):
        vox = np.flatnonzero(tooth_full[k])
        teeth.append(ToothRegion(k, vox, pos, k))
    volume = Volume(vol.astype(np.float32), spec.spacing_mm, volume_id=f"phantom-{spec.seed}")
    return volume, ToothIndexMap(volume.shape, tuple(teeth))


def _smooth_field(rng, shape, n_modes=3):
    """Low-frequency random field in [-1, 1] over (S, H, W)."""
    s, h, w = shape
    z, y, x = np.meshgrid(np.linspace(0, 1, s), np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    out = np.zeros(shape)
    for _ in range(n_modes):
        fy, fx = rng.uniform(0.3, 1.5, size=2)
        fz = rng.uniform(0.0, 0.5)
        ph = rng.uniform(0, 2 * np.pi, size=3)
        out += np.sin(2 * np.pi * fx * x + ph[0]) * np.sin(2 * np.pi * fy * y + ph[1]) * np.cos(2 * np.pi * fz * z + ph[2])
    return out / n_modes


def perturb_phantom(vol: Volume, seed: int, geometry: float = 0.05, tissue_hu: float = 30.0) -> Volume:
    """Smooth random in-plane warp plus a slowly varying soft-tissue intensity shift."""
    rng = np.random.default_rng(seed)
    s, h, w = vol.shape
    sx, sy = 1.0 + geometry * rng.uniform(-1, 1, size=2)
    wobble = 0.5 * geometry * min(h, w) / 2
    dx = wobble * _smooth_field(rng, vol.shape)
    dy = wobble * _smooth_field(rng, vol.shape)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    z, y, x = np.meshgrid(np.arange(s), np.arange(h), np.arange(w), indexing="ij")
    src_x = cx + (x - cx) / sx + dx
    src_y = cy + (y - cy) / sy + dy
    air = float(vol.data.min())
    warped = ndimage.map_coordinates(vol.data.astype(np.float64), [z, src_y, src_x], order=1, mode="constant", cval=air)
    # intensity jitter fades out away from soft tissue so bone and teeth keep their values
    soft = np.clip(1.0 - np.abs(warped - 40.0) / 300.0, 0.0, 1.0)
    warped += tissue_hu * _smooth_field(rng, vol.shape) * soft
    return vol.with_data(np.clip(warped, HU_MIN, HU_MAX).astype(np.float32))


def count_teeth(vol: Volume, threshold: float = TOOTH_THRESHOLD_HU) -> int:
    _, n = ndimage.label(vol.data >= threshold)
    return n


def retrace_teeth(vol: Volume, original: ToothIndexMap, threshold: float = TOOTH_THRESHOLD_HU) -> ToothIndexMap:
    """Re-derive tooth regions after a warp, matching components to the original teeth."""
    labels, n = ndimage.label(vol.data >= threshold)
    if n != len(original.teeth):
        raise ValueError(f"found {n} tooth components, expected {len(original.teeth)}")
    centers = np.array(ndimage.center_of_mass(np.ones_like(labels), labels, range(1, n + 1)))
    teeth = []
    taken = set()
    for t in original.teeth:
        c = np.array(np.unravel_index(t.voxels, original.shape)).mean(axis=1)
        order = np.argsort(np.linalg.norm(centers - c, axis=1))
        lab = next(int(i) + 1 for i in order if int(i) + 1 not in taken)
        taken.add(lab)
        teeth.append(ToothRegion(t.tooth_id, np.flatnonzero(labels == lab), t.arch_position, t.arc_index))
    return ToothIndexMap(vol.shape, tuple(teeth))
