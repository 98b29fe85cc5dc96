"""Metal artifact simulation: metal insertion, parallel-beam projection,
sinogram corruption and filtered back projection.

Physics is a deliberately simple surrogate. HU maps to linear attenuation
with ``mu = MU_WATER * (1 + HU / 1000)``; metal adds a quadratic beam
hardening excess on its own path length and photon starvation comes from
Poisson counting with a floor of one photon per ray.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .phantoms import ARCH_CLASS, ToothIndexMap
from .volumes import HU_MAX, HU_MIN, Volume, ValueSpace

log = logging.getLogger(__name__)

MU_WATER = 0.02  # 1/mm
RAY_STEP = 0.5  # pixels between samples along a ray
UPSAMPLE = 4  # band-limited detector upsampling before backprojection


@dataclass(frozen=True)
class ProjectionGeometry:
    """Parallel-beam geometry; detector spacing is in pixels."""

    n_angles: int = 180
    n_detectors: int = 192
    detector_spacing: float = 1.0
    beam_model: str = "PARALLEL"

    def __post_init__(self):
        if self.n_angles < 16:
            raise ValueError("n_angles must be >= 16")
        if self.detector_spacing <= 0:
            raise ValueError("detector_spacing must be positive")
        if self.beam_model != "PARALLEL":
            raise ValueError(f"unsupported beam model {self.beam_model!r}")

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * (np.pi / self.n_angles)

    @property
    def offsets(self) -> np.ndarray:
        """Detector bin centers in pixel units."""
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2) * self.detector_spacing

    @classmethod
    def for_image(cls, width: int, n_angles: int = 180) -> "ProjectionGeometry":
        return cls(n_angles=n_angles, n_detectors=int(round(1.5 * width)))


@dataclass(frozen=True)
class Sinogram:
    data: np.ndarray  # (n_angles, n_detectors)
    geometry: ProjectionGeometry

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        g = self.geometry
        if data.shape != (g.n_angles, g.n_detectors):
            raise ValueError(f"sinogram shape {data.shape} does not match geometry {(g.n_angles, g.n_detectors)}")
        if not np.isfinite(data).all():
            raise ValueError("sinogram contains non-finite values")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class PhysicsParams:
    metal_hu: float = 3000.0
    photon_count_I0: float = 2e5
    beam_hardening_coeff: float = 4.0
    noise_seed: int = 0
    noise: bool = True

    def __post_init__(self):
        if not self.photon_count_I0 > 0:
            raise ValueError("photon_count_I0 must be positive")
        if self.beam_hardening_coeff < 0:
            raise ValueError("beam_hardening_coeff must be >= 0")


@dataclass(frozen=True)
class MetalLabel:
    mask: np.ndarray  # bool, same shape as the volume
    m: int
    tooth_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.tooth_ids) != self.m:
            raise ValueError("tooth_ids must list exactly m teeth")


def hu_to_mu(hu):
    return MU_WATER * (1.0 + np.asarray(hu, dtype=np.float64) / 1000.0)


def mu_to_hu(mu):
    return (np.asarray(mu, dtype=np.float64) / MU_WATER - 1.0) * 1000.0


# --- metal label selection -------------------------------------------------

def select_metal_teeth(tooth_map: ToothIndexMap, m: int, seed: int) -> MetalLabel:
    """Pick ``m`` teeth following the filling order used for the paired test set.

    Order: two random back teeth, two back teeth adjacent to those, two front
    teeth, two of the remaining side teeth. ``m`` takes the first ``m`` picks,
    so labels for increasing ``m`` are nested.
    """
    if not 1 <= m <= 8:
        raise ValueError(f"m must be in 1..8, got {m}")
    order = _filling_order(tooth_map, seed)
    chosen = order[:m]
    mask = np.zeros(tooth_map.shape, dtype=bool)
    for tid in chosen:
        mask |= tooth_map.region_mask(tid)
    return MetalLabel(mask, m, tuple(chosen))


def _filling_order(tooth_map: ToothIndexMap, seed: int) -> list[int]:
    rng = np.random.default_rng(seed)
    by_class = {cls: [t.tooth_id for t in tooth_map.teeth if ARCH_CLASS[t.arch_position] == cls]
                for cls in ("BACK", "FRONT", "SIDE")}
    need = {"BACK": 4, "FRONT": 2, "SIDE": 2}
    for cls, n in need.items():
        if len(by_class[cls]) < n:
            raise ValueError(f"need at least {n} {cls.lower()} teeth, phantom has {len(by_class[cls])}")
    arc = {t.tooth_id: t.arc_index for t in tooth_map.teeth}

    back = list(by_class["BACK"])
    first = [int(t) for t in rng.choice(back, size=2, replace=False)]
    chosen = list(first)
    for anchor in first:
        rest = [t for t in back if t not in chosen]
        # nearest remaining back tooth along the arch; ties broken randomly
        dist = np.array([abs(arc[t] - arc[anchor]) for t in rest], dtype=float)
        dist += rng.random(len(rest)) * 1e-3
        chosen.append(rest[int(np.argmin(dist))])
    chosen += [int(t) for t in rng.choice(by_class["FRONT"], size=2, replace=False)]
    chosen += [int(t) for t in rng.choice(by_class["SIDE"], size=2, replace=False)]
    return chosen


# --- projector ---------------------------------------------------------------

@functools.lru_cache(maxsize=4)
def _system_matrices(height: int, width: int, geom: ProjectionGeometry):
    """Ray-driven forward matrix and pixel-driven backprojection matrix."""
    angles, offsets = geom.angles, geom.offsets
    cy, cx = (height - 1) / 2, (width - 1) / 2
    half = np.hypot(height, width) / 2 + 1
    t = np.arange(-half, half + RAY_STEP / 2, RAY_STEP)
    rows, cols, vals = [], [], []
    for a, theta in enumerate(angles):
        c, s = np.cos(theta), np.sin(theta)
        # sample points: offset along (c, s), ray direction (-s, c)
        x = offsets[:, None] * c - t[None, :] * s + cx
        y = offsets[:, None] * s + t[None, :] * c + cy
        ray = np.broadcast_to(a * geom.n_detectors + np.arange(geom.n_detectors)[:, None], x.shape)
        x0, y0 = np.floor(x), np.floor(y)
        fx, fy = x - x0, y - y0
        x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
        for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                            (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height) & (wgt > 0)
            rows.append(ray[ok])
            cols.append((yi * width + xi)[ok])
            vals.append(wgt[ok] * RAY_STEP)
    n_rays = geom.n_angles * geom.n_detectors
    fwd = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rays, height * width), dtype=np.float64,
    )
    fwd.sum_duplicates()

    yy, xx = np.mgrid[0:height, 0:width]
    xx = (xx - cx).ravel()
    yy = (yy - cy).ravel()
    pix = np.arange(height * width)
    n_fine = geom.n_detectors * UPSAMPLE
    rows, cols, vals = [], [], []
    for a, theta in enumerate(angles):
        u = (xx * np.cos(theta) + yy * np.sin(theta)) / geom.detector_spacing + (geom.n_detectors - 1) / 2
        u = u * UPSAMPLE
        u0 = np.floor(u)
        f = u - u0
        u0 = u0.astype(np.int64)
        for du, wgt in ((0, 1 - f), (1, f)):
            ui = u0 + du
            ok = (ui >= 0) & (ui < n_fine)
            rows.append(pix[ok])
            cols.append(a * n_fine + ui[ok])
            vals.append(wgt[ok])
    back = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(height * width, geom.n_angles * n_fine), dtype=np.float64,
    )
    return fwd, back


def _project_stack(images: np.ndarray, geom: ProjectionGeometry, pixel_mm: float) -> np.ndarray:
    """Project a stack (K, H, W) of attenuation images; returns (K, angles, detectors)."""
    k, h, w = images.shape
    fwd, _ = _system_matrices(h, w, geom)
    flat = images.reshape(k, h * w).T.astype(np.float64)
    return (fwd @ flat).T.reshape(k, geom.n_angles, geom.n_detectors) * pixel_mm


def forward_project(image: np.ndarray, geom: ProjectionGeometry, pixel_mm: float = 1.0) -> Sinogram:
    """Parallel-beam line integrals of a 2D attenuation image (1/mm)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("forward_project expects a 2D slice")
    _check_fov(image.shape, geom)
    return Sinogram(_project_stack(image[None], geom, pixel_mm)[0], geom)


def _check_fov(shape, geom: ProjectionGeometry) -> None:
    extent = geom.n_detectors * geom.detector_spacing
    if max(shape) > extent:
        raise ValueError(
            f"image of size {shape} exceeds the detector field of view ({extent:g} pixels)"
        )


@functools.lru_cache(maxsize=8)
def ramp_filter(n_detectors: int, detector_spacing: float) -> tuple[np.ndarray, int]:
    """Frequency response of the Ram-Lak filter built from its spatial kernel."""
    size = max(64, int(2 ** np.ceil(np.log2(2 * n_detectors))))
    n = np.concatenate([np.arange(0, size // 2 + 1), np.arange(-size // 2 + 1, 0)])
    kernel = np.zeros(size)
    kernel[0] = 0.25
    odd = n % 2 == 1
    kernel[odd] = -1.0 / (np.pi * n[odd]) ** 2
    # spatial kernel h(n) / d^2, convolution sum times d
    response = np.real(np.fft.fft(kernel)) / detector_spacing
    return response, size


def _fbp_stack(sinos: np.ndarray, geom: ProjectionGeometry, out_size, pixel_mm: float) -> np.ndarray:
    h, w = out_size
    response, size = ramp_filter(geom.n_detectors, geom.detector_spacing)
    spectrum = np.fft.fft(sinos, n=size, axis=-1) * response
    # zero-pad the spectrum: filtered projections sampled UPSAMPLE times finer
    fine = np.zeros(spectrum.shape[:-1] + (size * UPSAMPLE,), dtype=complex)
    half = size // 2
    fine[..., :half] = spectrum[..., :half]
    fine[..., -half + 1:] = spectrum[..., -half + 1:]
    fine[..., half] = 0.5 * spectrum[..., half]
    fine[..., -half] = 0.5 * spectrum[..., half]
    filtered = np.real(np.fft.ifft(fine, axis=-1))[..., :geom.n_detectors * UPSAMPLE] * UPSAMPLE
    _, back = _system_matrices(h, w, geom)
    k = sinos.shape[0]
    flat = filtered.reshape(k, -1).T
    images = (back @ flat).T.reshape(k, h, w)
    return images * (np.pi / geom.n_angles) / pixel_mm


def fbp_reconstruct(sino: Sinogram, out_size: tuple[int, int], pixel_mm: float = 1.0) -> np.ndarray:
    """Ram-Lak filtered back projection; returns attenuation in 1/mm."""
    _check_fov(out_size, sino.geometry)
    return _fbp_stack(sino.data[None], sino.geometry, tuple(out_size), pixel_mm)[0]


# --- corruption --------------------------------------------------------------

def _corrupt(p_clean: np.ndarray, p_metal: np.ndarray, params: PhysicsParams, rng) -> np.ndarray:
    p = p_clean + p_metal + params.beam_hardening_coeff * p_metal ** 2
    if not params.noise:
        return p
    counts = rng.poisson(params.photon_count_I0 * np.exp(-p))
    counts = np.maximum(counts, 1)
    return -np.log(counts / params.photon_count_I0)


def corrupt_sinogram(clean: Sinogram, metal_only: Sinogram, params: PhysicsParams) -> Sinogram:
    """Combine clean and metal line integrals, add beam hardening and photon noise."""
    if clean.geometry != metal_only.geometry:
        raise ValueError("clean and metal sinograms use different geometries")
    if (clean.data < 0).any() or (metal_only.data < 0).any():
        raise ValueError("line integrals must be non-negative")
    rng = np.random.default_rng(params.noise_seed)
    return Sinogram(_corrupt(clean.data, metal_only.data, params, rng), clean.geometry)


def simulate_artifacts(
    clean: Volume,
    label: MetalLabel,
    geom: ProjectionGeometry,
    params: PhysicsParams,
) -> Volume:
    """Insert metal under ``label``, project, corrupt and reconstruct every slice."""
    if clean.value_space is not ValueSpace.HU:
        raise ValueError("simulate_artifacts expects an HU volume")
    if label.mask.shape != clean.shape:
        raise ValueError(f"label shape {label.mask.shape} does not match volume {clean.shape}")
    s, h, w = clean.shape
    _check_fov((h, w), geom)
    pixel_mm = clean.spacing_mm[1]
    mask = label.mask.astype(bool)
    # air is clipped to zero attenuation so sinograms stay non-negative
    mu = np.clip(hu_to_mu(clean.data), 0.0, None)
    mu_body = np.where(mask, 0.0, mu)
    mu_metal = np.where(mask, hu_to_mu(params.metal_hu), 0.0)
    p_body = np.clip(_project_stack(mu_body, geom, pixel_mm), 0.0, None)
    p_metal = np.clip(_project_stack(mu_metal, geom, pixel_mm), 0.0, None)
    # one noise stream per slice, derived from the seed, so slices are independent
    seeds = np.random.SeedSequence(params.noise_seed).spawn(s)
    corrupted = np.stack([
        _corrupt(p_body[i], p_metal[i], params, np.random.default_rng(seeds[i])) for i in range(s)
    ])
    recon = _fbp_stack(corrupted, geom, (h, w), pixel_mm)
    hu = np.clip(mu_to_hu(recon), HU_MIN, HU_MAX).astype(np.float32)
    return clean.with_data(hu)


def fbp_roundtrip(clean: Volume, geom: ProjectionGeometry) -> np.ndarray:
    """Noise-free projection + reconstruction of a volume, in HU (unclipped)."""
    pixel_mm = clean.spacing_mm[1]
    mu = np.clip(hu_to_mu(clean.data), 0.0, None)
    sinos = _project_stack(mu, geom, pixel_mm)
    return mu_to_hu(_fbp_stack(sinos, geom, clean.shape[1:], pixel_mm))

