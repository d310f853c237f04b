"""Cross-correlation matching: potentials over image positions, smooth
windows, local normalization, region-of-interest masking, argmax detection,
and rotation/scale-invariant variants.

Potentials are plain (or sigmoid-mapped) inner products of a template with
the image, evaluated at every translation via frequency-domain correlation
with zero padding. Arrays are indexed [x, y] with x the first axis; the
detected position is the 0-based pixel index of the template center.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal
from scipy.special import expit, factorial

from .bsplines import SplineGrid, SplineTemplate, project_to_basis, rasterize_template

TWO_PI = 2.0 * np.pi
STD_FLOOR = 1e-12


@dataclass
class Window:
    """Smooth radial bump approximating the indicator of a disk.

    array is a compact odd-sized kernel with unit discrete mass, used for
    windowed correlations; sampled() evaluates the same profile centered
    on an arbitrary grid.
    """

    radius: float
    order: int
    array: np.ndarray

    def profile(self, rho_sq) -> np.ndarray:
        s = 2.0 * self.radius**2 / (1 + 2 * self.order)
        u = np.asarray(rho_sq, dtype=float) / s
        total = np.zeros_like(u)
        for i in range(self.order + 1):
            total += u**i / float(factorial(i, exact=True))
        return np.exp(-u) * total

    def sampled(self, shape) -> np.ndarray:
        """Unit-mass window field centered on a grid of the given 2D shape."""
        cx, cy = (shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0
        xs = np.arange(shape[0]) - cx
        ys = np.arange(shape[1]) - cy
        rho_sq = xs[:, None] ** 2 + ys[None, :] ** 2
        w = self.profile(rho_sq)
        return w / w.sum()


def build_window(radius: float, order: int = 8) -> Window:
    """Build the window kernel; the array extent covers the decayed tail."""
    if radius <= 0:
        raise ValueError("window radius must be positive")
    half = int(np.ceil(2.5 * radius))
    size = 2 * half + 1
    w = Window(radius, order, np.empty((size, size)))
    arr = w.sampled((size, size))
    w.array = arr
    return w


@dataclass
class PotentialMap:
    values: np.ndarray
    mode: str    # "lin" | "log"
    domain: str  # "r2" | "se2"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.mode not in ("lin", "log"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class InvarianceRange:
    """Finite lists of scales and rotations to search over; the identity
    transform is always part of the search."""

    scales: tuple = (1.0,)
    rotations: tuple = (0.0,)

    def __post_init__(self):
        scales = tuple(float(a) for a in self.scales)
        rotations = tuple(float(a) for a in self.rotations)
        if not scales or not rotations:
            raise ValueError("scale and rotation lists must be non-empty")
        if 1.0 not in scales:
            scales = (1.0,) + scales
        if 0.0 not in rotations:
            rotations = (0.0,) + rotations
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "rotations", rotations)


def correlate_same(f: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded cross-correlation, output aligned to the kernel center."""
    return signal.fftconvolve(f, kernel[::-1, ::-1].conj(), mode="same")


def _raster_potential_r2(raster: np.ndarray, f: np.ndarray) -> np.ndarray:
    if raster.shape[0] > f.shape[0] or raster.shape[1] > f.shape[1]:
        raise ValueError("template larger than image")
    return correlate_same(f, raster)


def _raster_potential_se2(raster: np.ndarray, score: np.ndarray,
                          theta_step: float) -> np.ndarray:
    n_t = raster.shape[2]
    n_s = score.shape[2]
    if n_t != n_s and n_t != 2 * n_s:
        raise ValueError(
            f"theta grids incompatible: template has {n_t} layers, "
            f"score has {n_s}")
    if raster.shape[0] > score.shape[0] or raster.shape[1] > score.shape[1]:
        raise ValueError("template larger than image")
    out = np.zeros(score.shape[:2])
    for z in range(n_t):
        out += correlate_same(score[:, :, z % n_s], raster[:, :, z])
    return out * theta_step


def potential_r2(t: SplineTemplate, f: np.ndarray, mode: str = "lin") -> PotentialMap:
    """Inner product of the translated template with the image at every
    position; log mode maps the values through the sigmoid."""
    if t.grid.domain != "r2":
        raise ValueError("potential_r2 needs a planar template")
    vals = _raster_potential_r2(rasterize_template(t), np.asarray(f, float))
    if mode == "log":
        vals = expit(vals)
    return PotentialMap(vals, mode, "r2")


def potential_se2(t: SplineTemplate, score_mod: np.ndarray,
                  mode: str = "lin") -> PotentialMap:
    """Sum of per-layer planar correlations of template and modulus score,
    weighted by the angular step (translation acts on position only).

    The score may carry half the template's layers; orientation content of
    a real image repeats with period pi, so layers are reused modulo the
    score depth.
    """
    if t.grid.domain != "se2":
        raise ValueError("potential_se2 needs an se2 template")
    vals = _raster_potential_se2(rasterize_template(t),
                                 np.asarray(score_mod, float),
                                 t.grid.theta_step)
    if mode == "log":
        vals = expit(vals)
    return PotentialMap(vals, mode, "se2")


def combine_potentials(maps) -> PotentialMap:
    maps = list(maps)
    if not maps:
        raise ValueError("nothing to combine")
    shape = maps[0].values.shape
    for p in maps[1:]:
        if p.values.shape != shape:
            raise ValueError("potential dimensions differ")
    total = np.sum([p.values for p in maps], axis=0)
    mode = maps[0].mode if len({p.mode for p in maps}) == 1 else "lin"
    domain = maps[0].domain if len({p.domain for p in maps}) == 1 else "r2"
    return PotentialMap(total, mode, domain)


def detect(p: PotentialMap, roi: np.ndarray = None):
    """Highest-potential position (ties: row-major first occurrence).

    With a region-of-interest mask only positions with mask 1 compete.
    Returns ((x, y), value).
    """
    vals = p.values
    if roi is not None:
        roi = np.asarray(roi).astype(bool)
        if roi.shape != vals.shape:
            raise ValueError("mask dimensions differ from potential")
        if not roi.any():
            raise ValueError("empty region of interest")
        search = np.where(roi, vals, -np.inf)
    else:
        search = vals
    idx = np.unravel_index(int(np.argmax(search)), search.shape)
    return (int(idx[0]), int(idx[1])), float(vals[idx])


def local_normalize(f: np.ndarray, window: Window,
                    roi: np.ndarray = None) -> np.ndarray:
    """Two-pass local mean/contrast normalization.

    The first pass normalizes with plain windowed statistics; the second
    recomputes them excluding pixels whose first-pass magnitude exceeds
    one (background mask) and restricted to the region of interest, with
    mask-weighted windowed averages.
    """
    f = np.asarray(f, dtype=float)
    m = window.array
    mean1 = correlate_same(f, m)
    var1 = correlate_same((f - mean1) ** 2, m)
    fhat1 = (f - mean1) / np.sqrt(np.maximum(var1, STD_FLOOR))

    mask = (np.abs(fhat1) <= 1.0).astype(float)
    if roi is not None:
        mask *= np.asarray(roi, dtype=float)
    den = np.maximum(correlate_same(mask, m), STD_FLOOR)
    mean2 = correlate_same(f * mask, m) / den
    var2 = correlate_same(((f - mean2) ** 2) * mask, m) / den
    return (f - mean2) / np.sqrt(np.maximum(var2, STD_FLOOR))


def _window_weights(shape, window: Window) -> np.ndarray:
    w = window.sampled(shape[:2])
    if len(shape) == 2:
        return w
    return np.repeat(w[:, :, None], shape[2], axis=2) / shape[2]


def normalize_patch(patch: np.ndarray, window: Window) -> np.ndarray:
    """Shift/scale a pixel patch to zero mean and unit deviation under the
    window inner product (the angular direction weighs uniformly)."""
    patch = np.asarray(patch, dtype=float)
    w = _window_weights(patch.shape, window)
    mean = float(np.sum(w * patch))
    centered = patch - mean
    norm = float(np.sqrt(np.sum(w * centered**2)))
    if norm < STD_FLOOR:
        raise ValueError("degenerate constant input: windowed deviation is zero")
    return centered / norm


def normalize_template(t: SplineTemplate, window: Window) -> SplineTemplate:
    """Window-normalize a template (idempotent, affine-invariant)."""
    normalized = normalize_patch(rasterize_template(t), window)
    out = project_to_basis(normalized, t.grid)
    out.loss = t.loss
    return out


def normalize_score_local(score: np.ndarray, window: Window) -> np.ndarray:
    """Per-position normalization of a score volume with the lifted window
    (spatial window, uniform in the angular direction), approximate form
    with the local average taken as locally constant."""
    score = np.asarray(score)
    m = window.array

    def windowed(vol):
        layer_mean = np.mean(vol, axis=2)
        return correlate_same(layer_mean, m)

    mean = windowed(score)[:, :, None]
    var = windowed(np.abs(score - mean) ** 2)[:, :, None]
    return (score - mean) / np.sqrt(np.maximum(var, STD_FLOOR))


def _transform_raster_2d(raster: np.ndarray, scale: float,
                         alpha: float) -> np.ndarray:
    """Resample a planar raster under rotation by alpha and scaling,
    bilinear, about the raster center; includes the 1/a amplitude factor."""
    c, s = np.cos(alpha), np.sin(alpha)
    rot_inv = np.array([[c, s], [-s, c]])  # R_alpha^{-1}
    mat = scale * rot_inv
    center = (np.asarray(raster.shape[:2]) - 1) / 2.0
    offset = center - mat @ center
    return ndimage.affine_transform(raster, mat, offset=offset, order=1,
                                    mode="constant", cval=0.0) / scale


def _shift_theta(raster: np.ndarray, alpha: float, theta_step: float) -> np.ndarray:
    """Shift the angular axis by alpha with periodic wrap; fractional
    shifts interpolate linearly between adjacent layers."""
    shift = alpha / theta_step
    base = int(np.floor(shift))
    frac = shift - base
    rolled = np.roll(raster, base, axis=2)
    if frac == 0.0:
        return rolled
    return (1.0 - frac) * rolled + frac * np.roll(raster, base + 1, axis=2)


def _transform_raster_se2(raster: np.ndarray, scale: float, alpha: float,
                          theta_step: float) -> np.ndarray:
    out = _shift_theta(raster, alpha, theta_step)
    layers = [_transform_raster_2d(out[:, :, z], scale, alpha)
              for z in range(out.shape[2])]
    return np.stack(layers, axis=2)


def invariant_potential(t: SplineTemplate, data: np.ndarray, mode: str,
                        inv_range: InvarianceRange) -> PotentialMap:
    """Maximum of the base potential over rotated and scaled copies of the
    template. The sigmoid is monotone, so log mode applies it after the
    max of the raw inner products."""
    raster = rasterize_template(t)
    data = np.asarray(data, dtype=float)
    best = None
    for a in inv_range.scales:
        for alpha in inv_range.rotations:
            if t.grid.domain == "r2":
                tr = _transform_raster_2d(raster, a, alpha)
                vals = _raster_potential_r2(tr, data)
            else:
                tr = _transform_raster_se2(raster, a, alpha, t.grid.theta_step)
                vals = _raster_potential_se2(tr, data, t.grid.theta_step)
            best = vals if best is None else np.maximum(best, vals)
    if mode == "log":
        best = expit(best)
    return PotentialMap(best, mode, t.grid.domain)


def save_heatmap_png(path, p: PotentialMap) -> None:
    """Render the potential as a 16-bit grayscale PNG (min-max scaled)."""
    from PIL import Image
    vals = p.values
    lo, hi = float(vals.min()), float(vals.max())
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    img = ((vals - lo) * scale).astype(np.uint16)
    # array is [x, y]; image files are row = y
    Image.fromarray(img.T, mode="I;16").save(path)


def save_potential_raw(path, p: PotentialMap) -> None:
    """Raw dump: u32 little-endian (N_x, N_y) header then f64 values."""
    vals = np.ascontiguousarray(p.values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<2I", *vals.shape))
        fh.write(vals.tobytes())


def load_potential_raw(path, mode="lin", domain="r2") -> PotentialMap:
    with open(path, "rb") as fh:
        nx, ny = struct.unpack("<2I", fh.read(8))
        vals = np.frombuffer(fh.read(8 * nx * ny), dtype="<f8").reshape(nx, ny)
    return PotentialMap(vals.astype(float), mode, domain)
