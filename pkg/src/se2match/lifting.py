"""Lifting images to orientation scores with an oriented wavelet bank.

The bank is built in the Fourier domain: each wavelet occupies an angular
slice (a spline bump in the polar angle, so the slices over the full circle
sum to one exactly) of the frequency disk, flat radially up to a
raised-cosine taper near the Nyquist ring, with the DC bin removed. The
transform correlates the image with each rotated wavelet; half a turn of
orientations suffices for real images because the remaining rotations are
complex conjugates. An approximate inverse divides the adjoint by the
Fourier coverage.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as spfft

from .bsplines import bspline_periodic

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class CakeParams:
    angular_order: int = 3     # spline order of the angular bump
    taper_start: float = 0.8   # fraction of Nyquist where the radial taper begins
    coverage_floor: float = 1e-3  # relative coverage below which the inverse mutes

    def __post_init__(self):
        if not 0.0 < self.taper_start < 1.0:
            raise ValueError("taper start must be a Nyquist fraction in (0, 1)")


@dataclass
class CakeWaveletBank:
    """Oriented wavelet bank: n_theta kernels covering [0, pi).

    kernels[j] is the complex spatial kernel for orientation j * pi/n_theta,
    centered on its (odd) square array; kernel_hats[j] is its DFT on the
    unshifted frequency grid of the same array.
    """

    size: int
    n_theta: int
    params: CakeParams
    kernels: np.ndarray = field(repr=False, default=None)
    kernel_hats: np.ndarray = field(repr=False, default=None)

    @property
    def s_theta(self) -> float:
        return np.pi / self.n_theta

    def orientations(self) -> np.ndarray:
        return np.arange(self.n_theta) * self.s_theta

    def coverage_partition(self) -> np.ndarray:
        """Sum of all 2*n_theta rotated wavelet transforms (real part); equals
        one on the pass band by construction."""
        total = self.kernel_hats.sum(axis=0)
        twins = self.kernel_hats[:, ::-1, ::-1]  # hat at -omega
        total = total + np.roll(twins.sum(axis=0), (1, 1), axis=(0, 1))
        return total.real

    def passband_mask(self) -> np.ndarray:
        """Frequencies where the radial profile is exactly one (annulus
        between DC and the taper)."""
        rho = _radial_grid(self.size)
        return (rho > 0) & (rho <= self.params.taper_start * 0.5)


def _radial_grid(size):
    freq = np.fft.fftfreq(size)
    fx, fy = np.meshgrid(freq, freq, indexing="ij")
    return np.hypot(fx, fy)


def _angular_grid(size):
    freq = np.fft.fftfreq(size)
    fx, fy = np.meshgrid(freq, freq, indexing="ij")
    return np.arctan2(fy, fx)


def build_cake_wavelets(size: int, n_theta: int,
                        params: CakeParams = CakeParams()) -> CakeWaveletBank:
    """Construct the bank on a size x size grid (size odd, n_theta >= 2).

    The angular profile of orientation j is a periodized spline bump
    centered at j * pi/n_theta + pi/2, so the base wavelet responds to
    structures aligned with the x axis. The full set of 2*n_theta bumps
    partitions the circle.
    """
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    if n_theta < 2:
        raise ValueError("need at least two orientations")
    rho = _radial_grid(size)
    phi = _angular_grid(size)
    nyquist = 0.5
    t0 = params.taper_start * nyquist

    radial = np.ones_like(rho)
    band = (rho > t0) & (rho <= nyquist)
    radial[band] = np.cos(0.5 * np.pi * (rho[band] - t0) / (nyquist - t0)) ** 2
    radial[rho > nyquist] = 0.0
    radial[rho == 0.0] = 0.0  # DC removed: every wavelet has zero mean

    s_theta = np.pi / n_theta
    hats = np.empty((n_theta, size, size), dtype=complex)
    kernels = np.empty_like(hats)
    for j in range(n_theta):
        center = j * s_theta + 0.5 * np.pi
        bump = bspline_periodic(params.angular_order,
                                (phi - center) / s_theta, 2 * n_theta)
        hats[j] = bump * radial
        kernels[j] = np.fft.fftshift(np.fft.ifft2(hats[j]))
    return CakeWaveletBank(size, n_theta, params, kernels, hats)


@dataclass
class OrientationScore:
    """Complex score volume (x, y, theta index) with theta covering [0, pi)."""

    data: np.ndarray
    bank: CakeWaveletBank
    image_shape: tuple

    @property
    def n_theta(self) -> int:
        return self.data.shape[2]


def _pad_shape(image_shape, ksize):
    return tuple(spfft.next_fast_len(n + ksize - 1) for n in image_shape)


def _kernel_hats_padded(bank, pad):
    k = bank.size
    hats = np.zeros((bank.n_theta,) + pad, dtype=complex)
    for j in range(bank.n_theta):
        emb = np.zeros(pad, dtype=complex)
        emb[:k, :k] = bank.kernels[j]
        hats[j] = spfft.fft2(emb)
    return hats


def orientation_score_transform(f: np.ndarray,
                                bank: CakeWaveletBank) -> OrientationScore:
    """Correlate the image with every oriented kernel (zero-padded,
    frequency-domain); layer j holds orientation j * pi/n_theta."""
    f = np.asarray(f, dtype=float)
    if f.shape[0] < bank.size or f.shape[1] < bank.size:
        raise ValueError("image smaller than the wavelet kernel")
    pad = _pad_shape(f.shape, bank.size)
    fhat = spfft.fft2(f, pad)
    hats = _kernel_hats_padded(bank, pad)
    c = bank.size // 2
    ix = (np.arange(f.shape[0]) - c) % pad[0]
    iy = (np.arange(f.shape[1]) - c) % pad[1]
    out = np.empty(f.shape + (bank.n_theta,), dtype=complex)
    for j in range(bank.n_theta):
        g = spfft.ifft2(fhat * np.conj(hats[j]))
        out[:, :, j] = g[np.ix_(ix, iy)]
    return OrientationScore(out, bank, f.shape)


def modulus_score(score: OrientationScore) -> np.ndarray:
    """Element-wise complex modulus of the score volume."""
    return np.abs(score.data)


def halfturn_extend(mod: np.ndarray) -> np.ndarray:
    """Duplicate the [0, pi) layers to cover [0, 2*pi): line content of the
    modulus repeats with period pi."""
    return np.concatenate([mod, mod], axis=2)


def reconstruct_image(score: OrientationScore,
                      bank: CakeWaveletBank) -> np.ndarray:
    """Approximate inverse: adjoint of the transform divided by the Fourier
    coverage. The missing half-turn of orientations enters through complex
    conjugation, valid for scores of real images."""
    if score.bank is not bank and score.bank.size != bank.size:
        raise ValueError("score was built with an incompatible bank")
    nx, ny = score.image_shape
    pad = _pad_shape(score.image_shape, bank.size)
    hats = _kernel_hats_padded(bank, pad)
    c = bank.size // 2
    ix = (np.arange(nx) - c) % pad[0]
    iy = (np.arange(ny) - c) % pad[1]

    numerator = np.zeros(pad, dtype=complex)
    coverage = np.zeros(pad)
    for j in range(bank.n_theta):
        emb = np.zeros(pad, dtype=complex)
        emb[np.ix_(ix, iy)] = score.data[:, :, j]
        u_hat = spfft.fft2(emb)
        twin_kernel = bank.kernels[j][::-1, ::-1]  # rotation by pi
        emb_t = np.zeros(pad, dtype=complex)
        emb_t[:bank.size, :bank.size] = twin_kernel
        twin_hat = spfft.fft2(emb_t)
        numerator += hats[j] * u_hat
        numerator += twin_hat * spfft.fft2(np.conj(emb))
        coverage += np.abs(hats[j]) ** 2 + np.abs(twin_hat) ** 2

    floor = bank.params.coverage_floor * coverage.max()
    ratio = np.where(coverage > floor, numerator / np.maximum(coverage, floor), 0.0)
    rec = spfft.ifft2(ratio).real
    return rec[:nx, :ny]


def write_score(path, score: OrientationScore) -> None:
    """Raw dump: u32 little-endian (N_x, N_y, N_theta) header, then doubles
    with real and imaginary parts interleaved."""
    data = np.ascontiguousarray(score.data, dtype="<c16")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", *data.shape))
        fh.write(data.tobytes())


def read_score(path) -> np.ndarray:
    """Read a score dump back as a complex volume."""
    with open(path, "rb") as fh:
        shape = struct.unpack("<3I", fh.read(12))
        count = shape[0] * shape[1] * shape[2]
        data = np.frombuffer(fh.read(16 * count), dtype="<c16")
    return data.reshape(shape).astype(complex)
