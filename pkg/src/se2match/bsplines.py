"""Centered cardinal B-splines and spline-expanded templates.

The basis function of order n is the n-fold convolution of the unit
indicator, supported on [-(n+1)/2, (n+1)/2]. Templates are finite sums of
shifted/scaled direct products of these, on either a planar grid or a
position-orientation grid whose angular axis is 2*pi-periodic.

Conventions (used consistently across the package):
  - pixel i (0-based array index) sits at coordinate i+1, matching knot
    k (0-based index j) at coordinate (j+1)*spacing;
  - angular samples z = 0..N_theta-1 sit at z * (2*pi/N_theta);
  - coefficient vectors are flattened in C order over (k, l[, m]).
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import comb, factorial

TWO_PI = 2.0 * np.pi

MAGIC = b"SE2T"
FORMAT_VERSION = 1
DOMAIN_TAGS = {"r2": 0, "se2": 1}
LOSS_TAGS = {"linear": 0, "logistic": 1, "average": 2}
_DOMAIN_FROM_TAG = {v: k for k, v in DOMAIN_TAGS.items()}
_LOSS_FROM_TAG = {v: k for k, v in LOSS_TAGS.items()}


def bspline_eval(n: int, x) -> np.ndarray:
    """Evaluate the order-n centered B-spline at x (scalar or array).

    Uses the closed piecewise-polynomial form equivalent to the n-fold
    self-convolution of the unit indicator; zero outside the support.
    """
    if n < 0:
        raise ValueError("order must be non-negative")
    x = np.asarray(x, dtype=float)
    half = 0.5 * (n + 1)
    if n == 0:
        # midpoint convention at the jumps keeps Sum_k B(x-k) = 1 and makes
        # odd-order derivative formulas symmetric at knots
        out = np.where(np.abs(x) < half, 1.0, 0.0)
        out = np.where(np.abs(x) == half, 0.5, out)
        return out if out.ndim else float(out)
    acc = np.zeros_like(x)
    for i in range(n + 2):
        u = x + half - i
        acc += ((-1.0) ** i) * comb(n + 1, i, exact=True) * np.where(u > 0, u, 0.0) ** n
    # the alternating sum cancels analytically outside the support; mask it
    # to an exact zero instead of leaving roundoff residue
    out = np.where(np.abs(x) < half, acc / float(factorial(n, exact=True)), 0.0)
    return out if out.ndim else float(out)


def bspline_derivative(n: int, d: int, x) -> np.ndarray:
    """Exact d-th derivative of the order-n B-spline.

    The derivative lowers the order: each application is a difference of
    half-shifted splines of order n-1, so d must not exceed n.
    """
    if d < 0:
        raise ValueError("derivative order must be non-negative")
    if d > n:
        raise ValueError(f"derivative order {d} exceeds spline order {n}")
    x = np.asarray(x, dtype=float)
    acc = np.zeros_like(x)
    for j in range(d + 1):
        acc += ((-1.0) ** j) * comb(d, j, exact=True) * \
            bspline_eval(n - d, x + 0.5 * d - j)
    return acc if acc.ndim else float(acc)


def bspline_periodic(n: int, u, period: int) -> np.ndarray:
    """Order-n B-spline periodized with the given integer period."""
    u = np.asarray(u, dtype=float)
    u = np.mod(u + 0.5 * period, period) - 0.5 * period
    nshift = int(np.ceil((0.5 * (n + 1) + 0.5 * period) / period))
    acc = np.zeros_like(u)
    for j in range(-nshift, nshift + 1):
        acc += bspline_eval(n, u + j * period)
    return acc if acc.ndim else float(acc)


@dataclass(frozen=True)
class SplineGrid:
    """Descriptor of a spline lattice over a pixel (or pixel-angle) box.

    shape_pixels is (N_x, N_y) or (N_x, N_y, N_theta); shape_knots is
    (N_k, N_l) or (N_k, N_l, N_m). The angular spacing is exactly
    2*pi/N_m, and angular samples cover [0, 2*pi) in N_theta steps.
    """

    domain: str
    shape_pixels: tuple
    shape_knots: tuple
    order: int = 3

    def __post_init__(self):
        if self.domain not in ("r2", "se2"):
            raise ValueError(f"unknown domain {self.domain!r}")
        ndim = 2 if self.domain == "r2" else 3
        if len(self.shape_pixels) != ndim or len(self.shape_knots) != ndim:
            raise ValueError("shape arity does not match domain")
        if any(v < 1 for v in self.shape_pixels + self.shape_knots):
            raise ValueError("all extents must be positive")
        if self.order < 0:
            raise ValueError("order must be non-negative")
        object.__setattr__(self, "shape_pixels", tuple(int(v) for v in self.shape_pixels))
        object.__setattr__(self, "shape_knots", tuple(int(v) for v in self.shape_knots))

    @property
    def spacings(self) -> tuple:
        s = [self.shape_pixels[0] / self.shape_knots[0],
             self.shape_pixels[1] / self.shape_knots[1]]
        if self.domain == "se2":
            s.append(TWO_PI / self.shape_knots[2])
        return tuple(s)

    @property
    def ncoef(self) -> int:
        return int(np.prod(self.shape_knots))

    @property
    def theta_step(self) -> float:
        if self.domain != "se2":
            raise ValueError("theta step only defined for se2 grids")
        return TWO_PI / self.shape_pixels[2]


def basis_matrix_spatial(n_pix: int, n_knots: int, order: int) -> np.ndarray:
    """(n_knots, n_pix) matrix of basis values B((i+1)/s - (k+1))."""
    s = n_pix / n_knots
    coords = (np.arange(n_pix) + 1.0) / s
    knots = np.arange(n_knots) + 1.0
    return bspline_eval(order, coords[None, :] - knots[:, None])


def basis_matrix_angular(n_samples: int, n_knots: int, order: int) -> np.ndarray:
    """(n_knots, n_samples) matrix of periodized basis values at the
    angular samples z*2*pi/n_samples."""
    u = np.arange(n_samples) * (n_knots / n_samples)
    knots = np.arange(n_knots) + 1.0
    return bspline_periodic(order, u[None, :] - knots[:, None], n_knots)


def _basis_matrices(grid: SplineGrid) -> list:
    mats = [
        basis_matrix_spatial(grid.shape_pixels[0], grid.shape_knots[0], grid.order),
        basis_matrix_spatial(grid.shape_pixels[1], grid.shape_knots[1], grid.order),
    ]
    if grid.domain == "se2":
        mats.append(basis_matrix_angular(grid.shape_pixels[2],
                                         grid.shape_knots[2], grid.order))
    return mats


@dataclass
class SplineTemplate:
    """Spline coefficients on a grid, flattened C-order over (k, l[, m]).

    loss records how the template was trained; it selects the matching
    mode downstream and is stored in the template file.
    """

    grid: SplineGrid
    coef: np.ndarray
    loss: str = "linear"

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=float).reshape(-1)
        if self.coef.size != self.grid.ncoef:
            raise ValueError("coefficient count does not match grid")
        if self.loss not in LOSS_TAGS:
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def coef_tensor(self) -> np.ndarray:
        return self.coef.reshape(self.grid.shape_knots)


def template_eval(t: SplineTemplate, points) -> np.ndarray:
    """Evaluate the continuous template at (x, y[, theta]) points.

    Spatial coordinates follow the pixel convention (pixel i at i+1);
    theta may be any real and is wrapped.
    """
    grid = t.grid
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    s = grid.spacings
    vals = []
    for axis in range(2):
        knots = np.arange(grid.shape_knots[axis]) + 1.0
        vals.append(bspline_eval(grid.order,
                                 pts[:, axis, None] / s[axis] - knots[None, :]))
    if grid.domain == "r2":
        out = np.einsum("pk,pl,kl->p", vals[0], vals[1], t.coef_tensor)
    else:
        knots = np.arange(grid.shape_knots[2]) + 1.0
        vals.append(bspline_periodic(grid.order,
                                     pts[:, 2, None] / s[2] - knots[None, :],
                                     grid.shape_knots[2]))
        out = np.einsum("pk,pl,pm,klm->p", vals[0], vals[1], vals[2],
                        t.coef_tensor)
    return out if np.asarray(points).ndim > 1 else float(out[0])


def rasterize_template(t: SplineTemplate) -> np.ndarray:
    """Sample the template on its own integer pixel/orientation grid."""
    mats = _basis_matrices(t.grid)
    c = t.coef_tensor
    out = np.tensordot(mats[0].T, c, axes=(1, 0))
    out = np.tensordot(out, mats[1], axes=(1, 0))
    if t.grid.domain == "se2":
        out = np.moveaxis(out, 1, 2)  # (x, m, y) -> (x, y, m)
        out = np.tensordot(out, mats[2], axes=(2, 0))
    return out


def build_sampling_row(patch: np.ndarray, grid: SplineGrid) -> np.ndarray:
    """Correlate a patch with every (unshifted) basis function at its knot.

    Entry (k, l[, m]) is the plain discrete sum of the patch against the
    shifted basis, with zero padding implied spatially and periodic
    wrapping in theta. Flattened C-order; linear in the patch.
    """
    patch = np.asarray(patch, dtype=float)
    if patch.shape != grid.shape_pixels:
        raise ValueError(
            f"patch shape {patch.shape} does not match grid {grid.shape_pixels}")
    mats = _basis_matrices(grid)
    out = np.tensordot(mats[0], patch, axes=(1, 0))
    out = np.tensordot(out, mats[1], axes=(1, 1))
    if grid.domain == "se2":
        out = np.moveaxis(out, 1, 2)  # (k, theta_pix, l) -> (k, l, theta_pix)
        out = np.tensordot(out, mats[2], axes=(2, 1))
    return out.reshape(-1)


def build_sampling_matrix(patches, grid: SplineGrid) -> np.ndarray:
    """Stack sampling rows for a sequence of patches into an (N, ncoef) matrix."""
    return np.array([build_sampling_row(p, grid) for p in patches])


def gram_matrices(grid: SplineGrid) -> list:
    """Per-axis discrete Gram matrices E E^T of the sampled basis."""
    return [m @ m.T for m in _basis_matrices(grid)]


def project_to_basis(patch: np.ndarray, grid: SplineGrid) -> SplineTemplate:
    """Least-squares projection of a pixel array onto the spline basis.

    The normal equations factor over the axes, so each axis is solved
    with its own small Gram matrix.
    """
    c = build_sampling_row(patch, grid).reshape(grid.shape_knots)
    for axis, gram in enumerate(gram_matrices(grid)):
        c = np.moveaxis(c, axis, 0)
        shape = c.shape
        c = np.linalg.solve(gram, c.reshape(shape[0], -1)).reshape(shape)
        c = np.moveaxis(c, 0, axis)
    return SplineTemplate(grid, c.reshape(-1), loss="average")


def write_template(path, t: SplineTemplate) -> None:
    """Write the bit-exact binary template format (little-endian)."""
    knots = t.grid.shape_knots + (1,) * (3 - len(t.grid.shape_knots))
    pixels = t.grid.shape_pixels + (1,) * (3 - len(t.grid.shape_pixels))
    header = struct.pack(
        "<4sHBBH6I", MAGIC, FORMAT_VERSION,
        DOMAIN_TAGS[t.grid.domain], LOSS_TAGS[t.loss], t.grid.order,
        *knots, *pixels)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(t.coef, dtype="<f8").tobytes())


def read_template(path) -> SplineTemplate:
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sHBBH6I"))
        magic, version, domain_tag, loss_tag, order, nk, nl, nm, nx, ny, nt = \
            struct.unpack("<4sHBBH6I", header)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a template file (bad magic)")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported template version {version}")
        domain = _DOMAIN_FROM_TAG[domain_tag]
        if domain == "r2":
            grid = SplineGrid("r2", (nx, ny), (nk, nl), order)
        else:
            grid = SplineGrid("se2", (nx, ny, nt), (nk, nl, nm), order)
        coef = np.frombuffer(fh.read(8 * grid.ncoef), dtype="<f8").astype(float)
    return SplineTemplate(grid, coef, loss=_LOSS_FROM_TAG[loss_tag])
