"""The roto-translation group SE(2): elements, product, inverse, and the
rotating derivative frame.

Elements are (x, y, theta) with theta stored in [0, 2*pi). The group product
is semi-direct: the rotation part acts on the translation part, so order
matters. Everything here is closed-form and pure; instances are immutable.
"""

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(theta: float) -> float:
    """Reduce an angle into [0, 2*pi)."""
    t = float(theta) % TWO_PI
    # % can return TWO_PI for tiny negative inputs due to rounding
    return 0.0 if t == TWO_PI else t


def rotation_matrix(theta: float) -> np.ndarray:
    """Counter-clockwise 2x2 rotation matrix."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class SE2Element:
    """A roto-translation (x, y, theta), theta canonical in [0, 2*pi)."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


IDENTITY = SE2Element(0.0, 0.0, 0.0)


def group_product(g: SE2Element, h: SE2Element) -> SE2Element:
    """Semi-direct product g.h = (R_{g.theta} h.xy + g.xy, g.theta + h.theta)."""
    xy = rotation_matrix(g.theta) @ h.xy + g.xy
    return SE2Element(xy[0], xy[1], g.theta + h.theta)


def group_inverse(g: SE2Element) -> SE2Element:
    """Inverse (-R_{-theta} xy, -theta); product with g gives the identity."""
    xy = -(rotation_matrix(-g.theta) @ g.xy)
    return SE2Element(xy[0], xy[1], -g.theta)


def left_invariant_frame(theta: float) -> np.ndarray:
    """Coefficients of the rotating frame in the fixed (dx, dy, dtheta) frame.

    Row 0 is the along-orientation derivative (cos, sin, 0), row 1 the
    transverse one (-sin, cos, 0), row 2 the angular derivative. The spatial
    2x2 block is a rotation matrix.
    """
    c, s = np.cos(theta), np.sin(theta)
    return np.array([
        [c, s, 0.0],
        [-s, c, 0.0],
        [0.0, 0.0, 1.0],
    ])
