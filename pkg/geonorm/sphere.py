from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .tensor import (
    DenseTensor, Precision, elementwise, reduce_norm_lastdim, sum_lastdim, where, _lift
)
from .utils import DimensionError

__all__ = ['SpherePoint', 'TangentVector', 'tangent_project', 'exp_map', 'geodesic_step', 'geodesic_angle']

# radius guard for denominators, same value the GeoNorm layer uses
RADIUS_EPS = 1e-6

ArrayLike = Union[DenseTensor, np.ndarray]


@dataclass
class SpherePoint:
    """
    Rows of ``x`` (last dimension is the feature dimension) as points on spheres of radius ``||x||``.
    """
    x: DenseTensor
    radius: DenseTensor = field(init=False, repr=False)

    def __post_init__(self):
        self.x = _as_tensor(self.x)
        self.radius = reduce_norm_lastdim(self.x)

    @property
    def safe_radius(self) -> DenseTensor:
        return elementwise(self.radius, 'clamp_min', RADIUS_EPS)


@dataclass
class TangentVector:
    v: DenseTensor
    base: SpherePoint

    def __post_init__(self):
        self.v = _as_tensor(self.v)
        if self.v.shape != self.base.x.shape:
            raise DimensionError(f'tangent vector shape {list(self.v.shape)} '
                                 f'does not match base point shape {list(self.base.x.shape)}')

    def cosine_to_base(self) -> np.ndarray:
        """
        Per-row |<x, v>| / (||x|| ||v||); zero rows of ``v`` report 0.
        """
        x, v = self.base.x.data, self.v.data
        denom = np.linalg.norm(x, axis=-1) * np.linalg.norm(v, axis=-1)
        dots = np.abs((x * v).sum(axis=-1))
        return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def _as_tensor(x: ArrayLike) -> DenseTensor:
    if isinstance(x, DenseTensor):
        return x
    return DenseTensor(x, Precision.WIDE if np.asarray(x).dtype != np.float32 else Precision.NARROW)


def tangent_project(x: SpherePoint, s: ArrayLike) -> TangentVector:
    """
    Remove the radial component of ``s`` at ``x``: ``v = s - (x.s / ||x||^2) x`` per row.

    Parameters
    ----------
    x : SpherePoint
        Base point(s); rows need ``||x|| > 0``.
    s : DenseTensor or np.ndarray
        Update direction(s), same shape as ``x.x``.

    Returns
    -------
    TangentVector
        Projection of ``s`` onto the tangent space at ``x``.
    """
    s = _as_tensor(s)
    if s.shape != x.x.shape:
        raise DimensionError(f'direction shape {list(s.shape)} does not match base point shape {list(x.x.shape)}')
    safe_r = x.safe_radius
    coef = sum_lastdim(x.x * s) / (safe_r * safe_r)
    return TangentVector(s - coef * x.x, x)


def exp_map(x: SpherePoint, v: TangentVector) -> DenseTensor:
    """
    Closed-form exponential map on the sphere of radius ``||x||``.

    ``exp_x(v) = cos(||v||/||x||) x + ||x|| sin(||v||/||x||) v/||v||``, applied per row.
    Rows where ``v`` is exactly zero return ``x`` unchanged.
    """
    norm_v = reduce_norm_lastdim(v.v)
    is_zero = norm_v.data == 0
    safe_norm_v = where(is_zero, 1.0, norm_v)
    theta = norm_v / x.safe_radius
    moved = x.x * elementwise(theta, 'cos') + x.radius * elementwise(theta, 'sin') * (v.v / safe_norm_v)
    return where(is_zero, x.x, moved)


def geodesic_step(x: SpherePoint, s: ArrayLike, step_size: float) -> DenseTensor:
    """
    Move ``x`` along the geodesic given by ``step_size`` times the tangent projection of ``s``.
    """
    v = tangent_project(x, s)
    return exp_map(x, TangentVector(v.v * step_size, x))


def geodesic_angle(x: ArrayLike, y: ArrayLike) -> np.ndarray:
    """
    Angle between corresponding rows of ``x`` and ``y`` in [0, pi].

    Uses ``2 atan2(|x^ - y^|, |x^ + y^|)`` on the unit directions, which stays accurate near 0 and pi
    where ``arccos`` of the cosine does not.
    """
    x = _lift(x).data
    y = _lift(y).data
    x_hat = x / np.linalg.norm(x, axis=-1, keepdims=True)
    y_hat = y / np.linalg.norm(y, axis=-1, keepdims=True)
    return 2.0 * np.arctan2(np.linalg.norm(x_hat - y_hat, axis=-1), np.linalg.norm(x_hat + y_hat, axis=-1))
