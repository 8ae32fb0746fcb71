import math
from typing import List, Optional

import numpy as np

from .schedules import DecayKind, LayerContext, apply_schedule
from .tensor import DenseTensor, Parameter, Precision, elementwise, reduce_norm_lastdim, sum_lastdim, _lift
from .utils import ContractError, DimensionError

__all__ = ['RmsNormLayer', 'rmsnorm', 'GeoNormParams', 'geonorm', 'DEFAULT_CLAMP']

DEFAULT_CLAMP = math.pi / 4

# lower bounds on the tangent norm and radius
TANGENT_EPS = 1e-8
RADIUS_EPS = 1e-6
# rmsnorm denominator guard
RMS_EPS = 1e-12


class RmsNormLayer:
    """
    Rescales each row to norm ``sqrt(dim)``, optionally followed by a learnable per-dimension gain.
    """

    def __init__(self, dim: int, gain: bool = False, name: str = 'rmsnorm', precision: Precision = Precision.WIDE):
        if dim < 1:
            raise ContractError(f'dim must be positive but got {dim}')
        self.dim = dim
        self.name = name
        self.gain: Optional[Parameter] = Parameter(np.ones(dim), f'{name}.gain', precision) if gain else None

    def parameters(self) -> List[Parameter]:
        return [self.gain] if self.gain is not None else []

    def __call__(self, v: DenseTensor) -> DenseTensor:
        return rmsnorm(v, self)

    def __repr__(self):
        return f'RmsNormLayer(dim={self.dim}, gain={self.gain is not None})'


def rmsnorm(v: DenseTensor, layer: RmsNormLayer) -> DenseTensor:
    """
    ``(v / max(||v||, 1e-12)) * sqrt(D)`` per row; invariant to positive rescaling of ``v``.
    """
    v = _lift(v)
    if v.shape[-1] != layer.dim:
        raise DimensionError(f'rmsnorm expects last dimension {layer.dim} but got shape {list(v.shape)}')
    norm = elementwise(reduce_norm_lastdim(v), 'clamp_min', RMS_EPS)
    out = v / norm * math.sqrt(layer.dim)
    if layer.gain is not None:
        out = out * layer.gain.value
    return out


class GeoNormParams:
    """
    State of one geodesic normalization site.

    Parameters
    ----------
    scale : float, default 1.0
        Initial value of the learnable angle multiplier.
    bias : float, default 0.0
        Initial value of the learnable angle offset.
    clamp : float, default pi/4
        Upper bound on the rotation angle, in (0, pi/2].
    decay : DecayKind or str, default 'harmonic'
        Layer-wise schedule of the angle.
    name : str
        Prefix for the parameter names.
    precision : Precision
        Precision of ``scale`` and ``bias``.

    Notes
    -----
    ``clamp`` bounds the angle both before and after the schedule.
    ``scale`` and ``bias`` are always floating-point parameters, even when given as integers.
    """

    def __init__(
            self,
            scale: float = 1.0,
            bias: float = 0.0,
            clamp: float = DEFAULT_CLAMP,
            decay=DecayKind.HARMONIC,
            name: str = 'geonorm',
            precision: Precision = Precision.WIDE
    ):
        if not 0 < clamp <= math.pi / 2 + 1e-12:
            raise ContractError(f'clamp must be in (0, pi/2] but got {clamp}')
        self.scale = Parameter(float(scale), f'{name}.scale', precision)
        self.bias = Parameter(float(bias), f'{name}.bias', precision)
        self.clamp = float(clamp)
        self.decay = DecayKind.from_name(decay)
        self.name = name

    def parameters(self) -> List[Parameter]:
        return [self.scale, self.bias]

    def __repr__(self):
        return (f'GeoNormParams(name={self.name!r}, scale={self.scale.value.item():.6g}, '
                f'bias={self.bias.value.item():.6g}, clamp={self.clamp:.6g}, decay={self.decay.value!r})')


def geonorm(x: DenseTensor, g: DenseTensor, ctx: LayerContext, params: GeoNormParams) -> DenseTensor:
    """
    Move ``x`` along the sphere of radius ``||x||`` in the tangent direction of ``g``.

    Parameters
    ----------
    x : DenseTensor
        Residual stream, shape (..., D).
    g : DenseTensor
        Sub-module output (attention or FFN of ``x``), same shape as ``x``.
    ctx : LayerContext
        Layer index and total used by the decay schedule.
    params : GeoNormParams
        Learnable scale/bias, clamp and decay of this site.

    Returns
    -------
    DenseTensor
        ``x cos(theta) + u ||x|| sin(theta)`` where ``u`` is the unit tangent direction of ``g`` and
        ``theta = min((min(|v|/|x|, clamp) * scale + bias) * factor(k), clamp)``.
    """
    x, g = _lift(x), _lift(g)
    if x.shape != g.shape:
        raise DimensionError(f'geonorm needs x and g of the same shape but got {list(x.shape)} and {list(g.shape)}')
    radius = reduce_norm_lastdim(x)
    tangent = g - sum_lastdim(x * g) / (radius * radius) * x

    tangent_norm = reduce_norm_lastdim(tangent)
    safe_tangent_norm = elementwise(tangent_norm, 'clamp_min', TANGENT_EPS)
    unit_tangent = tangent / safe_tangent_norm

    safe_radius = elementwise(radius, 'clamp_min', RADIUS_EPS)
    theta = elementwise(safe_tangent_norm / safe_radius, 'clamp_max', params.clamp)
    # every decay kind goes through the schedule
    theta = apply_schedule(theta * params.scale.value + params.bias.value, params.decay, ctx)
    theta = elementwise(theta, 'clamp_max', params.clamp)

    return x * elementwise(theta, 'cos') + unit_tangent * safe_radius * elementwise(theta, 'sin')
