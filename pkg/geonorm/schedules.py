import math
import warnings
from dataclasses import dataclass
from enum import Enum

from .tensor import DenseTensor
from .utils import ContractError

__all__ = ['DecayKind', 'LayerContext', 'schedule_factor', 'apply_schedule', 'DECAY_NAMES']


class DecayKind(Enum):
    HARMONIC = 'harmonic'
    SQRT = 'sqrt'
    LINEAR = 'linear'

    @classmethod
    def from_name(cls, name: str) -> 'DecayKind':
        if isinstance(name, DecayKind):
            return name
        name = name.lower()
        if name == 'harnomic':
            warnings.warn('Decay name "harnomic" is a misspelling of "harmonic"; using "harmonic".')
            return cls.HARMONIC
        try:
            return cls(name)
        except ValueError:
            raise ContractError(f'unknown decay "{name}"; expected one of {DECAY_NAMES}')


DECAY_NAMES = tuple(k.value for k in DecayKind)


@dataclass(frozen=True)
class LayerContext:
    """
    Zero-based index ``layer_index`` of the current layer out of ``layer_total`` layers.
    """
    layer_index: int
    layer_total: int

    def __post_init__(self):
        if self.layer_total < 1:
            raise ContractError(f'layer_total must be at least 1 but got {self.layer_total}')
        if not 0 <= self.layer_index < self.layer_total:
            raise ContractError(f'layer_index must be in [0, {self.layer_total}) but got {self.layer_index}')


def schedule_factor(kind: DecayKind, ctx: LayerContext) -> float:
    """
    Layer-wise decay factor of the geodesic angle.

    Parameters
    ----------
    kind : DecayKind
        'harmonic' -> 1/(k+1), 'sqrt' -> 1/sqrt(k+1), 'linear' -> (T-k)/T.
    ctx : LayerContext
        Zero-based layer index ``k`` and total layer count ``T``.

    Returns
    -------
    float
        Factor in (0, 1].
    """
    k, total = ctx.layer_index, ctx.layer_total
    kind = DecayKind.from_name(kind)
    if kind is DecayKind.HARMONIC:
        return 1 / (k + 1)
    if kind is DecayKind.SQRT:
        return 1 / math.sqrt(k + 1)
    return (total - k) / total


def apply_schedule(theta: DenseTensor, kind: DecayKind, ctx: LayerContext) -> DenseTensor:
    return theta * schedule_factor(kind, ctx)
