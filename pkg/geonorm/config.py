import math
import os
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import ClassVar, Optional, Tuple, Union

from .norms import DEFAULT_CLAMP, GeoNormParams
from .schedules import DecayKind
from .tensor import Precision
from .utils import ContractError

__all__ = [
    'PostNorm', 'PreNorm', 'PreNormAlt', 'DeepNorm', 'SandwichNorm', 'GeoNorm', 'NormStrategy',
    'STRATEGY_NAMES', 'COMPARE_STRATEGIES', 'strategy_from_name', 'strategy_to_dict', 'strategy_from_dict',
    'ModelConfig', 'TrainConfig', 'default_seed', 'SEED_ENV_VAR'
]

SEED_ENV_VAR = 'GEONORM_SEED'
DEFAULT_SEED = 1234


@dataclass(frozen=True)
class PostNorm:
    name: ClassVar[str] = 'postnorm'


@dataclass(frozen=True)
class PreNorm:
    name: ClassVar[str] = 'prenorm'


@dataclass(frozen=True)
class PreNormAlt:
    """
    Pre-Norm with the residual stream rescaled by sqrt(j)/sqrt(j+1) at the j-th sub-layer (one-based).
    """
    name: ClassVar[str] = 'prenorm_alt'


@dataclass(frozen=True)
class DeepNorm:
    name: ClassVar[str] = 'deepnorm'

    @staticmethod
    def residual_scale(layer_total: int) -> float:
        return (2 * layer_total) ** 0.25

    @staticmethod
    def init_scale(layer_total: int) -> float:
        return (8 * layer_total) ** -0.25


@dataclass(frozen=True)
class SandwichNorm:
    name: ClassVar[str] = 'sandwichnorm'


@dataclass(frozen=True)
class GeoNorm:
    clamp: float = DEFAULT_CLAMP
    decay: DecayKind = DecayKind.HARMONIC
    scale: float = 1.0
    bias: float = 0.0
    name: ClassVar[str] = 'geonorm'

    def __post_init__(self):
        object.__setattr__(self, 'decay', DecayKind.from_name(self.decay))
        if not 0 < self.clamp <= math.pi / 2 + 1e-12:
            raise ContractError(f'clamp must be in (0, pi/2] but got {self.clamp}')

    def make_params(self, name: str, precision: Precision = Precision.WIDE) -> GeoNormParams:
        return GeoNormParams(scale=self.scale, bias=self.bias, clamp=self.clamp, decay=self.decay,
                             name=name, precision=precision)


NormStrategy = Union[PostNorm, PreNorm, PreNormAlt, DeepNorm, SandwichNorm, GeoNorm]

_STRATEGIES = {s.name: s for s in (PostNorm, PreNorm, DeepNorm, SandwichNorm, GeoNorm, PreNormAlt)}
STRATEGY_NAMES = tuple(_STRATEGIES)
COMPARE_STRATEGIES = ('postnorm', 'prenorm', 'deepnorm', 'sandwichnorm', 'geonorm')


def strategy_from_name(
        name: str,
        decay: Optional[Union[str, DecayKind]] = None,
        clamp: Optional[float] = None,
        scale: Optional[float] = None,
        bias: Optional[float] = None
) -> NormStrategy:
    """
    Build a strategy from its CLI/config name.

    Geodesic options (``decay``, ``clamp``, ``scale``, ``bias``) are only valid with 'geonorm'.
    """
    name = name.lower()
    if name not in _STRATEGIES:
        raise ContractError(f'unknown strategy "{name}"; expected one of {STRATEGY_NAMES}')
    geo_options = dict(decay=decay, clamp=clamp, scale=scale, bias=bias)
    geo_options = {k: v for k, v in geo_options.items() if v is not None}
    if name != GeoNorm.name:
        if geo_options:
            raise ContractError(f'{sorted(geo_options)} only apply to strategy "geonorm" but got "{name}"')
        return _STRATEGIES[name]()
    return GeoNorm(**geo_options)


def strategy_to_dict(strategy: NormStrategy) -> dict:
    out = dict(name=strategy.name)
    if isinstance(strategy, GeoNorm):
        out.update(clamp=strategy.clamp, decay=strategy.decay.value, scale=strategy.scale, bias=strategy.bias)
    return out


def strategy_from_dict(d: Union[dict, str]) -> NormStrategy:
    if isinstance(d, str):
        return strategy_from_name(d)
    d = dict(d)
    return strategy_from_name(d.pop('name'), **d)


def default_seed() -> int:
    if (seed := os.environ.get(SEED_ENV_VAR)) is None:
        return DEFAULT_SEED
    try:
        return int(seed)
    except ValueError:
        warnings.warn(f'{SEED_ENV_VAR}={seed!r} is not an integer; using {DEFAULT_SEED}.')
        return DEFAULT_SEED


@dataclass
class ModelConfig:
    """
    Architecture of the decoder-only model.

    Defaults are the desk-scale substitute for the 125M configuration (12 heads, 768 dims, 12 layers).
    """
    vocab: int = 256
    dim: int = 64
    heads: int = 4
    layers: int = 2
    seq_len: int = 64
    strategy: NormStrategy = field(default_factory=GeoNorm)
    rms_gain: bool = False

    def __post_init__(self):
        if isinstance(self.strategy, (str, dict)):
            self.strategy = strategy_from_dict(self.strategy)
        for name in ('vocab', 'dim', 'heads', 'layers', 'seq_len'):
            if (val := getattr(self, name)) < 1:
                raise ContractError(f'{name} must be at least 1 but got {val}')
        if self.dim % self.heads:
            raise ContractError(f'dim ({self.dim}) must be divisible by heads ({self.heads})')

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out['strategy'] = strategy_to_dict(self.strategy)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> 'ModelConfig':
        return cls(**d)


@dataclass
class TrainConfig:
    """
    Optimization settings; defaults follow the 125M column (Adam, betas (0.9, 0.95), lr 6e-4) at desk scale.
    """
    steps: int = 2000
    batch: int = 16
    lr: float = 6e-4
    betas: Tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    seed: int = field(default_factory=default_seed)
    eval_every: int = 100
    eval_batches: int = 4
    precision: Precision = Precision.NARROW

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if isinstance(self.precision, str):
            self.precision = Precision(self.precision)
        if len(self.betas) != 2 or not all(0 < b < 1 for b in self.betas):
            raise ContractError(f'betas must be two values in (0, 1) but got {self.betas}')
        if not self.lr > 0:
            raise ContractError(f'lr must be positive but got {self.lr}')
        if not self.eps > 0:
            raise ContractError(f'eps must be positive but got {self.eps}')
        if self.steps < 0:
            raise ContractError(f'steps must be non-negative but got {self.steps}')
        for name in ('batch', 'eval_every', 'eval_batches'):
            if (val := getattr(self, name)) < 1:
                raise ContractError(f'{name} must be at least 1 but got {val}')

    def to_dict(self) -> dict:
        out = asdict(self)
        out['betas'] = list(self.betas)
        out['precision'] = self.precision.value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> 'TrainConfig':
        return cls(**d)
