import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .model import AttentionWeights, FfnWeights, causal_self_attention, ffn
from .norms import RmsNormLayer
from .tensor import DenseTensor, Precision, _lift
from .utils import ContractError

__all__ = [
    'ChainModules', 'EquivalenceReport', 'run_prenorm_chain', 'run_alt_scaled_chain', 'check_equivalence',
    'random_chain_modules', 'chain_input', 'implied_angles', 'DEFAULT_TOLERANCES'
]

DEFAULT_TOLERANCES = {Precision.WIDE: 1e-6, Precision.NARROW: 1e-3}


@dataclass
class ChainModules:
    """
    Sub-modules phi_1..phi_K (fixed-weight attention/FFN closures) and the RMSNorm they all share.
    """
    modules: List[Callable[[DenseTensor], DenseTensor]]
    norm: RmsNormLayer

    def __len__(self):
        return len(self.modules)


@dataclass
class EquivalenceReport:
    deviations: List[float]
    scaled_deviations: List[float]
    max_deviation: float
    max_scaled_deviation: float
    tolerance: float
    scaled_tolerance: float
    precision: Precision
    implied_angles: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_deviation < self.tolerance and self.max_scaled_deviation < self.scaled_tolerance

    def to_dict(self) -> dict:
        return dict(
            passed=self.passed,
            precision=self.precision.value,
            tolerance=self.tolerance,
            scaled_tolerance=self.scaled_tolerance,
            max_deviation=self.max_deviation,
            max_scaled_deviation=self.max_scaled_deviation,
            deviations=self.deviations,
            scaled_deviations=self.scaled_deviations,
            implied_angles=self.implied_angles,
        )


def _check_base(x0: DenseTensor):
    if (np.linalg.norm(x0.data, axis=-1) <= 0).any():
        raise ContractError('every row of x0 must have a positive norm')


def run_prenorm_chain(x0: DenseTensor, mods: ChainModules) -> List[DenseTensor]:
    """
    Iterates ``x_k = x_{k-1} + phi_k(Norm(x_{k-1}))`` for k = 1..K and returns ``[x_1, ..., x_K]``.
    """
    x = _lift(x0)
    _check_base(x)
    iterates = []
    for phi in mods.modules:
        x = x + phi(mods.norm(x))
        iterates.append(x)
    return iterates


def run_alt_scaled_chain(x0: DenseTensor, mods: ChainModules) -> List[DenseTensor]:
    """
    Iterates ``x_k = sqrt(k)/sqrt(k+1) x_{k-1} + phi_k(Norm(x_{k-1})) / sqrt(k+1)`` from ``x_0`` (k one-based).

    Each iterate equals the Pre-Norm iterate divided by sqrt(k+1).
    """
    x = _lift(x0)
    _check_base(x)
    iterates = []
    for k, phi in enumerate(mods.modules, start=1):
        x = x * (math.sqrt(k) / math.sqrt(k + 1)) + phi(mods.norm(x)) * (1 / math.sqrt(k + 1))
        iterates.append(x)
    return iterates


def implied_angles(count: int) -> List[float]:
    """
    Angles ``arccos(sqrt(k)/sqrt(k+1))`` for k = 1..count that the rescaled chain applies to its state.
    """
    return [math.acos(math.sqrt(k) / math.sqrt(k + 1)) for k in range(1, count + 1)]


def _row_max(values: np.ndarray) -> float:
    return float(values.max()) if values.size else 0.0


def check_equivalence(
        x0: DenseTensor,
        mods: ChainModules,
        tolerance: Optional[float] = None,
        scaled_tolerance: float = 1e-9
) -> EquivalenceReport:
    """
    Run both chains on the same input and modules and compare them layer by layer.

    Parameters
    ----------
    x0 : DenseTensor
        Chain input, shape (..., D); its precision selects the default tolerance.
    mods : ChainModules
        Shared sub-modules and RMSNorm.
    tolerance : float, optional
        Bound on ``max_k ||Norm(x_k) - Norm(x_k_alt)|| / sqrt(D)``; 1e-6 in wide precision, 1e-3 in narrow.
    scaled_tolerance : float, default 1e-9
        Bound on the relative error of ``x_k_alt * sqrt(k+1) == x_k``. Only asserted in wide precision.

    Returns
    -------
    EquivalenceReport
    """
    x0 = _lift(x0)
    precision = x0.precision
    if tolerance is None:
        tolerance = DEFAULT_TOLERANCES[precision]
    if precision is not Precision.WIDE:
        scaled_tolerance = max(scaled_tolerance, tolerance)
    plain = run_prenorm_chain(x0, mods)
    alt = run_alt_scaled_chain(x0, mods)
    root_d = math.sqrt(mods.norm.dim)
    deviations, scaled_deviations = [], []
    for k, (x_k, x_alt) in enumerate(zip(plain, alt), start=1):
        diff = np.linalg.norm(mods.norm(x_k).data - mods.norm(x_alt).data, axis=-1) / root_d
        deviations.append(_row_max(diff))
        rescaled = x_alt.data * math.sqrt(k + 1)
        rel = np.linalg.norm(rescaled - x_k.data, axis=-1) / np.maximum(np.linalg.norm(x_k.data, axis=-1), 1e-300)
        scaled_deviations.append(_row_max(rel))
    return EquivalenceReport(
        deviations=deviations,
        scaled_deviations=scaled_deviations,
        max_deviation=max(deviations, default=0.0),
        max_scaled_deviation=max(scaled_deviations, default=0.0),
        tolerance=tolerance,
        scaled_tolerance=scaled_tolerance,
        precision=precision,
        implied_angles=implied_angles(len(mods)),
    )


def random_chain_modules(
        dim: int,
        layers: int,
        heads: int = 4,
        seed: int = 0,
        precision: Precision = Precision.WIDE,
        std: float = 0.2
) -> ChainModules:
    """
    Alternating attention/FFN sub-modules with random weights: ``layers`` transformer layers give 2*layers
    sub-modules.
    """
    rng = np.random.default_rng(seed)
    modules = []
    for k in range(layers):
        attn = AttentionWeights(dim, heads, f'chain.{k}.attn', rng, precision)
        mlp = FfnWeights(dim, f'chain.{k}.ffn', rng, precision)
        for p in attn.parameters() + mlp.parameters():
            p.data[...] = rng.normal(0.0, std, size=p.shape)
        modules.append(lambda h, w=attn: causal_self_attention(h, w))
        modules.append(lambda h, w=mlp: ffn(h, w))
    return ChainModules(modules, RmsNormLayer(dim, precision=precision))


def chain_input(dim: int, batch: int = 2, seq: int = 8, seed: int = 0,
                precision: Precision = Precision.WIDE) -> DenseTensor:
    rng = np.random.default_rng(seed)
    return DenseTensor(rng.normal(size=(batch, seq, dim)), precision)
