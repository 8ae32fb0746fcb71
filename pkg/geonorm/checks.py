import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .config import STRATEGY_NAMES, ModelConfig, strategy_from_name
from .model import AttentionWeights, BlockWeights, FfnWeights, ModelWeights, block_forward, causal_self_attention, \
    ffn, model_forward
from .norms import GeoNormParams, RmsNormLayer, geonorm, rmsnorm
from .schedules import LayerContext
from .sphere import SpherePoint, TangentVector, exp_map, geodesic_angle, tangent_project
from .tensor import (
    ComputationTape, DenseTensor, Parameter, Precision, backward, cross_entropy, elementwise, matmul,
    reduce_norm_lastdim, reduce_sum, softmax_lastdim, zero_grad
)
from .utils import CheckFailure, safe_print

__all__ = [
    'GradcheckResult', 'GradcheckReport', 'GeometryReport', 'gradcheck', 'run_gradchecks', 'run_geometry_checks',
    'GRADCHECK_CASES', 'FD_STEP', 'PRIMITIVE_TOLERANCE', 'LAYER_TOLERANCE'
]

FD_STEP = 1e-5
PRIMITIVE_TOLERANCE = 1e-6
LAYER_TOLERANCE = 1e-4

NORM_TOLERANCE = 1e-9
ORTHOGONALITY_TOLERANCE = 1e-9
IDEMPOTENCE_TOLERANCE = 1e-12
ANGLE_TOLERANCE = 1e-9


@dataclass
class GradcheckResult:
    name: str
    max_error: float
    tolerance: float
    checked: int
    worst: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_dict(self) -> dict:
        return dict(name=self.name, passed=self.passed, max_error=self.max_error, tolerance=self.tolerance,
                    checked=self.checked, worst=self.worst)


@dataclass
class GradcheckReport:
    seed: int
    results: List[GradcheckResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_error(self) -> float:
        return max((r.max_error for r in self.results), default=0.0)

    def failures(self) -> List[GradcheckResult]:
        return [r for r in self.results if not r.passed]

    def to_dict(self) -> dict:
        return dict(seed=self.seed, passed=self.passed, max_error=self.max_error,
                    results=[r.to_dict() for r in self.results])

    def raise_for_failure(self):
        if not self.passed:
            raise CheckFailure(
                f'gradient check failed for {[r.name for r in self.failures()]}',
                data=dict(suite='gradcheck', seed=self.seed, failures=[r.to_dict() for r in self.failures()])
            )


def gradcheck(
        name: str,
        fn: Callable[[], DenseTensor],
        params: Sequence[Parameter],
        rng: np.random.Generator,
        tolerance: float = LAYER_TOLERANCE,
        samples: int = 6,
        h: float = FD_STEP
) -> GradcheckResult:
    """
    Compare autodiff gradients of ``sum(fn() * R)`` with central finite differences.

    Parameters
    ----------
    name : str
        Label of the case.
    fn : Callable
        Re-evaluates the output from the current values of ``params``.
    params : list of Parameter
        Inputs to differentiate with respect to. Wide precision.
    rng : np.random.Generator
        Source of the projection ``R`` and of the sampled entries.
    tolerance : float
        Bound on ``|autodiff - numeric| / max(1, |numeric|)``.
    samples : int, default 6
        Entries checked per parameter.
    h : float, default 1e-5
        Finite-difference step.

    Returns
    -------
    GradcheckResult
    """
    out_shape = fn().shape
    projection = rng.normal(size=out_shape)

    def loss_value() -> float:
        return float((fn().data * projection).sum())

    zero_grad(params)
    with ComputationTape():
        backward(reduce_sum(fn() * projection))

    max_error, worst, checked = 0.0, {}, 0
    for p in params:
        picks = rng.choice(p.size, size=min(samples, p.size), replace=False)
        flat = p.data.reshape(-1)
        for i in picks:
            original = flat[i]
            flat[i] = original + h
            plus = loss_value()
            flat[i] = original - h
            minus = loss_value()
            flat[i] = original
            numeric = (plus - minus) / (2 * h)
            analytic = float(p.grad.data.reshape(-1)[i])
            error = abs(analytic - numeric) / max(1.0, abs(numeric))
            checked += 1
            if error >= max_error:
                max_error = error
                worst = dict(param=p.name, index=int(i), analytic=analytic, numeric=numeric)
    return GradcheckResult(name, max_error, tolerance, checked, worst)


def _param(rng: np.random.Generator, shape, name: str, low: float = None, high: float = None) -> Parameter:
    if low is None:
        value = rng.normal(size=shape)
    else:
        value = rng.uniform(low, high, size=shape)
    return Parameter(value, name, Precision.WIDE)


def _away_from(value: np.ndarray, c: float, margin: float = 0.1) -> np.ndarray:
    near = np.abs(value - c) < margin
    value[near] += np.sign(value[near] - c + 1e-12) * margin
    return value


def _randomize(params: Sequence[Parameter], rng: np.random.Generator, std: float = 0.3):
    for p in params:
        p.data[...] = rng.normal(0.0, std, size=p.shape)


def _elementwise_case(fn_name: str, c: Optional[float] = None, low: float = -2.0, high: float = 2.0):
    def build(rng):
        x = _param(rng, (3, 5), 'x', low, high)
        if c is not None and fn_name.startswith('clamp'):
            _away_from(x.data, c)
        return lambda: elementwise(x.value, fn_name, c), [x], PRIMITIVE_TOLERANCE
    return build


def _matmul_case(rng):
    a, b = _param(rng, (2, 3, 4), 'a'), _param(rng, (4, 5), 'b')
    return lambda: matmul(a.value, b.value), [a, b], PRIMITIVE_TOLERANCE


def _norm_case(rng):
    x = _param(rng, (4, 6), 'x')
    return lambda: reduce_norm_lastdim(x.value), [x], PRIMITIVE_TOLERANCE


def _softmax_case(rng):
    x = _param(rng, (3, 7), 'x')
    return lambda: softmax_lastdim(x.value), [x], PRIMITIVE_TOLERANCE


def _cross_entropy_case(rng):
    logits = _param(rng, (2, 4, 9), 'logits')
    targets = rng.integers(0, 9, size=(2, 4))
    return lambda: cross_entropy(logits.value, targets), [logits], PRIMITIVE_TOLERANCE


def _rmsnorm_case(rng):
    layer = RmsNormLayer(6, gain=True, precision=Precision.WIDE)
    layer.gain.data[...] = rng.uniform(0.5, 1.5, size=6)
    x = _param(rng, (3, 6), 'x')
    return lambda: rmsnorm(x.value, layer), [x] + layer.parameters(), LAYER_TOLERANCE


def _geonorm_inputs(rng, shape, ratio_range=(0.2, 0.5)):
    # rows keep ||tangent(g)||/||x|| well below the default clamp
    x = rng.normal(size=shape)
    direction = rng.normal(size=shape)
    direction -= (x * direction).sum(-1, keepdims=True) / (x * x).sum(-1, keepdims=True) * x
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    ratio = rng.uniform(*ratio_range, size=shape[:-1] + (1,))
    g = direction * ratio * np.linalg.norm(x, axis=-1, keepdims=True) + rng.normal(size=shape[:-1] + (1,)) * x
    return x, g


def _geonorm_case(rng):
    x_value, g_value = _geonorm_inputs(rng, (3, 4, 8))
    x = Parameter(x_value, 'x', Precision.WIDE)
    g = Parameter(g_value, 'g', Precision.WIDE)
    params = GeoNormParams(scale=1.1, bias=0.05, name='geonorm')
    ctx = LayerContext(1, 4)
    return lambda: geonorm(x.value, g.value, ctx, params), [x, g] + params.parameters(), LAYER_TOLERANCE


def _attention_case(rng):
    weights = AttentionWeights(8, 2, 'attn', rng, Precision.WIDE)
    _randomize(weights.parameters(), rng)
    x = _param(rng, (2, 5, 8), 'x')
    return lambda: causal_self_attention(x.value, weights), [x] + weights.parameters(), LAYER_TOLERANCE


def _ffn_case(rng):
    weights = FfnWeights(6, 'ffn', rng, Precision.WIDE)
    _randomize(weights.parameters(), rng)
    x = _param(rng, (2, 3, 6), 'x')
    return lambda: ffn(x.value, weights), [x] + weights.parameters(), LAYER_TOLERANCE


def _block_case(strategy_name: str):
    def build(rng):
        config = ModelConfig(vocab=11, dim=8, heads=2, layers=3, seq_len=5,
                             strategy=strategy_from_name(strategy_name), rms_gain=True)
        weights = BlockWeights(config, 1, rng, Precision.WIDE)
        _randomize(weights.attn.parameters() + weights.ffn.parameters(), rng)
        x = _param(rng, (2, 5, 8), 'x')
        ctx = LayerContext(1, config.layers)
        return (lambda: block_forward(x.value, ctx, config.strategy, weights),
                [x] + weights.parameters(), LAYER_TOLERANCE)
    return build


def _model_case(rng):
    config = ModelConfig(vocab=13, dim=8, heads=2, layers=2, seq_len=6)
    weights = ModelWeights(config, rng, Precision.WIDE)
    tokens = rng.integers(0, config.vocab, size=(2, config.seq_len))
    targets = rng.integers(0, config.vocab, size=(2, config.seq_len))
    return lambda: cross_entropy(model_forward(tokens, config, weights), targets), weights.parameters(), \
        LAYER_TOLERANCE


GRADCHECK_CASES: Dict[str, Callable[[np.random.Generator], Tuple[Callable, List[Parameter], float]]] = {
    'sin': _elementwise_case('sin'),
    'cos': _elementwise_case('cos'),
    'sqrt': _elementwise_case('sqrt', low=0.5, high=2.0),
    'clamp_max': _elementwise_case('clamp_max', 0.3),
    'clamp_min': _elementwise_case('clamp_min', -0.3),
    'scale': _elementwise_case('scale', 1.7),
    'add_scalar': _elementwise_case('add_scalar', -0.4),
    'exp': _elementwise_case('exp'),
    'log': _elementwise_case('log', low=0.5, high=2.0),
    'tanh': _elementwise_case('tanh'),
    'square': _elementwise_case('square'),
    'gelu': _elementwise_case('gelu'),
    'matmul': _matmul_case,
    'reduce_norm_lastdim': _norm_case,
    'softmax_lastdim': _softmax_case,
    'cross_entropy': _cross_entropy_case,
    'rmsnorm': _rmsnorm_case,
    'geonorm': _geonorm_case,
    'attention': _attention_case,
    'ffn': _ffn_case,
    **{f'block[{name}]': _block_case(name) for name in STRATEGY_NAMES},
    'model': _model_case,
}


def run_gradchecks(
        seed: int = 0,
        samples: int = 6,
        cases: Sequence[str] = None,
        verbose: Optional[bool] = False
) -> GradcheckReport:
    """
    Finite-difference check of every primitive, layer type and strategy block.

    Parameters
    ----------
    seed : int, default 0
        Seed of inputs, weights and sampled entries.
    samples : int, default 6
        Entries checked per parameter tensor.
    cases : list of str, optional
        Subset of ``GRADCHECK_CASES`` to run. All when omitted.
    verbose : bool or None, default False
        Whether to print each case's result. Displays a progress bar instead when ``False``.
        Nothing is displayed when ``None``.

    Returns
    -------
    GradcheckReport
    """
    names = list(GRADCHECK_CASES) if cases is None else list(cases)
    children = np.random.SeedSequence(seed).spawn(len(names))
    results = []
    for name, child in tqdm(list(zip(names, children)), unit='case', disable=verbose is not False,
                            desc='Gradcheck'):
        rng = np.random.default_rng(child)
        fn, params, tolerance = GRADCHECK_CASES[name](rng)
        result = gradcheck(name, fn, params, rng, tolerance=tolerance, samples=samples)
        results.append(result)
        if verbose:
            status = 'ok' if result.passed else 'FAILED'
            safe_print(f'{name}: max relative error {result.max_error:.3e} (< {tolerance:g}) {status}')
    return GradcheckReport(seed, results)


@dataclass
class GeometryReport:
    trials: int
    seed: int
    max_norm_deviation: float
    max_orthogonality: float
    max_idempotence: float
    max_angle_error: float
    worst_case: dict = field(default_factory=dict)

    @property
    def checks(self) -> Dict[str, Tuple[float, float]]:
        return dict(
            norm_preservation=(self.max_norm_deviation, NORM_TOLERANCE),
            orthogonality=(self.max_orthogonality, ORTHOGONALITY_TOLERANCE),
            idempotence=(self.max_idempotence, IDEMPOTENCE_TOLERANCE),
            geodesic_angle=(self.max_angle_error, ANGLE_TOLERANCE),
        )

    @property
    def passed(self) -> bool:
        return all(value < tol for value, tol in self.checks.values())

    def to_dict(self) -> dict:
        return dict(
            trials=self.trials,
            seed=self.seed,
            passed=self.passed,
            checks={k: dict(max=v, tolerance=t, passed=v < t) for k, (v, t) in self.checks.items()},
            worst_case=self.worst_case,
        )

    def raise_for_failure(self):
        if not self.passed:
            failed = [k for k, (v, t) in self.checks.items() if v >= t]
            raise CheckFailure(f'geometry check failed: {failed}',
                               data=dict(suite='geometry', seed=self.seed, failed=failed, cases=self.worst_case))


def _geometry_batch(dim: int, count: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    radius = 10 ** rng.uniform(-3, 3, size=(count, 1))
    x = rng.normal(size=(count, dim))
    x *= radius / np.linalg.norm(x, axis=-1, keepdims=True)
    s = rng.normal(size=(count, dim)) * radius
    angle = rng.uniform(0.01, math.pi - 0.01, size=(count, 1))
    return dict(x=x, s=s, angle=angle, radius=radius)


def run_geometry_checks(
        trials: int = 10_000,
        seed: int = 0,
        min_dim: int = 2,
        max_dim: int = 64,
        verbose: Optional[bool] = False
) -> GeometryReport:
    """
    Randomized invariants of the sphere kernels in wide precision.

    Each trial draws a dimension in ``[min_dim, max_dim]``, a base point with norm log-uniform in [1e-3, 1e3],
    a direction and a geodesic angle. Checked per trial:
    norm preservation of the exponential map (relative, < 1e-9),
    orthogonality of the tangent projection (< 1e-9),
    idempotence of the projection (< 1e-12, relative to ``max(1, ||s||)``),
    and the angle traced by a unit-speed geodesic (< 1e-9).
    Trials sharing a dimension are evaluated as one batch.
    """
    rng = np.random.default_rng(seed)
    dims = rng.integers(min_dim, max_dim + 1, size=trials)
    worst = dict(norm=0.0, orth=0.0, idem=0.0, angle=0.0)
    worst_case = {}

    def track(key: str, errors: np.ndarray, batch: Dict[str, np.ndarray], dim: int):
        i = int(np.argmax(errors))
        if errors[i] >= worst[key]:
            worst[key] = float(errors[i])
            worst_case[key] = dict(dim=dim, error=float(errors[i]), x=batch['x'][i].tolist(),
                                   s=batch['s'][i].tolist(), angle=float(batch['angle'][i, 0]))

    unique_dims, counts = np.unique(dims, return_counts=True)
    for dim, count in tqdm(list(zip(unique_dims.tolist(), counts.tolist())), unit='dim',
                           disable=verbose is not False, desc='Geometry'):
        batch = _geometry_batch(dim, count, rng)
        x_np, s_np, radius = batch['x'], batch['s'], batch['radius'][:, 0]
        point = SpherePoint(DenseTensor(x_np, Precision.WIDE))
        v = tangent_project(point, s_np)

        moved = exp_map(point, v).data
        track('norm', np.abs(np.linalg.norm(moved, axis=-1) - radius) / radius, batch, dim)

        s_norm = np.linalg.norm(s_np, axis=-1)
        orth = np.abs((x_np * v.v.data).sum(-1)) / (radius * s_norm + 1e-300)
        track('orth', orth, batch, dim)

        twice = tangent_project(point, v.v).v.data
        idem = np.abs(twice - v.v.data).max(-1) / np.maximum(1.0, s_norm)
        track('idem', idem, batch, dim)

        unit = v.v.data / np.linalg.norm(v.v.data, axis=-1, keepdims=True)
        step = unit * batch['angle'] * radius[:, None]
        traced = exp_map(point, TangentVector(step, point)).data
        track('angle', np.abs(geodesic_angle(x_np, traced) - batch['angle'][:, 0]), batch, dim)

        if verbose:
            safe_print(f'dim {dim}: {count} trials, max norm deviation {worst["norm"]:.3e}')

    return GeometryReport(
        trials=trials,
        seed=seed,
        max_norm_deviation=worst['norm'],
        max_orthogonality=worst['orth'],
        max_idempotence=worst['idem'],
        max_angle_error=worst['angle'],
        worst_case=worst_case,
    )
