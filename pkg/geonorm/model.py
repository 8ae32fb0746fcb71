import math
from functools import lru_cache
from typing import Dict, List, Optional

import numpy as np

from .config import DeepNorm, GeoNorm, ModelConfig, NormStrategy, PostNorm, PreNorm, PreNormAlt, SandwichNorm
from .norms import GeoNormParams, RmsNormLayer, geonorm
from .schedules import LayerContext
from .tensor import (
    DenseTensor, Parameter, Precision, embedding, gelu, masked_fill, reshape, softmax_lastdim, transpose, _lift
)
from .utils import ContractError, DimensionError

__all__ = [
    'AttentionWeights', 'FfnWeights', 'BlockWeights', 'ModelWeights', 'init_model_weights',
    'causal_self_attention', 'causal_mask', 'ffn', 'block_forward', 'model_forward', 'count_parameters', 'INIT_STD'
]

INIT_STD = 0.02


def _normal(rng: np.random.Generator, shape, precision: Precision, std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(precision.dtype)


class AttentionWeights:

    def __init__(self, dim: int, heads: int, name: str, rng: np.random.Generator = None,
                 precision: Precision = Precision.WIDE, value_scale: float = 1.0):
        if dim % heads:
            raise ContractError(f'dim ({dim}) must be divisible by heads ({heads})')
        self.dim = dim
        self.heads = heads
        rng = rng or np.random.default_rng(0)
        zeros = np.zeros(dim, dtype=precision.dtype)
        self.w_q = Parameter(_normal(rng, (dim, dim), precision), f'{name}.w_q', precision)
        self.w_k = Parameter(_normal(rng, (dim, dim), precision), f'{name}.w_k', precision)
        self.w_v = Parameter(_normal(rng, (dim, dim), precision) * value_scale, f'{name}.w_v', precision)
        self.w_o = Parameter(_normal(rng, (dim, dim), precision) * value_scale, f'{name}.w_o', precision)
        self.b_q = Parameter(zeros.copy(), f'{name}.b_q', precision)
        self.b_k = Parameter(zeros.copy(), f'{name}.b_k', precision)
        self.b_v = Parameter(zeros.copy(), f'{name}.b_v', precision)
        self.b_o = Parameter(zeros.copy(), f'{name}.b_o', precision)

    def parameters(self) -> List[Parameter]:
        return [self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v, self.w_o, self.b_o]


class FfnWeights:

    def __init__(self, dim: int, name: str, rng: np.random.Generator = None,
                 precision: Precision = Precision.WIDE, init_scale: float = 1.0):
        self.dim = dim
        self.hidden = 4 * dim
        rng = rng or np.random.default_rng(0)
        self.w_in = Parameter(_normal(rng, (dim, self.hidden), precision) * init_scale, f'{name}.w_in', precision)
        self.b_in = Parameter(np.zeros(self.hidden), f'{name}.b_in', precision)
        self.w_out = Parameter(_normal(rng, (self.hidden, dim), precision) * init_scale, f'{name}.w_out', precision)
        self.b_out = Parameter(np.zeros(dim), f'{name}.b_out', precision)

    def parameters(self) -> List[Parameter]:
        return [self.w_in, self.b_in, self.w_out, self.b_out]


class BlockWeights:
    """
    Weights of one transformer layer plus the normalization sites its strategy needs.

    ``norms`` maps a site name ('attn', 'ffn', and for SandwichNorm 'attn_out', 'ffn_out') to an RMSNorm;
    GeoNorm layers instead hold independent ``geo_attn``/``geo_ffn`` parameters.
    """

    def __init__(self, config: ModelConfig, layer_index: int, rng: np.random.Generator = None,
                 precision: Precision = Precision.WIDE):
        name = f'blocks.{layer_index}'
        strategy = config.strategy
        init_scale = DeepNorm.init_scale(config.layers) if isinstance(strategy, DeepNorm) else 1.0
        self.attn = AttentionWeights(config.dim, config.heads, f'{name}.attn', rng, precision, init_scale)
        self.ffn = FfnWeights(config.dim, f'{name}.ffn', rng, precision, init_scale)
        self.geo_attn: Optional[GeoNormParams] = None
        self.geo_ffn: Optional[GeoNormParams] = None
        self.norms: Dict[str, RmsNormLayer] = {}
        if isinstance(strategy, GeoNorm):
            self.geo_attn = strategy.make_params(f'{name}.geo_attn', precision)
            self.geo_ffn = strategy.make_params(f'{name}.geo_ffn', precision)
        else:
            sites = ('attn', 'attn_out', 'ffn', 'ffn_out') if isinstance(strategy, SandwichNorm) else ('attn', 'ffn')
            self.norms = {
                site: RmsNormLayer(config.dim, gain=config.rms_gain, name=f'{name}.norm_{site}', precision=precision)
                for site in sites
            }

    def parameters(self) -> List[Parameter]:
        params = self.attn.parameters() + self.ffn.parameters()
        for norm in self.norms.values():
            params.extend(norm.parameters())
        if self.geo_attn is not None:
            params.extend(self.geo_attn.parameters() + self.geo_ffn.parameters())
        return params


class ModelWeights:

    def __init__(self, config: ModelConfig, rng: np.random.Generator = None, precision: Precision = Precision.WIDE):
        rng = rng or np.random.default_rng(0)
        self.precision = precision
        dim, vocab = config.dim, config.vocab
        self.token_embedding = Parameter(_normal(rng, (vocab, dim), precision), 'token_embedding', precision)
        self.position_embedding = Parameter(_normal(rng, (config.seq_len, dim), precision),
                                            'position_embedding', precision)
        self.blocks = [BlockWeights(config, k, rng, precision) for k in range(config.layers)]
        self.input_norm: Optional[RmsNormLayer] = None
        if isinstance(config.strategy, GeoNorm):
            self.input_norm = RmsNormLayer(dim, gain=config.rms_gain, name='input_norm', precision=precision)
        self.final_norm = RmsNormLayer(dim, gain=config.rms_gain, name='final_norm', precision=precision)
        self.head_weight = Parameter(_normal(rng, (dim, vocab), precision), 'head.weight', precision)
        self.head_bias = Parameter(np.zeros(vocab), 'head.bias', precision)

    def parameters(self) -> List[Parameter]:
        params = [self.token_embedding, self.position_embedding]
        for block in self.blocks:
            params.extend(block.parameters())
        if self.input_norm is not None:
            params.extend(self.input_norm.parameters())
        params.extend(self.final_norm.parameters())
        params.extend([self.head_weight, self.head_bias])
        return params

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = {p.name: p for p in self.parameters()}
        if missing := set(params) - set(state):
            raise ContractError(f'missing weights: {sorted(missing)}')
        if unexpected := set(state) - set(params):
            raise ContractError(f'unexpected weights: {sorted(unexpected)}')
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f'"{name}" expects shape {list(p.shape)} but got {list(value.shape)}')
            p.data[...] = value


def init_model_weights(config: ModelConfig, seed: int = 0, precision: Precision = Precision.WIDE) -> ModelWeights:
    """
    Normal(0, 0.02) projections and embeddings, zero biases; DeepNorm scales the value/output projections and
    both FFN matrices by (8T)^(-1/4).
    """
    return ModelWeights(config, np.random.default_rng(seed), precision)


def count_parameters(weights: ModelWeights) -> int:
    return sum(p.size for p in weights.parameters())


@lru_cache(maxsize=8)
def causal_mask(seq: int) -> np.ndarray:
    """
    Read-only (seq, seq) mask that is True above the diagonal, i.e. at the future positions.
    """
    future = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    future.flags.writeable = False
    return future


def causal_self_attention(x: DenseTensor, weights: AttentionWeights) -> DenseTensor:
    """
    Multi-head scaled dot-product attention where position t only attends to positions <= t.

    Parameters
    ----------
    x : DenseTensor
        Shape (batch, seq, dim).
    weights : AttentionWeights
        Projections and head count.

    Returns
    -------
    DenseTensor
        Shape (batch, seq, dim).
    """
    x = _lift(x)
    if x.ndim != 3 or x.shape[-1] != weights.dim:
        raise DimensionError(f'attention expects (batch, seq, {weights.dim}) but got {list(x.shape)}')
    batch, seq, dim = x.shape
    heads = weights.heads
    head_dim = dim // heads

    def split_heads(t: DenseTensor) -> DenseTensor:
        return transpose(reshape(t, (batch, seq, heads, head_dim)), (0, 2, 1, 3))

    q = split_heads(x @ weights.w_q.value + weights.b_q.value)
    k = split_heads(x @ weights.w_k.value + weights.b_k.value)
    v = split_heads(x @ weights.w_v.value + weights.b_v.value)

    scores = (q @ transpose(k, (0, 1, 3, 2))) * (1 / math.sqrt(head_dim))
    attn = softmax_lastdim(masked_fill(scores, causal_mask(seq), -np.inf))
    out = reshape(transpose(attn @ v, (0, 2, 1, 3)), (batch, seq, dim))
    return out @ weights.w_o.value + weights.b_o.value


def ffn(x: DenseTensor, weights: FfnWeights) -> DenseTensor:
    x = _lift(x)
    if x.shape[-1] != weights.dim:
        raise DimensionError(f'ffn expects last dimension {weights.dim} but got {list(x.shape)}')
    hidden = gelu(x @ weights.w_in.value + weights.b_in.value)
    return hidden @ weights.w_out.value + weights.b_out.value


def block_forward(x: DenseTensor, ctx: LayerContext, strategy: NormStrategy, weights: BlockWeights) -> DenseTensor:
    """
    One transformer layer (attention sub-step then FFN sub-step) wired by ``strategy``.

    PostNorm      x' = N(x + A(x))
    PreNorm       x' = x + A(N(x))
    PreNormAlt    x' = sqrt(j/(j+1)) x + A(N(x)) / sqrt(j+1), j = 2k+1 for attention and 2k+2 for FFN
    DeepNorm      x' = N(beta x + A(x)), beta = (2T)^(1/4)
    SandwichNorm  x' = x + N(A(N(x)))
    GeoNorm       x' = geonorm(x, A(x))
    """
    attn = lambda h: causal_self_attention(h, weights.attn)
    mlp = lambda h: ffn(h, weights.ffn)
    norms = weights.norms

    if isinstance(strategy, GeoNorm):
        x = geonorm(x, attn(x), ctx, weights.geo_attn)
        return geonorm(x, mlp(x), ctx, weights.geo_ffn)
    if isinstance(strategy, PostNorm):
        x = norms['attn'](x + attn(x))
        return norms['ffn'](x + mlp(x))
    if isinstance(strategy, PreNorm):
        x = x + attn(norms['attn'](x))
        return x + mlp(norms['ffn'](x))
    if isinstance(strategy, PreNormAlt):
        for offset, site, module in ((1, 'attn', attn), (2, 'ffn', mlp)):
            j = 2 * ctx.layer_index + offset
            x = x * math.sqrt(j / (j + 1)) + module(norms[site](x)) * (1 / math.sqrt(j + 1))
        return x
    if isinstance(strategy, DeepNorm):
        beta = DeepNorm.residual_scale(ctx.layer_total)
        x = norms['attn'](x * beta + attn(x))
        return norms['ffn'](x * beta + mlp(x))
    if isinstance(strategy, SandwichNorm):
        x = x + norms['attn_out'](attn(norms['attn'](x)))
        return x + norms['ffn_out'](mlp(norms['ffn'](x)))
    raise ContractError(f'unsupported strategy {strategy!r}')


def model_forward(tokens: np.ndarray, config: ModelConfig, weights: ModelWeights) -> DenseTensor:
    """
    Token + learned position embeddings, ``config.layers`` blocks, final RMSNorm and a linear head.

    GeoNorm models RMS-normalize the embedded input first so every block starts on the sphere of radius sqrt(D).

    Parameters
    ----------
    tokens : np.ndarray
        Integer token ids of shape (batch, seq) with ``seq <= config.seq_len``.
    config : ModelConfig
        Architecture, including the normalization strategy.
    weights : ModelWeights
        Parameters built for ``config``.

    Returns
    -------
    DenseTensor
        Logits of shape (batch, seq, vocab).
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.ndim != 2:
        raise DimensionError(f'tokens must have shape (batch, seq) but got {list(tokens.shape)}')
    seq = tokens.shape[1]
    if not 1 <= seq <= config.seq_len:
        raise ContractError(f'sequence length must be in [1, {config.seq_len}] but got {seq}')
    h = embedding(weights.token_embedding.value, tokens) + embedding(weights.position_embedding.value, np.arange(seq))
    if weights.input_norm is not None:
        h = weights.input_norm(h)
    for k, block in enumerate(weights.blocks):
        h = block_forward(h, LayerContext(k, config.layers), config.strategy, block)
    h = weights.final_norm(h)
    return h @ weights.head_weight.value + weights.head_bias.value
