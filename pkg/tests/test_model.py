import math

import numpy as np
import pytest

from geonorm.config import STRATEGY_NAMES, DeepNorm, ModelConfig, strategy_from_name
from geonorm.model import (
    AttentionWeights, BlockWeights, FfnWeights, block_forward, causal_mask, causal_self_attention, count_parameters,
    ffn, init_model_weights, model_forward
)
from geonorm.schedules import LayerContext
from geonorm.tensor import DenseTensor, Precision, cross_entropy, embedding
from geonorm.utils import ContractError, DimensionError, TokenIndexError


def small_config(strategy='geonorm', **kwargs) -> ModelConfig:
    options = dict(vocab=17, dim=8, heads=2, layers=3, seq_len=6)
    options.update(kwargs)
    return ModelConfig(strategy=strategy_from_name(strategy), **options)


def identity_attention() -> AttentionWeights:
    weights = AttentionWeights(2, 1, 'attn')
    for w in (weights.w_q, weights.w_k, weights.w_v, weights.w_o):
        w.data[...] = np.eye(2)
    return weights


def test_attention_hand_fixture():
    x = DenseTensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
    out = causal_self_attention(x, identity_attention()).data[0]
    e = math.exp(1 / math.sqrt(2))
    np.testing.assert_allclose(out[0], [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(out[1], [1 / (1 + e), e / (1 + e)], atol=1e-15)


def test_attention_single_position_and_zero_values(rng):
    weights = AttentionWeights(8, 2, 'attn', rng)
    x = rng.normal(size=(2, 1, 8))
    first = causal_self_attention(DenseTensor(x), weights).data
    expected = (x @ weights.w_v.data + weights.b_v.data) @ weights.w_o.data + weights.b_o.data
    np.testing.assert_allclose(first, expected, atol=1e-12)

    weights.w_v.data[...] = 0
    out = causal_self_attention(DenseTensor(rng.normal(size=(2, 5, 8))), weights).data
    np.testing.assert_array_equal(out, np.zeros((2, 5, 8)))


def test_attention_shape_check(rng):
    with pytest.raises(DimensionError):
        causal_self_attention(DenseTensor(rng.normal(size=(2, 5, 6))), AttentionWeights(8, 2, 'attn', rng))


def test_causal_mask_is_shared_and_read_only():
    mask = causal_mask(4)
    np.testing.assert_array_equal(mask, np.triu(np.ones((4, 4), dtype=bool), k=1))
    assert causal_mask(4) is mask
    with pytest.raises(ValueError):
        mask[0, 0] = True


def test_ffn_examples(rng):
    weights = FfnWeights(1, 'ffn')
    weights.w_in.data[...] = [[1.0, 0.0, 0.0, 0.0]]
    weights.w_out.data[...] = [[1.0], [0.0], [0.0], [0.0]]
    x = 0.1
    gelu = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    assert ffn(DenseTensor([[[x]]]), weights).item() == pytest.approx(gelu, abs=1e-15)

    weights = FfnWeights(8, 'ffn', rng)
    np.testing.assert_array_equal(ffn(DenseTensor(np.zeros((1, 3, 8))), weights).data, np.zeros((1, 3, 8)))
    assert ffn(DenseTensor(rng.normal(size=(2, 3, 8))), weights).shape == (2, 3, 8)


def test_ffn_hidden_width():
    weights = FfnWeights(6, 'ffn')
    assert weights.w_in.shape == (6, 24) and weights.w_out.shape == (24, 6)


def test_geonorm_block_with_zero_weights_is_identity(rng):
    config = small_config('geonorm')
    block = BlockWeights(config, 0, rng)
    for p in block.attn.parameters() + block.ffn.parameters():
        p.data[...] = 0
    x = rng.normal(size=(2, 6, 8))
    out = block_forward(DenseTensor(x), LayerContext(0, 3), config.strategy, block).data
    np.testing.assert_allclose(out, x, atol=1e-7)


def test_postnorm_block_output_radius(rng):
    config = small_config('postnorm')
    block = BlockWeights(config, 1, rng)
    out = block_forward(DenseTensor(rng.normal(size=(2, 6, 8))), LayerContext(1, 3), config.strategy, block)
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=-1), math.sqrt(8), rtol=1e-6)


def test_geonorm_hidden_states_stay_on_sphere(rng):
    config = small_config('geonorm')
    weights = init_model_weights(config, seed=3)
    tokens = rng.integers(0, config.vocab, size=(2, config.seq_len))
    h = embedding(weights.token_embedding.value, tokens) + embedding(weights.position_embedding.value,
                                                                     np.arange(config.seq_len))
    h = weights.input_norm(h)
    for k, block in enumerate(weights.blocks):
        h = block_forward(h, LayerContext(k, config.layers), config.strategy, block)
        np.testing.assert_allclose(np.linalg.norm(h.data, axis=-1), math.sqrt(8), rtol=1e-4)


def test_prenorm_block_sub_input_scale_invariance(rng):
    config = small_config('prenorm')
    block = BlockWeights(config, 0, rng)
    x = rng.normal(size=(1, 6, 8))
    np.testing.assert_allclose(block.norms['attn'](DenseTensor(5 * x)).data, block.norms['attn'](DenseTensor(x)).data,
                               atol=1e-12)


def test_model_forward_shapes_and_determinism():
    config = small_config()
    weights = init_model_weights(config, seed=0)
    assert model_forward(np.array([[3]]), config, weights).shape == (1, 1, config.vocab)
    prompt = np.array([1, 2, 3, 4])
    logits = model_forward(np.stack([prompt, prompt]), config, weights).data
    assert np.array_equal(logits[0], logits[1])
    assert model_forward(prompt, config, weights).shape == (1, 4, config.vocab)


def test_model_forward_errors():
    config = small_config()
    weights = init_model_weights(config)
    with pytest.raises(ContractError):
        model_forward(np.zeros((1, config.seq_len + 1), dtype=int), config, weights)
    with pytest.raises(TokenIndexError):
        model_forward(np.array([[0, config.vocab]]), config, weights)


def test_uniform_head_gives_log_vocab_loss(rng):
    config = small_config('prenorm')
    weights = init_model_weights(config)
    weights.head_weight.data[...] = 0
    weights.head_bias.data[...] = 0.25
    tokens = rng.integers(0, config.vocab, size=(2, 6))
    loss = cross_entropy(model_forward(tokens, config, weights), tokens).item()
    assert loss == pytest.approx(math.log(config.vocab))


@pytest.mark.parametrize('strategy', STRATEGY_NAMES)
def test_causality(strategy, rng):
    config = small_config(strategy)
    weights = init_model_weights(config, seed=1)
    tokens = rng.integers(0, config.vocab, size=(1, config.seq_len))
    base = model_forward(tokens, config, weights).data
    t = 3
    perturbed = tokens.copy()
    perturbed[0, t] = (perturbed[0, t] + 1) % config.vocab
    changed = model_forward(perturbed, config, weights).data
    np.testing.assert_allclose(changed[0, :t], base[0, :t], rtol=0, atol=1e-12)
    assert not np.allclose(changed[0, t], base[0, t])


def test_parameter_counts():
    counts = {name: count_parameters(init_model_weights(small_config(name))) for name in STRATEGY_NAMES}
    baseline = counts['prenorm']
    for name in ('postnorm', 'deepnorm', 'sandwichnorm', 'prenorm_alt'):
        assert counts[name] == baseline
    assert counts['geonorm'] == baseline + 4 * small_config().layers


def test_deepnorm_initialization_scaling():
    pre = init_model_weights(small_config('prenorm'), seed=5)
    deep = init_model_weights(small_config('deepnorm'), seed=5)
    scale = DeepNorm.init_scale(3)
    for a, b in zip(pre.blocks, deep.blocks):
        np.testing.assert_array_equal(a.attn.w_q.data, b.attn.w_q.data)
        np.testing.assert_array_equal(a.attn.w_k.data, b.attn.w_k.data)
        for name in ('w_v', 'w_o'):
            np.testing.assert_allclose(getattr(b.attn, name).data, getattr(a.attn, name).data * scale)
        np.testing.assert_allclose(b.ffn.w_in.data, a.ffn.w_in.data * scale)
        np.testing.assert_allclose(b.ffn.w_out.data, a.ffn.w_out.data * scale)


def test_sandwichnorm_has_four_norm_sites():
    block = init_model_weights(small_config('sandwichnorm')).blocks[0]
    assert sorted(block.norms) == ['attn', 'attn_out', 'ffn', 'ffn_out']


def test_rescaled_prenorm_matches_prenorm_logits(rng):
    pre_config = small_config('prenorm', layers=4)
    alt_config = small_config('prenorm_alt', layers=4)
    pre = init_model_weights(pre_config, seed=9)
    alt = init_model_weights(alt_config, seed=9)
    tokens = rng.integers(0, pre_config.vocab, size=(2, 6))
    a = model_forward(tokens, pre_config, pre).data
    b = model_forward(tokens, alt_config, alt).data
    np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-12)


def test_state_dict_roundtrip():
    config = small_config('geonorm', rms_gain=True)
    source = init_model_weights(config, seed=1)
    target = init_model_weights(config, seed=2)
    target.load_state_dict(source.state_dict())
    tokens = np.array([[1, 2, 3]])
    np.testing.assert_array_equal(model_forward(tokens, config, target).data,
                                  model_forward(tokens, config, source).data)
    state = source.state_dict()
    state.pop('head.bias')
    with pytest.raises(ContractError):
        target.load_state_dict(state)


def test_narrow_precision_model():
    config = small_config()
    weights = init_model_weights(config, precision=Precision.NARROW)
    assert model_forward(np.array([[1, 2]]), config, weights).data.dtype == np.float32
