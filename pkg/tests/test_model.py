import math

import numpy as np
import pytest

from formant_tts import tensor as tn
from formant_tts.data import PitchStats
from formant_tts.errors import CapacityError, ConfigurationError, DimensionError, InputError
from formant_tts.model import (
    FormantExcitationModel,
    ModelConfig,
    init_weights,
    length_regulate,
    positional_encoding,
)
from formant_tts.tensor import Tensor, grad_check_many

TINY = dict(vocab_size=5, d_model=8, n_heads=2, head_dim=4, ff_hidden=8, n_mel_bins=4, max_frames=64)
STATS = PitchStats(np.array([150.0]), np.array([30.0]))


def tiny(seed=0, **kw):
    return FormantExcitationModel(ModelConfig(**{**TINY, **kw}), pitch_stats=STATS, seed=seed)


def rand(seed, shape):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def weighted(out, seed):
    w = np.random.default_rng(seed + 1000).normal(size=out.shape)
    return tn.tsum(tn.mul(out, w))


# ------------------------------------------------------------------ config


def test_default_config_block_counts():
    cfg = ModelConfig()
    assert (cfg.n_encoder_blocks, cfg.n_generator_blocks, cfg.n_decoder_blocks) == (6, 4, 2)


def test_config_rejects_head_mismatch():
    with pytest.raises(ConfigurationError, match="d_model"):
        ModelConfig(d_model=10, n_heads=2, head_dim=4)


def test_weights_are_finite_and_fc1_is_shared():
    params = init_weights(ModelConfig(**TINY))
    assert all(np.isfinite(p.data).all() for p in params.values())
    assert sum(k.startswith("decoder.fc1.") for k in params) == 2


# ------------------------------------------------------------------ positional encoding


def test_positional_encoding_position_zero():
    pe = positional_encoding(4, 8)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)


def test_positional_encoding_direct_formula():
    D = 8
    pe = positional_encoding(10, D)
    for t in range(10):
        for i in range(D // 2):
            assert pe[t, 2 * i] == pytest.approx(math.sin(t / 10000 ** (2 * i / D)), abs=1e-14)
            assert pe[t, 2 * i + 1] == pytest.approx(math.cos(t / 10000 ** (2 * i / D)), abs=1e-14)


def test_positional_encoding_is_deterministic():
    np.testing.assert_array_equal(positional_encoding(7, 6), positional_encoding(7, 6))


def test_positional_encoding_capacity():
    with pytest.raises(CapacityError):
        positional_encoding(65, 8, max_frames=64)


# ------------------------------------------------------------------ attention


def attention_oracle(model, x, prefix, addend=None):
    """Per-head loop with explicit softmax."""
    P = {k: v.data for k, v in model.params.items()}
    cfg = model.config
    q_in = x if addend is None else x + addend
    q = q_in @ P[f"{prefix}.attn.w_q"] + P[f"{prefix}.attn.b_q"]
    k = x @ P[f"{prefix}.attn.w_k"]
    v = x @ P[f"{prefix}.attn.w_v"]
    heads = []
    for h in range(cfg.n_heads):
        sl = slice(h * cfg.head_dim, (h + 1) * cfg.head_dim)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(cfg.head_dim)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        heads.append((e / e.sum(axis=1, keepdims=True)) @ v[:, sl])
    return np.concatenate(heads, axis=1) @ P[f"{prefix}.attn.w_o"] + P[f"{prefix}.attn.b_o"]


@pytest.mark.parametrize("with_addend", [False, True])
def test_attention_matches_loop_oracle(with_addend):
    m = tiny()
    x = rand(1, (5, 8))
    addend = rand(2, (5, 8)) if with_addend else None
    trace = []
    out = m.multi_head_self_attention(x, "encoder.0", addend, trace)
    expected = attention_oracle(m, x.data, "encoder.0", None if addend is None else addend.data)
    np.testing.assert_allclose(out.data, expected, atol=1e-12, rtol=0)
    np.testing.assert_allclose(trace[0].sum(axis=-1), 1.0, atol=1e-12)


def test_attention_zero_addend_equals_no_addend():
    m = tiny()
    x = rand(3, (5, 8))
    a = m.multi_head_self_attention(x, "formant.1")
    b = m.multi_head_self_attention(x, "formant.1", Tensor(np.zeros((5, 8))))
    np.testing.assert_array_equal(a.data, b.data)


def test_attention_single_frame_weight_is_one():
    m = tiny()
    trace = []
    m.multi_head_self_attention(rand(4, (1, 8)) * 50.0, "encoder.2", trace=trace)
    np.testing.assert_array_equal(trace[0], 1.0)


def test_attention_addend_shape_error():
    with pytest.raises(DimensionError):
        tiny().multi_head_self_attention(rand(0, (5, 8)), "encoder.0", rand(1, (4, 8)))


# ------------------------------------------------------------------ FFT block


def test_fft_block_shape_and_determinism():
    m = tiny()
    x = rand(5, (6, 8))
    a, b = m.fft_block(x, "encoder.0"), m.fft_block(x, "encoder.0")
    assert a.shape == (6, 8)
    np.testing.assert_array_equal(a.data, b.data)


@pytest.mark.parametrize("seed", range(5))
def test_fft_block_grad_check(seed):
    m = tiny(seed)
    x = rand(seed, (6, 8))
    x.requires_grad = True
    addend = rand(seed + 50, (6, 8))
    addend.requires_grad = True
    f = lambda: weighted(m.fft_block(x, "excitation.0", addend), seed)
    assert grad_check_many(f, [x, addend] + m.parameters(), n_samples=60, seed=seed) < 1e-4


# ------------------------------------------------------------------ text encoder and predictors


def test_encode_single_phoneme_shape():
    assert tiny().encode_text([3]).shape == (1, 8)


def test_encode_is_position_sensitive():
    m = tiny()
    a = m.encode_text([1, 2, 3]).data
    b = m.encode_text([2, 1, 3]).data
    assert not np.allclose(a[:2], b[[1, 0]])


def test_encode_empty_sequence():
    with pytest.raises(InputError):
        tiny().encode_text([])


def test_encoder_gradient_touches_used_rows_only():
    m = tiny()
    table = m.params["phoneme_embedding"]
    tn.backward(weighted(m.encode_text([1, 3, 1]), 0))
    used = np.abs(table.grad).sum(axis=1) > 0
    np.testing.assert_array_equal(used, [False, True, False, True, False])


def test_predictors_output_lengths():
    m = tiny()
    log_d, pitch = m.predict_temporal(m.encode_text([1, 2, 3, 4]))
    assert log_d.shape == (4,) and pitch.shape == (4,)


def test_predictors_with_zero_weights_emit_bias():
    m = tiny()
    for name in ("duration_predictor", "pitch_predictor"):
        m.params[f"{name}.proj.weight"].data[:] = 0.0
        m.params[f"{name}.proj.bias"].data[:] = 0.75
    log_d, pitch = m.predict_temporal(rand(0, (5, 8)))
    np.testing.assert_array_equal(log_d.data, 0.75)
    np.testing.assert_array_equal(pitch.data, 0.75)


@pytest.mark.parametrize("seed", range(3))
def test_predictor_grad_check(seed):
    m = tiny(seed)
    h = rand(seed, (5, 8))
    h.requires_grad = True
    names = [k for k in m.params if k.startswith("pitch_predictor")]
    f = lambda: weighted(m.predict_temporal(h)[1], seed)
    assert grad_check_many(f, [h] + [m.params[k] for k in names], n_samples=80, seed=seed) < 1e-4


# ------------------------------------------------------------------ pitch embedding


def test_pitch_embedding_zero_input_zero_bias():
    m = tiny()
    m.params["pitch_embedding.bias"].data[:] = 0.0
    np.testing.assert_array_equal(m.pitch_to_embedding(np.zeros(4)).data, 0.0)


def test_pitch_embedding_is_linear_without_bias():
    m = tiny()
    m.params["pitch_embedding.bias"].data[:] = 0.0
    v = np.random.default_rng(0).normal(size=6)
    np.testing.assert_allclose(m.pitch_to_embedding(2 * v).data, 2 * m.pitch_to_embedding(v).data,
                               atol=1e-14, rtol=0)


def test_pitch_embedding_sliding_window_oracle():
    m = tiny()
    K = m.params["pitch_embedding.kernel"].data  # [k, 1, D]
    b = m.params["pitch_embedding.bias"].data
    v = np.random.default_rng(1).normal(size=5)
    half = K.shape[0] // 2
    padded = np.concatenate([np.zeros(half), v, np.zeros(half)])
    expected = np.array([sum(padded[t + j] * K[j, 0] for j in range(K.shape[0])) + b for t in range(5)])
    np.testing.assert_allclose(m.pitch_to_embedding(v).data, expected, atol=1e-13, rtol=0)


# ------------------------------------------------------------------ length regulation


def test_length_regulate_identity():
    x = rand(0, (4, 3))
    np.testing.assert_array_equal(length_regulate(x, [1, 1, 1, 1]).data, x.data)


def test_length_regulate_definition():
    x = Tensor(np.array([[1.0], [2.0], [3.0]]))
    np.testing.assert_array_equal(length_regulate(x, [2, 1, 3]).data.ravel(), [1, 1, 2, 3, 3, 3])


def test_length_regulate_index_oracle_and_gradient():
    rng = np.random.default_rng(2)
    x = rand(3, (6, 4))
    x.requires_grad = True
    d = rng.integers(1, 5, size=6)
    idx = [i for i, n in enumerate(d) for _ in range(n)]
    out = length_regulate(x, d)
    np.testing.assert_array_equal(out.data, x.data[idx])
    tn.backward(tn.tsum(out))
    np.testing.assert_array_equal(x.grad, np.repeat(d[:, None], 4, axis=1).astype(float))


def test_length_regulate_clamps_nonpositive(caplog):
    out = length_regulate(rand(0, (3, 2)), [0, 2, -1])
    assert out.shape == (4, 2)
    assert "clamp" in caplog.text.lower()


# ------------------------------------------------------------------ generators and decoder


def test_formant_path_ignores_pitch():
    m = tiny()
    h = rand(0, (7, 8))
    base, _ = m.run_generators(h, rand(1, (7, 8)))
    for s in range(2, 12):
        f, _ = m.run_generators(h, rand(s, (7, 8)))
        np.testing.assert_array_equal(f.data, base.data)


def test_zero_pitch_collapses_query_modes():
    ext = tiny(extended_query=True)
    std = FormantExcitationModel(ModelConfig(**{**TINY, "extended_query": False}),
                                 params=ext.params, pitch_stats=STATS)
    h, p = rand(4, (7, 8)), Tensor(np.zeros((7, 8)))
    for a, b in zip(ext.run_generators(h, p), std.run_generators(h, p)):
        np.testing.assert_array_equal(a.data, b.data)


def test_generator_shape_mismatch():
    with pytest.raises(DimensionError):
        tiny().run_generators(rand(0, (5, 8)), rand(1, (6, 8)))


@pytest.mark.parametrize("extended", [True, False])
def test_generators_grad_check(extended):
    m = tiny(2, extended_query=extended)
    h, p = rand(5, (4, 8)), rand(6, (4, 8))
    h.requires_grad = p.requires_grad = True

    def f():
        a, b = m.run_generators(h, p)
        return tn.add(weighted(a, 1), weighted(b, 2))

    assert grad_check_many(f, [h, p] + m.parameters(), n_samples=120, seed=3) < 1e-4


def test_decoder_first_head_is_shared_linear():
    m = tiny()
    m.params["decoder.fc1.bias"].data[:] = 0.0
    f, e = rand(0, (5, 8)), rand(1, (5, 8))
    mel1 = m.spectrogram_decoder(f, e)[0].data
    w = m.params["decoder.fc1.weight"].data
    np.testing.assert_allclose(mel1, (f.data + e.data) @ w, atol=1e-13, rtol=0)
    single = m.decode_single_path(f, head=1).data + m.decode_single_path(e, head=1).data
    np.testing.assert_allclose(single, mel1, atol=1e-13, rtol=0)


def test_decoder_shapes_and_zero_input():
    m = tiny()
    mels = m.spectrogram_decoder(rand(0, (5, 8)), rand(1, (5, 8)))
    assert [x.shape for x in mels] == [(5, 4)] * 3
    z = Tensor(np.zeros((5, 8)))
    np.testing.assert_array_equal(m.decode_single_path(z).data, m.decode_single_path(z).data)
    assert m.decode_single_path(z).shape == (5, 4)


def test_decoder_grad_check_all_heads():
    m = tiny(4)
    f, e = rand(7, (4, 8)), rand(8, (4, 8))
    f.requires_grad = e.requires_grad = True

    def g():
        a, b, c = m.spectrogram_decoder(f, e)
        return tn.add(tn.add(weighted(a, 1), weighted(b, 2)), weighted(c, 3))

    assert grad_check_many(g, [f, e] + m.parameters(), n_samples=120, seed=4) < 1e-4


# ------------------------------------------------------------------ full pass


def test_forward_teacher_forced_length():
    m = tiny()
    out = m.forward([1, 2, 3], durations=[2, 3, 1], pitch_hz=[120.0, 0.0, 180.0])
    assert all(x.shape == (6, 4) for x in out.mels)
    assert out.formant_repr.shape == out.excitation_repr.shape == (6, 8)


def test_forward_zero_shift_is_identity():
    m = tiny()
    kw = dict(durations=[2, 3, 1], pitch_hz=[120.0, 0.0, 180.0])
    a = m.forward([1, 2, 3], **kw)
    b = m.forward([1, 2, 3], pitch_shift_semitones=0.0, **kw)
    for x, y in zip(a.mels, b.mels):
        np.testing.assert_array_equal(x.data, y.data)


def test_forward_is_deterministic_across_instances():
    a = tiny(9).forward([4, 1, 2, 2], durations=[1, 2, 2, 1], pitch_hz=[100.0, 130, 0, 90])
    b = tiny(9).forward([4, 1, 2, 2], durations=[1, 2, 2, 1], pitch_hz=[100.0, 130, 0, 90])
    np.testing.assert_array_equal(a.mel3.data, b.mel3.data)
    np.testing.assert_array_equal(a.predicted_pitch.data, b.predicted_pitch.data)


def test_forward_without_ground_truth_uses_predictions():
    m = tiny()
    out = m.forward([1, 2, 3])
    assert out.mel3.shape[0] == out.durations.sum()
    assert (out.durations >= 1).all()


def test_forward_bad_ground_truth_lengths():
    m = tiny()
    with pytest.raises(InputError):
        m.forward([1, 2, 3], durations=[1, 2])
    with pytest.raises(InputError):
        m.forward([1, 2, 3], durations=[1, 2, 1], pitch_hz=[100.0])


def test_forward_unknown_speaker():
    with pytest.raises(InputError):
        tiny().forward([1], speaker_id=1)


def test_forward_attention_rows_are_distributions():
    out = tiny().forward([1, 2, 3, 4], durations=[1, 2, 1, 3], pitch_hz=[100.0, 120, 0, 140],
                         record_attention=True)
    assert len(out.attention) == 6 + 4 + 4 + 2
    for probs in out.attention:
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


def test_end_to_end_grad_check_few_seeds():
    from formant_tts.training import Target, TrainConfig, compute_loss

    for seed in range(3):
        rng = np.random.default_rng(seed)
        m = tiny(seed)
        ids, dur = rng.integers(0, 5, 3), rng.integers(1, 4, 3)
        pitch = rng.uniform(100, 200, 3)
        tgt = Target(rng.normal(size=(dur.sum(), 4)), np.log(dur + 1.0), rng.normal(size=3))
        f = lambda: compute_loss(m.forward(ids, 0, dur, pitch), tgt, TrainConfig()).tensor
        assert grad_check_many(f, m.parameters(), n_samples=30, seed=seed) < 1e-4
