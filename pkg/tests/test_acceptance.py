"""Acceptance criteria, one test each; a summary line per criterion is printed at the end."""

import math
import sys
import time

import numpy as np
import pytest

from formant_tts import selfcheck
from formant_tts.control import DEFAULT_LAMBDAS, render, shift_pitch, sweep, synthesize
from formant_tts.data import F0Track, extract_f0_synthetic, generate_corpus, load_corpus, save_corpus
from formant_tts.metrics import MCD_SCALE, cepstrum_to_mel, ffe, mcd, mel_to_cepstrum
from formant_tts.model import FormantExcitationModel, ModelConfig
from formant_tts.tensor import Tensor
from formant_tts.training import (
    TrainConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
    teacher_forced,
    train,
)

SWEEP_UTTERANCES = 16


def test_criterion_1_gradient_integrity(criterion):
    t0 = time.perf_counter()
    op_worst = {op: max(selfcheck.op_error(op, s) for s in range(100)) for op in selfcheck.OP_NAMES}
    e2e = max(selfcheck.end_to_end_error(s, n_samples=10) for s in range(100))
    seconds = time.perf_counter() - t0
    worst_op = max(op_worst, key=op_worst.get)
    ok = max(op_worst.values()) < 1e-4 and e2e < 1e-4 and seconds < 120.0
    criterion(1, "gradient integrity (ops and end-to-end, 100 seeds, < 2 min)", ok,
              f"worst op {worst_op} {op_worst[worst_op]:.2e}, end-to-end {e2e:.2e}, {seconds:.1f}s")
    assert ok


def test_criterion_2_semitone_ratios(criterion):
    expected = {-8: 0.63, -6: 0.71, -4: 0.79, 4: 1.26, 6: 1.41, 8: 1.59}
    ratio_err = max(abs(shift_pitch([100.0], lam)[0] / 100.0 - r) for lam, r in expected.items())
    f0 = np.array([80.0, 123.4, 399.0])
    octave_err = float(np.max(np.abs(shift_pitch(f0, 12.0) / (2 * f0) - 1)))
    rng = np.random.default_rng(0)
    comp_err = 0.0
    for _ in range(1000):
        a, b = rng.uniform(-24, 24, size=2)
        lhs, rhs = shift_pitch(shift_pitch(f0, a), b), shift_pitch(f0, a + b)
        comp_err = max(comp_err, float(np.max(np.abs(lhs / rhs - 1))))
    ok = ratio_err <= 0.005 and octave_err <= 1e-12 and comp_err <= 1e-12
    criterion(2, "semitone ratios, octave and composition", ok,
              f"ratio {ratio_err:.4f}, octave {octave_err:.1e}, composition {comp_err:.1e}")
    assert ok


def test_criterion_3_query_reduction_and_ablation(criterion, desk_corpus, desk_extended, desk_standard):
    cfg_kw = dict(vocab_size=17, n_mel_bins=16)
    ext = FormantExcitationModel(ModelConfig(**cfg_kw, extended_query=True), seed=4)
    std = FormantExcitationModel(ModelConfig(**cfg_kw, extended_query=False), params=ext.params,
                                 pitch_stats=ext.pitch_stats)
    rng = np.random.default_rng(1)
    h, zero = Tensor(rng.normal(size=(20, 32))), Tensor(np.zeros((20, 32)))
    a, b = ext.run_generators(h, zero), std.run_generators(h, zero)
    mels_a, mels_b = ext.spectrogram_decoder(*a), std.spectrogram_decoder(*b)
    bit_equal = all(np.array_equal(x.data, y.data) for x, y in zip(a + mels_a, b + mels_b))

    _, corpus = desk_corpus
    shapes_equal = all(
        synthesize(desk_extended.model, u, lam).shape == synthesize(desk_standard.model, u, lam).shape
        == u.target_mel.shape for u in corpus[:4] for lam in (-6.0, 0.0, 6.0))
    trained = desk_extended.final_loss < desk_extended.initial_loss and \
        desk_standard.final_loss < desk_standard.initial_loss
    ok = bit_equal and shapes_equal and trained
    criterion(3, "zero pitch addend collapses the query modes; both modes train and synthesize", ok,
              f"bit-equal {bit_equal}, shapes {shapes_equal}, losses "
              f"{desk_extended.final_loss:.3f} / {desk_standard.final_loss:.3f}")
    assert ok


def test_criterion_4_formant_path_independence(criterion, desk_corpus, desk_extended):
    _, corpus = desk_corpus
    model, utt = desk_extended.model, corpus[0]
    reference = teacher_forced(model, utt)
    base, base_excitation = reference.formant_repr.data, reference.excitation_repr.data
    rng = np.random.default_rng(7)
    changed_excitation = 0
    invariant = True
    for _ in range(100):
        pitch = rng.uniform(60.0, 450.0, size=utt.phoneme_ids.size)
        out = model.forward(utt.phoneme_ids, utt.speaker_id, durations=utt.durations, pitch_hz=pitch)
        invariant &= np.array_equal(out.formant_repr.data, base)
        changed_excitation += not np.array_equal(out.excitation_repr.data, base_excitation)
    ok = invariant and changed_excitation == 100
    criterion(4, "formant representation bit-invariant under 100 pitch perturbations", ok,
              f"excitation changed in {changed_excitation}/100")
    assert ok


def test_criterion_5_metric_oracles(criterion):
    ref = F0Track.from_hz([100, 100, 100, 100, 100, 100, 100, 100, 0, 0])
    test = F0Track.from_hz([100, 0, 100, 125, 119, 81, 100, 100, 0, 90])
    ffe_cases = [ffe(ref, test) == 30.0, ffe(ref, ref) == 0.0,
                 ffe(F0Track.from_hz([100.0, 200.0]), F0Track.from_hz([0.0, 0.0])) == 100.0]
    mel = np.random.default_rng(0).normal(size=(9, 16))
    c = np.zeros(16)
    c[1] = 1.0
    single = mcd(cepstrum_to_mel(c, 16), np.zeros((1, 16)))
    single_err = abs(single - MCD_SCALE * math.sqrt(2.0))
    dct_err = float(np.abs(cepstrum_to_mel(mel_to_cepstrum(mel, 15), 16) - mel).max())
    ok = all(ffe_cases) and mcd(mel, mel) == 0.0 and single_err <= 1e-9 and dct_err <= 1e-12
    criterion(5, "metric oracles (FFE cases, MCD self/single-coefficient, DCT round trip)", ok,
              f"single-coefficient MCD {single:.6f} (err {single_err:.1e}), DCT err {dct_err:.1e}")
    assert ok


def test_criterion_6_desk_training(criterion, desk_corpus, desk_extended):
    _, corpus = desk_corpus
    run = desk_extended
    # determinism: an independent run from the same seed reproduces the trajectory prefix
    twin = build_model(ModelConfig(), corpus, seed=0)
    prefix = train(twin, corpus, TrainConfig(max_iterations=100)).log
    deterministic = [e["total"] for e in prefix] == [e["total"] for e in run.log[:100]]
    ratio = run.final_loss / run.initial_loss
    ok = len(run.log) == 2000 and ratio < 0.1 and deterministic and run.seconds < 600.0
    criterion(6, "desk training: loss after 2000 iterations < 10% of initial, deterministic, < 10 min", ok,
              f"{run.initial_loss:.3f} -> {run.final_loss:.4f} (ratio {ratio:.4f}), "
              f"deterministic {deterministic}, {run.seconds:.0f}s")
    assert ok


def test_criterion_7_decomposition_regression(criterion, desk_corpus, desk_extended, desk_standard):
    cfg, corpus = desk_corpus
    subset = corpus[:SWEEP_UTTERANCES]
    ext = {s["lambda"]: s for s in sweep(desk_extended.model, subset, cfg).summary()}
    std = {s["lambda"]: s for s in sweep(desk_standard.model, subset, cfg).summary()}
    drift_ok = all(ext[lam]["formant_drift"] <= 0.5 * ext[lam]["excitation_drift"] for lam in (-4.0, 4.0))
    mcd_ok = all(ext[lam]["mcd"] <= std[lam]["mcd"] for lam in (-8.0, -6.0, 6.0, 8.0))
    for lam in DEFAULT_LAMBDAS:
        print(f"lambda {lam:+.0f}: MCD ext {ext[lam]['mcd']:.3f} plain-query {std[lam]['mcd']:.3f}  "
              f"FFE ext {ext[lam]['ffe']:.2f} plain-query {std[lam]['ffe']:.2f}  "
              f"drift f {ext[lam]['formant_drift']:.4f} e {ext[lam]['excitation_drift']:.4f}")
    detail = ", ".join(f"MCD({lam:+.0f}) {ext[lam]['mcd']:.2f} vs {std[lam]['mcd']:.2f}"
                       for lam in (-8.0, -6.0, 6.0, 8.0))
    detail += f"; drift(+4) f {ext[4.0]['formant_drift']:.3f} e {ext[4.0]['excitation_drift']:.3f}"
    ok = drift_ok and mcd_ok
    criterion(7, "formant drift <= 0.5x excitation drift; extended-query MCD <= plain-query MCD", ok, detail)
    assert ok


def test_criterion_8_extractor_round_trip(criterion, desk_corpus):
    cfg, corpus = desk_corpus
    reference = F0Track.from_hz(np.concatenate([u.frame_f0_hz for u in corpus]))
    extracted = F0Track.from_hz(np.concatenate(
        [extract_f0_synthetic(u.target_mel, cfg).frame_hz for u in corpus]))
    value = ffe(reference, extracted)
    ok = value < 5.0
    criterion(8, "round-trip FFE of the synthetic extractor on oracle mels < 5%", ok, f"FFE {value:.3f}%")
    assert ok


def test_criterion_9_serialization(criterion, tmp_path, desk_corpus, desk_extended):
    cfg, corpus = desk_corpus
    save_corpus(corpus, tmp_path / "c.fpc", cfg)
    loaded, loaded_cfg = load_corpus(tmp_path / "c.fpc")
    corpus_ok = loaded == corpus and loaded_cfg == cfg and generate_corpus(cfg) == loaded

    model = desk_extended.model
    save_checkpoint(model, tmp_path / "m.ckpt", train_config=TrainConfig(), iteration=2000)
    ck = load_checkpoint(tmp_path / "m.ckpt")
    weights_ok = all(np.array_equal(ck.model.params[k].data, p.data) for k, p in model.params.items())
    outputs_ok = True
    for u in corpus[:4]:
        a, b = render(model, u, 4.0, use_gt_pitch=False), render(ck.model, u, 4.0, use_gt_pitch=False)
        outputs_ok &= all(np.array_equal(x.data, y.data) for x, y in zip(a.mels, b.mels))
    ok = corpus_ok and weights_ok and outputs_ok
    criterion(9, "corpus and checkpoint round trips bit-exact, forward outputs identical", ok,
              f"corpus {corpus_ok}, weights {weights_ok}, outputs {outputs_ok}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
