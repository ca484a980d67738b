"""Gradient and metric checks shared by the test suite and the ``selfcheck`` command."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .data import F0Track, PitchStats
from .metrics import MCD_SCALE, cepstrum_to_mel, ffe, mcd, mel_to_cepstrum
from .model import FormantExcitationModel, ModelConfig
from .tensor import Tensor, grad_check, grad_check_many

GRAD_TOLERANCE = 1e-4
TINY_MODEL = dict(vocab_size=5, d_model=8, n_heads=2, head_dim=4, ff_hidden=8, n_mel_bins=4, max_frames=64)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """One case per differentiable primitive: a function of one tensor plus its input."""
    a = rng.normal(size=(3, 4))
    r4, r34, r42 = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
    g4, b4 = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    r232 = Tensor(rng.normal(size=(2, 3, 2)))
    kern, kb = Tensor(rng.normal(size=(3, 4, 2))), Tensor(rng.normal(size=2))
    relu_in = a.copy()
    relu_in[np.abs(relu_in) < 1e-3] += 0.01  # keep probes off the kink
    return {
        "add_broadcast": (lambda t: tn.add(t, r4), a),
        "add_bias_grad": (lambda t: tn.add(Tensor(a), t), rng.normal(size=4)),
        "sub": (lambda t: tn.sub(r34, t), rng.normal(size=(3, 4))),
        "mul": (lambda t: tn.mul(t, r34), a),
        "square": (tn.square, a),
        "relu": (tn.relu, relu_in),
        "reshape_transpose": (lambda t: tn.transpose(tn.reshape(t, (2, 3, 2)), (1, 0, 2)), a),
        "mean_axis": (lambda t: tn.mean(t, 0), a),
        "matmul_left": (lambda t: tn.matmul(t, r42), a),
        "matmul_right": (lambda t: tn.matmul(r34, t), rng.normal(size=(4, 2))),
        "matmul_batched": (lambda t: tn.matmul(t, r232), rng.normal(size=(2, 2, 3))),
        "softmax": (lambda t: tn.softmax(t, -1), a),
        "layer_norm_x": (lambda t: tn.layer_norm(t, g4, b4), a),
        "layer_norm_gain_bias": (lambda t: tn.layer_norm(Tensor(a), t, t), rng.normal(size=4)),
        "conv1d_x": (lambda t: tn.conv1d(t, kern, kb), a),
        "conv1d_kernel": (lambda t: tn.conv1d(Tensor(a), t, kb), rng.normal(size=(3, 4, 2))),
        "conv1d_bias": (lambda t: tn.conv1d(Tensor(a), kern, t), rng.normal(size=2)),
        "embedding": (lambda t: tn.embedding_lookup(t, [2, 0, 2]), a),
    }


OP_NAMES = tuple(sorted(op_cases(np.random.default_rng(0))))


def _faulty_square(a: Tensor) -> Tensor:
    # deliberately wrong backward (factor 3 instead of 2) for exercising the checker
    return tn._make("faulty_square", a.data * a.data, (a,), lambda g: (3.0 * a.data * g,))


def scalarize(out: Tensor, seed: int) -> Tensor:
    """Fixed random weighted sum, so every output element contributes differently."""
    w = np.random.default_rng(seed + 1000).normal(size=out.shape)
    return tn.tsum(tn.mul(out, w))


def op_error(op: str, seed: int, inject_fault: bool = False) -> float:
    f, x0 = op_cases(np.random.default_rng(seed))[op]
    if inject_fault and op == "square":
        f = _faulty_square
    x = Tensor(np.array(x0))
    return grad_check(lambda t: scalarize(f(t), seed), x)


def end_to_end_error(seed: int, n_samples: int = 10) -> float:
    """Loss gradient of a tiny model (3 phonemes, D=8, 2 heads, M=4) on sampled coordinates."""
    from .training import Target, TrainConfig, compute_loss

    rng = np.random.default_rng(seed)
    model = FormantExcitationModel(ModelConfig(**TINY_MODEL), seed=seed,
                                   pitch_stats=PitchStats(np.array([150.0]), np.array([30.0])))
    ids, dur = rng.integers(0, 5, 3), rng.integers(1, 4, 3)
    pitch = rng.uniform(100, 200, 3)
    target = Target(rng.normal(size=(dur.sum(), 4)), np.log(dur + 1.0), rng.normal(size=3))
    cfg = TrainConfig()
    f = lambda: compute_loss(model.forward(ids, 0, dur, pitch), target, cfg).tensor
    return grad_check_many(f, model.parameters(), n_samples=n_samples, seed=seed)


def metric_oracles() -> dict[str, float]:
    """Absolute deviation of each metric from its closed-form value."""
    ref = F0Track.from_hz([100, 100, 100, 100, 100, 100, 100, 100, 0, 0])
    test = F0Track.from_hz([100, 0, 100, 125, 119, 81, 100, 100, 0, 90])
    c = np.zeros(16)
    c[1] = 1.0
    mel = np.random.default_rng(0).normal(size=(5, 16))
    return {
        "ffe_hand_case": abs(ffe(ref, test) - 30.0),
        "mcd_self": mcd(mel, mel),
        "mcd_single_coefficient": abs(mcd(cepstrum_to_mel(c, 16), np.zeros((1, 16))) - MCD_SCALE * math.sqrt(2)),
        "dct_round_trip": float(np.abs(cepstrum_to_mel(mel_to_cepstrum(mel, 15), 16) - mel).max()),
    }


METRIC_TOLERANCES = {"ffe_hand_case": 0.0, "mcd_self": 0.0, "mcd_single_coefficient": 1e-9,
                     "dct_round_trip": 1e-12}


@dataclass
class SelfCheckReport:
    op_errors: dict[str, float] = field(default_factory=dict)
    end_to_end_error: float = 0.0
    metric_errors: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return (max(self.op_errors.values(), default=0.0) < GRAD_TOLERANCE
                and self.end_to_end_error < GRAD_TOLERANCE
                and all(self.metric_errors[k] <= METRIC_TOLERANCES[k] for k in self.metric_errors))


def run(n_seeds: int = 100, n_samples: int = 10, inject_fault: bool = False) -> SelfCheckReport:
    t0 = time.perf_counter()
    report = SelfCheckReport()
    for op in OP_NAMES:
        report.op_errors[op] = max(op_error(op, s, inject_fault) for s in range(n_seeds))
    report.end_to_end_error = max(end_to_end_error(s, n_samples) for s in range(n_seeds))
    report.metric_errors = metric_oracles()
    report.seconds = time.perf_counter() - t0
    return report
