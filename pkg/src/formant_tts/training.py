"""Training objective, Adam with step-halving schedule, loop and checkpoints."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import container
from . import tensor as tn
from .data import PhonemeUtterance, PitchStats, compute_pitch_stats
from .errors import ConfigurationError, ContractError, LoadError, NumericError
from .model import FormantExcitationModel, ForwardOutput, ModelConfig, init_weights
from .tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FTTSCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.1
    batch_size: int = 4
    initial_lr: float = 0.005
    halving_interval: int = 500
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    adam_eps: float = 1e-6
    max_iterations: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigurationError("alpha and beta must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.initial_lr <= 0 or self.halving_interval < 1:
            raise ConfigurationError("initial_lr and halving_interval must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigurationError("Adam betas must lie in [0, 1) and eps must be positive")
        if self.max_iterations < 0:
            raise ConfigurationError("max_iterations must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    spec_losses: tuple[float, float, float]  # unnormalised squared-error sums
    pitch_loss: float
    duration_loss: float
    total: float
    n_frames: int
    n_mel_bins: int
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def reconstruct_total(self, alpha: float, beta: float) -> float:
        return (sum(self.spec_losses) / (self.n_frames * self.n_mel_bins)
                + alpha * self.pitch_loss + beta * self.duration_loss)

    def as_dict(self) -> dict:
        return {"spec": list(self.spec_losses), "pitch": self.pitch_loss,
                "duration": self.duration_loss, "total": self.total}


@dataclass
class Target:
    mel: np.ndarray
    log_durations: np.ndarray
    pitch: np.ndarray  # speaker-standardized

    @classmethod
    def from_utterance(cls, utt: PhonemeUtterance, stats: PitchStats) -> "Target":
        return cls(utt.target_mel, utt.log_durations,
                   stats.standardize(utt.phoneme_pitch_hz, utt.speaker_id))


def compute_loss(output: ForwardOutput, target: Target, cfg: TrainConfig) -> LossBreakdown:
    mel = np.asarray(target.mel, dtype=np.float64)
    for i, m in enumerate(output.mels, 1):
        if m.shape != mel.shape:
            raise ContractError(f"mel{i} has shape {m.shape}, target has {mel.shape}")
    N = output.predicted_pitch.shape[0]
    if np.shape(target.pitch) != (N,) or np.shape(target.log_durations) != (N,):
        raise ContractError(f"pitch/duration targets must have length {N}")
    T, M = mel.shape
    spec = [tn.tsum(tn.square(tn.sub(m, mel))) for m in output.mels]
    pitch = tn.mean(tn.square(tn.sub(output.predicted_pitch, target.pitch)))
    dur = tn.mean(tn.square(tn.sub(output.predicted_log_durations, target.log_durations)))
    total = tn.add(tn.mul(tn.add(tn.add(spec[0], spec[1]), spec[2]), 1.0 / (T * M)),
                   tn.add(tn.mul(pitch, cfg.alpha), tn.mul(dur, cfg.beta)))
    return LossBreakdown(tuple(s.item() for s in spec), pitch.item(), dur.item(),
                         total.item(), T, M, tensor=total)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    return cfg.initial_lr * 0.5 ** (iteration // cfg.halving_interval)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """In-place Adam update with bias correction; a missing grad counts as zero."""
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else 0.0
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def batch_indices(iteration: int, n_items: int, batch_size: int, seed: int) -> np.ndarray:
    """Items for one iteration of a stream of per-epoch seeded permutations.

    Depends only on its arguments, so a resumed run sees the same batches as
    an uninterrupted one.
    """
    start = iteration * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n_items)
        perm = np.random.default_rng([seed, epoch]).permutation(n_items)
        take = min(batch_size - len(out), n_items - offset)
        out.extend(perm[offset:offset + take].tolist())
    return np.asarray(out)


def teacher_forced(model: FormantExcitationModel, utt: PhonemeUtterance) -> ForwardOutput:
    return model.forward(utt.phoneme_ids, utt.speaker_id,
                         durations=utt.durations, pitch_hz=utt.phoneme_pitch_hz)


def evaluate(model: FormantExcitationModel, dataset: Sequence[PhonemeUtterance],
             cfg: TrainConfig) -> list[LossBreakdown]:
    with tn.no_grad():
        return [compute_loss(teacher_forced(model, u),
                             Target.from_utterance(u, model.pitch_stats), cfg)
                for u in dataset]


@dataclass
class TrainResult:
    log: list[dict]
    state: OptimizerState
    iterations: int
    seconds: float


def build_model(config: ModelConfig, dataset: Sequence[PhonemeUtterance], seed: int = 0) -> FormantExcitationModel:
    """Fresh model with pitch statistics taken from ``dataset``."""
    return FormantExcitationModel(config, pitch_stats=compute_pitch_stats(dataset, config.n_speakers),
                                  seed=seed)


def train(model: FormantExcitationModel, dataset: Sequence[PhonemeUtterance], cfg: TrainConfig,
          state: Optional[OptimizerState] = None, start_iteration: int = 0,
          callback: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """Mini-batch training with per-utterance gradient accumulation.

    Each log entry holds the batch-mean loss components at that iteration,
    measured before the update.
    """
    if len(dataset) == 0:
        raise ContractError("training set is empty")
    state = state or OptimizerState.zeros_like(model.params)
    targets = [Target.from_utterance(u, model.pitch_stats) for u in dataset]
    log = []
    t0 = time.perf_counter()
    model.training = True
    try:
        for it in range(start_iteration, cfg.max_iterations):
            model.zero_grad()
            batch = batch_indices(it, len(dataset), cfg.batch_size, cfg.seed)
            parts = []
            for k in batch:
                loss = compute_loss(teacher_forced(model, dataset[k]), targets[k], cfg)
                if not np.isfinite(loss.total):
                    raise NumericError(f"non-finite loss at iteration {it}")
                tn.backward(tn.mul(loss.tensor, 1.0 / len(batch)))
                parts.append(loss)
            entry = {
                "iteration": it,
                "lr": lr_at(it, cfg),
                "total": float(np.mean([p.total for p in parts])),
                "spec": [float(np.mean([p.spec_losses[i] / (p.n_frames * p.n_mel_bins)
                                        for p in parts])) for i in range(3)],
                "pitch": float(np.mean([p.pitch_loss for p in parts])),
                "duration": float(np.mean([p.duration_loss for p in parts])),
            }
            adam_step(model.params, state, entry["lr"], cfg)
            log.append(entry)
            if callback is not None:
                callback(it, entry)
    finally:
        model.training = False
        model.zero_grad()
    return TrainResult(log, state, cfg.max_iterations, time.perf_counter() - t0)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: FormantExcitationModel
    state: Optional[OptimizerState]
    train_config: Optional[TrainConfig]
    iteration: int
    extra: dict


def save_checkpoint(model: FormantExcitationModel, path, state: Optional[OptimizerState] = None,
                    train_config: Optional[TrainConfig] = None, iteration: int = 0,
                    extra: Optional[dict] = None) -> None:
    header = {
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "iteration": iteration,
        "adam_step": state.step if state else None,
        "extra": extra or {},
    }
    records = [(f"param/{k}", p.data) for k, p in model.params.items()]
    records += [("pitch_stats/mean", model.pitch_stats.mean), ("pitch_stats/std", model.pitch_stats.std)]
    if state is not None:
        records += [(f"adam_m/{k}", a) for k, a in state.m.items()]
        records += [(f"adam_v/{k}", a) for k, a in state.v.items()]
    container.write(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, records)


def load_checkpoint(path) -> Checkpoint:
    header, records = container.read(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    try:
        config = ModelConfig(**header["model_config"])
    except (KeyError, TypeError) as exc:
        raise LoadError(f"checkpoint header has no usable model_config: {exc}") from exc
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "pitch_stats": {}, "adam_m": {}, "adam_v": {}}
    for name, arr in records:
        group, _, key = name.partition("/")
        if group not in groups:
            raise LoadError(f"unexpected record {name!r}")
        groups[group][key] = arr.copy()
    expected = {k: t.shape for k, t in init_weights(config).items()}
    found = {k: a.shape for k, a in groups["param"].items()}
    if found != expected:
        missing = sorted(set(expected) - set(found)) or sorted(k for k in found if found[k] != expected.get(k))
        raise LoadError(f"checkpoint parameters do not match the model config (e.g. {missing[:3]})")
    params = {k: tn.parameter(groups["param"][k], name=k) for k in expected}
    try:
        stats = PitchStats(groups["pitch_stats"]["mean"], groups["pitch_stats"]["std"])
    except KeyError as exc:
        raise LoadError("checkpoint lacks pitch statistics") from exc
    model = FormantExcitationModel(config, params=params, pitch_stats=stats)
    state = None
    if header.get("adam_step") is not None:
        state = OptimizerState(groups["adam_m"], groups["adam_v"], int(header["adam_step"]))
    tc = TrainConfig(**header["train_config"]) if header.get("train_config") else None
    return Checkpoint(model, state, tc, int(header.get("iteration", 0)), header.get("extra", {}))
