"""Decomposed formant/excitation text-to-mel network.

Topology: text encoder (FFT blocks) -> duration and pitch predictors ->
pitch embedding -> speaker conditioning -> length regulation -> formant
generator (text only) and excitation generator (text + pitch) -> three-head
spectrogram decoder.  All parameters live in ``FormantExcitationModel.params`` as
float64 :class:`~formant_tts.tensor.Tensor` leaves named ``block.sub.param``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as tn
from .control import shift_pitch
from .data import PitchStats
from .errors import CapacityError, ConfigurationError, DimensionError, InputError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    vocab_size: int = 17
    n_speakers: int = 1
    d_model: int = 32
    n_heads: int = 2
    head_dim: int = 16
    conv_kernel: int = 3
    ff_hidden: int = 64
    n_encoder_blocks: int = 6
    n_generator_blocks: int = 4
    n_decoder_blocks: int = 2
    n_mel_bins: int = 16
    max_frames: int = 512
    extended_query: bool = True
    dropout: float = 0.0
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must equal n_heads*head_dim "
                f"({self.n_heads}*{self.head_dim})")
        if self.conv_kernel % 2 == 0:
            raise ConfigurationError(f"conv_kernel must be odd, got {self.conv_kernel}")
        for name in ("vocab_size", "n_speakers", "d_model", "n_heads", "ff_hidden",
                     "n_encoder_blocks", "n_generator_blocks", "n_mel_bins", "max_frames"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.n_decoder_blocks != 2:
            raise ConfigurationError("the spectrogram decoder has exactly 2 FFT blocks")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    mel1: Tensor
    mel2: Tensor
    mel3: Tensor
    predicted_log_durations: Tensor
    predicted_pitch: Tensor  # speaker-standardized
    predicted_pitch_hz: np.ndarray
    durations: np.ndarray  # frames per phoneme used for regulation
    pitch_hz: np.ndarray  # pitch fed to the embedding, after any shift
    formant_repr: Tensor
    excitation_repr: Tensor
    attention: list[np.ndarray] = field(default_factory=list)

    @property
    def mels(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.mel1, self.mel2, self.mel3


def positional_encoding(T: int, D: int, max_frames: Optional[int] = None) -> np.ndarray:
    """Sinusoidal table: sin at even dims, cos at odd dims."""
    if max_frames is not None and T > max_frames:
        raise CapacityError(f"{T} positions exceed max_frames={max_frames}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    i2 = np.arange(0, D, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / D)
    table = np.zeros((T, D))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : D // 2])
    return table


def length_regulate(x: Tensor, durations: Sequence[int]) -> Tensor:
    """Repeat row ``i`` of ``x`` ``durations[i]`` times; non-positive entries become 1."""
    durations = np.asarray(durations, dtype=np.int64)
    if durations.shape != (x.shape[0],):
        raise DimensionError(f"{durations.shape[0]} durations for {x.shape[0]} rows")
    if (durations < 1).any():
        logger.warning("clamping %d non-positive durations to 1", int((durations < 1).sum()))
        durations = np.maximum(durations, 1)
    index = np.repeat(np.arange(x.shape[0]), durations)
    return tn.gather_rows(x, index)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_weights(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    D, F, K, M = cfg.d_model, cfg.ff_hidden, cfg.conv_kernel, cfg.n_mel_bins
    params: dict[str, np.ndarray] = {}

    def fft(prefix: str) -> None:
        # keys and values carry no bias: a key bias cannot change the softmax
        for n in ("q", "k", "v", "o"):
            params[f"{prefix}.attn.w_{n}"] = _uniform(rng, (D, D), D)
        for n in ("q", "o"):
            params[f"{prefix}.attn.b_{n}"] = _uniform(rng, (D,), D)
        params[f"{prefix}.ln1.gain"] = np.ones(D)
        params[f"{prefix}.ln1.bias"] = np.zeros(D)
        params[f"{prefix}.ff.conv1.kernel"] = _uniform(rng, (K, D, F), K * D)
        params[f"{prefix}.ff.conv1.bias"] = _uniform(rng, (F,), K * D)
        params[f"{prefix}.ff.conv2.kernel"] = _uniform(rng, (K, F, D), K * F)
        params[f"{prefix}.ff.conv2.bias"] = _uniform(rng, (D,), K * F)
        params[f"{prefix}.ln2.gain"] = np.ones(D)
        params[f"{prefix}.ln2.bias"] = np.zeros(D)

    def predictor(prefix: str) -> None:
        for j in (1, 2):
            params[f"{prefix}.conv{j}.kernel"] = _uniform(rng, (K, D, D), K * D)
            params[f"{prefix}.conv{j}.bias"] = _uniform(rng, (D,), K * D)
            params[f"{prefix}.ln{j}.gain"] = np.ones(D)
            params[f"{prefix}.ln{j}.bias"] = np.zeros(D)
        params[f"{prefix}.proj.weight"] = _uniform(rng, (D, 1), D)
        params[f"{prefix}.proj.bias"] = np.zeros(1)

    params["phoneme_embedding"] = rng.normal(0.0, 1.0 / np.sqrt(D), size=(cfg.vocab_size, D))
    params["speaker_embedding"] = rng.normal(0.0, 1.0 / np.sqrt(D), size=(cfg.n_speakers, D))
    for i in range(cfg.n_encoder_blocks):
        fft(f"encoder.{i}")
    predictor("duration_predictor")
    predictor("pitch_predictor")
    params["pitch_embedding.kernel"] = _uniform(rng, (K, 1, D), K)
    params["pitch_embedding.bias"] = _uniform(rng, (D,), K)
    for i in range(cfg.n_generator_blocks):
        fft(f"formant.{i}")
    for i in range(cfg.n_generator_blocks):
        fft(f"excitation.{i}")
    for i in range(cfg.n_decoder_blocks):
        fft(f"decoder.{i}")
    for j in (1, 2, 3):
        params[f"decoder.fc{j}.weight"] = _uniform(rng, (D, M), D)
        params[f"decoder.fc{j}.bias"] = _uniform(rng, (M,), D)
    return {name: tn.parameter(value, name=name) for name, value in params.items()}


class FormantExcitationModel:
    """The decomposed text-to-mel model.

    ``params`` may be shared read-only between instances for parallel
    inference; training mutates them in place.
    """

    def __init__(self, config: ModelConfig, params: Optional[dict[str, Tensor]] = None,
                 pitch_stats: Optional[PitchStats] = None, seed: int = 0):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_weights(config, seed)
        self.pitch_stats = pitch_stats or PitchStats.default(config.n_speakers)
        self.training = False
        self._dropout_rng = np.random.default_rng(seed + 1)

    # ------------------------------------------------------------ building blocks

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _dropout(self, x: Tensor) -> Tensor:
        rate = self.config.dropout
        if not self.training or rate == 0.0:
            return x
        keep = self._dropout_rng.random(x.shape) >= rate
        return tn.mul(x, keep / (1.0 - rate))

    def multi_head_self_attention(self, x: Tensor, prefix: str,
                                  pitch_addend: Optional[Tensor] = None,
                                  trace: Optional[list] = None) -> Tensor:
        """Scaled dot-product self-attention over ``x`` (``[T, D]``).

        With ``pitch_addend`` the query is ``W_Q (x + p) + b_Q`` while keys and
        values still come from ``x``.
        """
        cfg = self.config
        T, D = x.shape
        H, d = cfg.n_heads, cfg.head_dim
        query_in = x
        if pitch_addend is not None:
            if pitch_addend.shape != x.shape:
                raise DimensionError(
                    f"pitch addend {pitch_addend.shape} does not match input {x.shape}")
            query_in = tn.add(x, pitch_addend)
        p = self._p
        q = tn.linear(query_in, p(f"{prefix}.attn.w_q"), p(f"{prefix}.attn.b_q"))
        k = tn.matmul(x, p(f"{prefix}.attn.w_k"))
        v = tn.matmul(x, p(f"{prefix}.attn.w_v"))

        def heads(t: Tensor) -> Tensor:
            return tn.transpose(tn.reshape(t, (T, H, d)), (1, 0, 2))  # [H, T, d]

        qh, kh, vh = heads(q), heads(k), heads(v)
        scores = tn.mul(tn.matmul(qh, tn.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(d))
        probs = tn.softmax(scores, axis=-1)
        if trace is not None:
            trace.append(probs.data)
        ctx = tn.reshape(tn.transpose(tn.matmul(probs, vh), (1, 0, 2)), (T, D))
        return tn.linear(ctx, p(f"{prefix}.attn.w_o"), p(f"{prefix}.attn.b_o"))

    def fft_block(self, x: Tensor, prefix: str, pitch_addend: Optional[Tensor] = None,
                  trace: Optional[list] = None) -> Tensor:
        """Self-attention and conv feed-forward sublayers, each residual + LayerNorm.

        The attention residual is taken from the query stream, so a pitch
        addend reaches the block output directly as well as through the
        attention weights.
        """
        p, eps = self._p, self.config.layer_norm_eps
        stream = x if pitch_addend is None else tn.add(x, pitch_addend)
        attn = self._dropout(self.multi_head_self_attention(x, prefix, pitch_addend, trace))
        y = tn.layer_norm(tn.add(stream, attn), p(f"{prefix}.ln1.gain"), p(f"{prefix}.ln1.bias"), eps)
        hidden = tn.relu(tn.conv1d(y, p(f"{prefix}.ff.conv1.kernel"), p(f"{prefix}.ff.conv1.bias")))
        ff = self._dropout(tn.conv1d(hidden, p(f"{prefix}.ff.conv2.kernel"), p(f"{prefix}.ff.conv2.bias")))
        return tn.layer_norm(tn.add(y, ff), p(f"{prefix}.ln2.gain"), p(f"{prefix}.ln2.bias"), eps)

    def _stack(self, x: Tensor, name: str, count: int, trace=None) -> Tensor:
        for i in range(count):
            x = self.fft_block(x, f"{name}.{i}", trace=trace)
        return x

    # ------------------------------------------------------------ model stages

    def encode_text(self, phoneme_ids: Sequence[int], trace=None) -> Tensor:
        ids = np.asarray(phoneme_ids, dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise InputError("empty phoneme sequence")
        cfg = self.config
        x = tn.embedding_lookup(self._p("phoneme_embedding"), ids)
        x = tn.add(x, positional_encoding(ids.size, cfg.d_model, cfg.max_frames))
        return self._stack(x, "encoder", cfg.n_encoder_blocks, trace)

    def _predictor(self, hidden: Tensor, prefix: str) -> Tensor:
        p, eps = self._p, self.config.layer_norm_eps
        x = hidden
        for j in (1, 2):
            x = tn.relu(tn.conv1d(x, p(f"{prefix}.conv{j}.kernel"), p(f"{prefix}.conv{j}.bias")))
            x = self._dropout(tn.layer_norm(x, p(f"{prefix}.ln{j}.gain"), p(f"{prefix}.ln{j}.bias"), eps))
        out = tn.linear(x, p(f"{prefix}.proj.weight"), p(f"{prefix}.proj.bias"))
        return tn.reshape(out, (hidden.shape[0],))

    def predict_temporal(self, hidden: Tensor) -> tuple[Tensor, Tensor]:
        """Per-phoneme ``log(frames + 1)`` and speaker-standardized pitch."""
        return (self._predictor(hidden, "duration_predictor"),
                self._predictor(hidden, "pitch_predictor"))

    def pitch_to_embedding(self, pitch_standardized) -> Tensor:
        z = tn.as_tensor(pitch_standardized)
        z = tn.reshape(z, (z.data.size, 1))
        return tn.conv1d(z, self._p("pitch_embedding.kernel"), self._p("pitch_embedding.bias"))

    def run_generators(self, h: Tensor, p: Tensor, trace=None) -> tuple[Tensor, Tensor]:
        if h.shape != p.shape:
            raise DimensionError(f"generator inputs differ in shape: {h.shape} vs {p.shape}")
        n = self.config.n_generator_blocks
        formant = self._stack(h, "formant", n, trace)
        if self.config.extended_query:
            e = self.fft_block(h, "excitation.0", pitch_addend=p, trace=trace)
        else:
            e = self.fft_block(tn.add(h, p), "excitation.0", trace=trace)
        for i in range(1, n):
            e = self.fft_block(e, f"excitation.{i}", trace=trace)
        return formant, e

    def spectrogram_decoder(self, formant: Tensor, excitation: Tensor,
                            trace=None) -> tuple[Tensor, Tensor, Tensor]:
        if formant.shape != excitation.shape:
            raise DimensionError(
                f"decoder inputs differ in shape: {formant.shape} vs {excitation.shape}")
        p = self._p
        w1, b1 = p("decoder.fc1.weight"), p("decoder.fc1.bias")
        mel1 = tn.add(tn.linear(formant, w1, b1), tn.linear(excitation, w1, b1))
        s = self.fft_block(tn.add(formant, excitation), "decoder.0", trace=trace)
        mel2 = tn.linear(s, p("decoder.fc2.weight"), p("decoder.fc2.bias"))
        s = self.fft_block(s, "decoder.1", trace=trace)
        mel3 = tn.linear(s, p("decoder.fc3.weight"), p("decoder.fc3.bias"))
        return mel1, mel2, mel3

    def decode_single_path(self, representation: Tensor, head: int = 3) -> Tensor:
        """Decoder output with the other representation replaced by zeros."""
        zeros = Tensor(np.zeros(representation.shape))
        return self.spectrogram_decoder(representation, zeros)[head - 1]

    # ------------------------------------------------------------ full pass

    def durations_from_log(self, log_durations: np.ndarray) -> np.ndarray:
        return np.maximum(np.rint(np.exp(np.asarray(log_durations)) - 1.0), 1).astype(np.int64)

    def forward(self, phoneme_ids: Sequence[int], speaker_id: int = 0,
                durations: Optional[Sequence[int]] = None,
                pitch_hz: Optional[Sequence[float]] = None,
                pitch_shift_semitones: float = 0.0,
                record_attention: bool = False) -> ForwardOutput:
        """Run the whole network.

        ``durations`` / ``pitch_hz`` given means teacher forcing with those
        ground-truth values; otherwise the predictors' outputs are used.  The
        semitone shift is applied in Hz before standardization.
        """
        cfg = self.config
        if not 0 <= speaker_id < cfg.n_speakers:
            raise InputError(f"speaker {speaker_id} outside [0, {cfg.n_speakers})")
        trace: Optional[list] = [] if record_attention else None
        hidden = self.encode_text(phoneme_ids, trace)
        log_dur, pitch_z = self.predict_temporal(hidden)
        predicted_hz = self.pitch_stats.destandardize(pitch_z.data, speaker_id)

        if durations is None:
            used_dur = self.durations_from_log(log_dur.data)
        else:
            used_dur = np.asarray(durations, dtype=np.int64)
            if used_dur.shape != (hidden.shape[0],):
                raise InputError(f"{used_dur.size} durations for {hidden.shape[0]} phonemes")
        source_hz = predicted_hz if pitch_hz is None else np.asarray(pitch_hz, dtype=np.float64)
        if source_hz.shape != (hidden.shape[0],):
            raise InputError(f"{source_hz.size} pitch values for {hidden.shape[0]} phonemes")
        if pitch_hz is None:
            source_hz = np.maximum(source_hz, 1e-3)
        shifted_hz = shift_pitch(source_hz, pitch_shift_semitones)
        pitch_in = self.pitch_stats.standardize(shifted_hz, speaker_id)

        pitch_emb = self.pitch_to_embedding(pitch_in)
        spk = tn.embedding_lookup(self._p("speaker_embedding"), [speaker_id])
        h = length_regulate(tn.add(hidden, spk), used_dur)
        p = length_regulate(tn.add(pitch_emb, spk), used_dur)
        pe = positional_encoding(h.shape[0], cfg.d_model, cfg.max_frames)
        h, p = tn.add(h, pe), tn.add(p, pe)

        formant, excitation = self.run_generators(h, p, trace)
        mel1, mel2, mel3 = self.spectrogram_decoder(formant, excitation, trace)
        return ForwardOutput(
            mel1=mel1, mel2=mel2, mel3=mel3,
            predicted_log_durations=log_dur, predicted_pitch=pitch_z,
            predicted_pitch_hz=predicted_hz, durations=np.maximum(used_dur, 1),
            pitch_hz=shifted_hz, formant_repr=formant, excitation_repr=excitation,
            attention=trace or [],
        )

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())
