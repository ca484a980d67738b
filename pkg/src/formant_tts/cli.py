"""Command-line entry point: ``formant-tts {gen-data,train,eval,sweep,selfcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import selfcheck
from .control import DEFAULT_LAMBDAS, sweep
from .data import (
    CorpusConfig,
    F0Track,
    extract_f0_synthetic,
    generate_corpus,
    load_corpus,
    save_corpus,
    split_corpus,
)
from .errors import ConfigurationError, FormantTTSError, LoadError, NumericError
from .metrics import ffe, mcd
from .model import ModelConfig
from .training import (
    OptimizerState,
    TrainConfig,
    build_model,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    teacher_forced,
    train,
)

logger = logging.getLogger("formant_tts")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REPORT_SCHEMA_VERSION = 1

SWEEP_REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "pitch-shift sweep report",
    "type": "object",
    "required": ["schema_version", "command", "checkpoint", "corpus", "split", "lambdas", "summary", "rows"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "command": {"const": "sweep"},
        "checkpoint": {"type": "string"},
        "corpus": {"type": "string"},
        "split": {"enum": ["all", "train", "test"]},
        "lambdas": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "summary": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["lambda", "ratio", "ffe", "mcd", "formant_drift", "excitation_drift", "n"],
                "properties": {
                    "lambda": {"type": "number"},
                    "ratio": {"type": "number", "exclusiveMinimum": 0},
                    "ffe": {"type": "number", "minimum": 0, "maximum": 100},
                    "mcd": {"type": "number", "minimum": 0},
                    "formant_drift": {"type": "number", "minimum": 0},
                    "excitation_drift": {"type": "number", "minimum": 0},
                    "n": {"type": "integer", "minimum": 1},
                },
            },
        },
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["utterance", "lambda", "ffe", "mcd", "formant_drift", "excitation_drift"],
                "properties": {
                    "utterance": {"type": "integer", "minimum": 0},
                    "lambda": {"type": "number"},
                    "ffe": {"type": "number", "minimum": 0, "maximum": 100},
                    "mcd": {"type": "number", "minimum": 0},
                    "formant_drift": {"type": "number", "minimum": 0},
                    "excitation_drift": {"type": "number", "minimum": 0},
                    "mel_dump": {"type": ["string", "null"]},
                },
            },
        },
    },
}


class UsageError(FormantTTSError):
    pass


# ---------------------------------------------------------------- configuration


@dataclass
class RunConfig:
    """Everything a command needs, serializable as one JSON document."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    test_fraction: float = 0.125
    model_seed: int = 0

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "corpus": self.corpus.to_dict(), "test_fraction": self.test_fraction,
                "model_seed": self.model_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"model", "train", "corpus", "test_fraction", "model_seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(model=ModelConfig(**d.get("model", {})), train=TrainConfig(**d.get("train", {})),
                       corpus=CorpusConfig(**d.get("corpus", {})),
                       test_fraction=float(d.get("test_fraction", 0.125)),
                       model_seed=int(d.get("model_seed", 0)))
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` (or top-level ``key=value``) assignments."""
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        node = raw
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {key}: {part!r} is not a section")
        node[leaf] = _parse_value(value)
    return raw


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw = RunConfig().to_dict()
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise LoadError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {args.config} is not valid JSON: {exc}") from exc
        for section, values in loaded.items():
            if isinstance(values, dict) and isinstance(raw.get(section), dict):
                raw[section].update(values)
            else:
                raw[section] = values
    apply_overrides(raw, getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        raw["corpus"]["seed"] = raw["train"]["seed"] = raw["model_seed"] = args.seed
    cfg = RunConfig.from_dict(raw)
    if not 0.0 <= cfg.test_fraction < 1.0:
        raise ConfigurationError("test_fraction must lie in [0, 1)")
    return cfg


def _select(corpus, cfg: RunConfig, split: str):
    if split == "all":
        return list(corpus)
    train_part, test_part = split_corpus(corpus, cfg.test_fraction, seed=cfg.corpus.seed)
    return train_part if split == "train" else test_part


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    logger.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    corpus = generate_corpus(cfg.corpus)
    out = Path(args.out or "corpus.fpc")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out, cfg.corpus)
    print(f"wrote {len(corpus)} utterances to {out}")
    return EXIT_OK


def _model_config_for(cfg: RunConfig, corpus_cfg: CorpusConfig) -> ModelConfig:
    # vocabulary, mel and speaker sizes always follow the corpus actually loaded
    d = cfg.model.to_dict()
    d.update(vocab_size=corpus_cfg.model_vocab_size, n_mel_bins=corpus_cfg.n_mel_bins,
             n_speakers=corpus_cfg.n_speakers)
    return ModelConfig(**d)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    corpus, corpus_cfg = load_corpus(args.corpus)
    if corpus_cfg is not None:
        cfg.corpus = corpus_cfg
    train_set = _select(corpus, cfg, "train")
    state: Optional[OptimizerState] = None
    start = 0
    if args.resume:
        ck = load_checkpoint(args.resume)
        model, state, start = ck.model, ck.state, ck.iteration
        if ck.train_config is not None and not (args.config or args.set):
            cfg.train = ck.train_config
        if args.seed is not None:
            cfg.train.seed = args.seed
    else:
        model = build_model(_model_config_for(cfg, cfg.corpus), train_set, seed=cfg.model_seed)
    logger.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))

    out = Path(args.out or "model.ckpt")
    log_path = out.with_suffix(out.suffix + ".log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    mode = "a" if args.resume else "w"
    with log_path.open(mode) as log_file:
        def record(it, entry):
            log_file.write(json.dumps(entry) + "\n")
            if it % max(1, args.log_every) == 0:
                print(f"iter {it:5d}  lr {entry['lr']:.5f}  loss {entry['total']:.4f}", flush=True)

        result = train(model, train_set, cfg.train, state=state, start_iteration=start, callback=record)
    save_checkpoint(model, out, result.state, cfg.train, cfg.train.max_iterations,
                    extra={"run_config": cfg.to_dict(), "corpus": str(args.corpus)})
    if result.log:
        print(f"trained {len(result.log)} iterations in {result.seconds:.1f}s; "
              f"loss {result.log[0]['total']:.4f} -> {result.log[-1]['total']:.4f}")
    print(f"wrote {out} and {log_path}")
    return EXIT_OK


def _load_for_eval(args):
    ck = load_checkpoint(args.checkpoint)
    corpus, corpus_cfg = load_corpus(args.corpus)
    cfg = RunConfig.from_dict(ck.extra["run_config"]) if "run_config" in ck.extra else resolve_config(args)
    if corpus_cfg is not None:
        cfg.corpus = corpus_cfg
    subset = _select(corpus, cfg, args.split)
    if not subset:
        raise LoadError(f"the {args.split!r} split of {args.corpus} is empty")
    return ck, cfg, subset


def evaluation_report(model, subset, cfg: RunConfig) -> dict:
    losses = evaluate(model, subset, cfg.train)
    rows = []
    for i, (utt, loss) in enumerate(zip(subset, losses)):
        mel = teacher_forced(model, utt).mel3.data
        rows.append({
            "utterance": i, **loss.as_dict(),
            "mcd": mcd(mel, utt.target_mel),
            "ffe": ffe(F0Track.from_hz(utt.frame_f0_hz), extract_f0_synthetic(mel, cfg.corpus)),
        })
    keys = ("total", "pitch", "duration", "mcd", "ffe")
    return {"schema_version": REPORT_SCHEMA_VERSION, "command": "eval", "n": len(rows),
            "mean": {k: float(np.mean([r[k] for r in rows])) for k in keys}, "rows": rows}


def cmd_eval(args) -> int:
    ck, cfg, subset = _load_for_eval(args)
    report = evaluation_report(ck.model, subset, cfg)
    report.update(checkpoint=str(args.checkpoint), corpus=str(args.corpus), split=args.split)
    mean = report["mean"]
    print(f"{args.split} split, {report['n']} utterances: loss {mean['total']:.4f}  "
          f"MCD {mean['mcd']:.3f} dB  FFE {mean['ffe']:.2f}%")
    if args.out:
        _write_json(Path(args.out), report)
    return EXIT_OK


def parse_lambdas(text: Optional[str]) -> list[float]:
    if not text:
        return list(DEFAULT_LAMBDAS)
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--lambda expects a comma-separated list of numbers, got {text!r}") from exc
    if not values:
        raise UsageError("--lambda is empty")
    return values


def write_pgm(path: Path, mel: np.ndarray) -> None:
    """8-bit binary PGM, one column per frame, low bins at the bottom."""
    img = np.asarray(mel, dtype=np.float64).T[::-1]
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    pixels = np.rint(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def text_table(summary: list[dict]) -> str:
    cols = [("lambda", "{:+.1f}"), ("ratio", "{:.3f}"), ("ffe", "{:.2f}"), ("mcd", "{:.3f}"),
            ("formant_drift", "{:.4f}"), ("excitation_drift", "{:.4f}"), ("n", "{:d}")]
    cells = [[name for name, _ in cols]] + [[fmt.format(row[name]) for name, fmt in cols] for row in summary]
    widths = [max(len(r[i]) for r in cells) for i in range(len(cols))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells) + "\n"


def cmd_sweep(args) -> int:
    lambdas = parse_lambdas(args.lambdas)
    ck, cfg, subset = _load_for_eval(args)
    if args.limit:
        subset = subset[: args.limit]
    result = sweep(ck.model, subset, cfg.corpus, lambdas)
    out = Path(args.out or "sweep")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in result.rows:
        dump = None
        if r.utterance < args.dump_mels:
            dump = f"mels/utt{r.utterance:03d}_lambda{r.semitones:+g}.pgm"
            (out / "mels").mkdir(exist_ok=True)
            write_pgm(out / dump, r.mel)
        rows.append({"utterance": r.utterance, "lambda": r.semitones, "ffe": r.ffe, "mcd": r.mcd,
                     "formant_drift": r.formant_drift, "excitation_drift": r.excitation_drift,
                     "mel_dump": dump})
    summary = result.summary()
    report = {"schema_version": REPORT_SCHEMA_VERSION, "command": "sweep",
              "checkpoint": str(args.checkpoint), "corpus": str(args.corpus), "split": args.split,
              "lambdas": lambdas, "summary": summary, "rows": rows}
    _write_json(out / "report.json", report)
    table = text_table(summary)
    (out / "report.txt").write_text(table)
    print(table, end="")
    print(f"wrote {out / 'report.json'}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    report = selfcheck.run(n_seeds=args.seeds, inject_fault=args.inject_fault)
    for op, err in report.op_errors.items():
        print(f"grad  {op:22s} max rel err {err:.3e}")
    print(f"grad  {'end_to_end':22s} max rel err {report.end_to_end_error:.3e}")
    for name, err in report.metric_errors.items():
        print(f"metric {name:21s} abs err {err:.3e}")
    print(f"{'PASS' if report.passed else 'FAIL'} in {report.seconds:.1f}s")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="formant-tts", description=__doc__)
    parser.add_argument("--dump-defaults", action="store_true",
                        help="print the default run configuration as JSON and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    def common(p, seed=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.max_iterations=100")
        if seed:
            p.add_argument("--seed", type=int, help="seed for corpus, model and batching")
        p.add_argument("--out", help="output path")

    p = sub.add_parser("gen-data", help="generate and save a synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a saved corpus")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("eval", cmd_eval, "teacher-forced loss and metrics"),
                                  ("sweep", cmd_sweep, "pitch-shift sweep report")):
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--split", choices=["all", "train", "test"], default="test")
        if name == "sweep":
            p.add_argument("--lambda", dest="lambdas", help="comma list of semitone shifts")
            p.add_argument("--limit", type=int, default=0, help="only the first N utterances")
            p.add_argument("--dump-mels", type=int, default=1,
                           help="write PGM images for the first N utterances")
        p.set_defaults(func=func)

    p = sub.add_parser("selfcheck", help="gradient checks and metric oracles")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.dump_defaults:
        print(json.dumps(RunConfig().to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormantTTSError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
