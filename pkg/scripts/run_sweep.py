"""Pitch-shift sweep of one or two trained checkpoints on the default corpus.

    python3 scripts/run_sweep.py runs/desk_ext.ckpt runs/desk_std.ckpt --utterances 16
"""

import argparse

from formant_tts.control import DEFAULT_LAMBDAS, sweep
from formant_tts.data import CorpusConfig, generate_corpus
from formant_tts.training import load_checkpoint


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("checkpoints", nargs="+")
    parser.add_argument("--utterances", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    cfg = CorpusConfig(seed=args.seed)
    corpus = generate_corpus(cfg)[: args.utterances]
    tables = {}
    for path in args.checkpoints:
        model = load_checkpoint(path).model
        tables[path] = {s["lambda"]: s for s in sweep(model, corpus, cfg).summary()}

    header = f"{'lambda':>6} {'ratio':>6}"
    for path in args.checkpoints:
        header += f" | {'FFE%':>7} {'MCD dB':>7} {'f-drift':>7} {'e-drift':>7}"
    print(header)
    for lam in DEFAULT_LAMBDAS:
        line = f"{lam:>+6.0f} {2 ** (lam / 12):>6.3f}"
        for path in args.checkpoints:
            s = tables[path][lam]
            line += (f" | {s['ffe']:>7.2f} {s['mcd']:>7.3f} {s['formant_drift']:>7.4f}"
                     f" {s['excitation_drift']:>7.4f}")
        print(line)
    print("columns per checkpoint:", ", ".join(args.checkpoints))


if __name__ == "__main__":
    main()
