"""Train the desk-scale model on the default synthetic corpus and save a checkpoint.

    python3 scripts/train_desk.py --out runs/desk_ext.ckpt
    python3 scripts/train_desk.py --standard-query --out runs/desk_std.ckpt
"""

import argparse
import json
from pathlib import Path

import numpy as np

from formant_tts.data import CorpusConfig, generate_corpus
from formant_tts.model import ModelConfig
from formant_tts.training import TrainConfig, build_model, evaluate, save_checkpoint, train


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs/desk.ckpt")
    parser.add_argument("--iterations", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--standard-query", action="store_true", help="train the plain-query variant")
    args = parser.parse_args()

    corpus = generate_corpus(CorpusConfig(seed=args.seed))
    model = build_model(ModelConfig(extended_query=not args.standard_query), corpus, seed=args.seed)
    cfg = TrainConfig(max_iterations=args.iterations, seed=args.seed)
    before = float(np.mean([b.total for b in evaluate(model, corpus, cfg)]))

    def progress(it, entry):
        if it % 100 == 0:
            print(f"{it:5d}  lr {entry['lr']:.5f}  batch loss {entry['total']:.4f}", flush=True)

    result = train(model, corpus, cfg, callback=progress)
    after = float(np.mean([b.total for b in evaluate(model, corpus, cfg)]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, result.state, cfg, args.iterations,
                    extra={"corpus": CorpusConfig(seed=args.seed).to_dict()})
    summary = {"initial_loss": before, "final_loss": after, "ratio": after / before,
               "seconds": result.seconds, "extended_query": not args.standard_query}
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
