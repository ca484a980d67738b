"""FFE of the synthetic pitch extractor against the generating pitch, per corpus seed."""

import argparse

import numpy as np

from formant_tts.data import CorpusConfig, F0Track, extract_f0_synthetic, generate_corpus
from formant_tts.metrics import ffe


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", type=int, default=5)
    args = parser.parse_args()
    for seed in range(args.seeds):
        cfg = CorpusConfig(seed=seed)
        corpus = generate_corpus(cfg)
        ref = F0Track.from_hz(np.concatenate([u.frame_f0_hz for u in corpus]))
        got = F0Track.from_hz(np.concatenate([extract_f0_synthetic(u.target_mel, cfg).frame_hz
                                              for u in corpus]))
        print(f"seed {seed}: {len(ref)} frames, voiced {ref.voiced.mean():.2%}, FFE {ffe(ref, got):.3f}%")


if __name__ == "__main__":
    main()
