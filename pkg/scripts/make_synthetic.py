"""Regenerate the bundled synthetic corpus under data/.

Deterministic: train from seed 1 (50 sentences), dev from seed 2 (16),
test from seed 3 (16). Rerunning reproduces the checked-in files byte
for byte."""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ntrr import synthetic
from ntrr.data import write_conll

SPLITS = [("train", 50, 1), ("dev", 16, 2), ("test", 16, 3)]


def main():
    out_dir = os.path.join(os.path.dirname(__file__), "..", "data")
    os.makedirs(out_dir, exist_ok=True)
    for name, n, seed in SPLITS:
        corpus = synthetic.generate_corpus(n, seed=seed)
        path = os.path.join(out_dir, f"{name}.bmes")
        write_conll(path, corpus.sentences)
        tokens = sum(len(t) for t, _ in corpus.sentences)
        print(f"{path}: {n} sentences, {tokens} tokens (seed {seed})")


if __name__ == "__main__":
    main()
