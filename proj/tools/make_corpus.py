"""Writes the synthetic toy corpus used by the n-gram denoiser examples."""
import random
import sys

VOCAB = 24


def main(path: str, lines: int = 400, seed: int = 7) -> None:
    rng = random.Random(seed)
    # Sparse transition structure: each token has three preferred successors.
    succ = {t: rng.sample(range(VOCAB), 3) for t in range(VOCAB)}
    with open(path, "w") as f:
        for _ in range(lines):
            tok = rng.randrange(VOCAB)
            seq = [tok]
            for _ in range(rng.randint(12, 40) - 1):
                tok = rng.choice(succ[tok]) if rng.random() < 0.9 else rng.randrange(VOCAB)
                seq.append(tok)
            f.write(" ".join(map(str, seq)) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/toy_corpus.txt")
