"""Generate the committed k-shift golden vectors with a standalone oracle.

Run from the repo root: python tests/golden/make_vectors.py

Deliberately independent of the package: plain-integer SplitMix64 and
rotation arithmetic only. Lines are "v F k rows idx_0 ... idx_{k-1}".
"""
from pathlib import Path

MASK = 0xFFFFFFFFFFFFFFFF


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK
    return (x ^ (x >> 31)) & MASK


def indices(v, seed, k, rows):
    z = splitmix64((v ^ splitmix64(seed)) & MASK)
    out = []
    for i in range(k):
        rot = z if i == 0 else (((z << i) | (z >> (64 - i))) & MASK)
        out.append(rot % rows)
    return out


def main():
    lines = []
    # spread of ids, seeds, probe counts and table sizes incl. edge cases
    cases = []
    state = 12345
    for n in range(100):
        state = splitmix64(state)
        v = state % (10 ** (1 + n % 7))
        state = splitmix64(state)
        seed = state if n % 3 else n
        k = 1 + (n * 7) % 8
        rows = (1, 2, 1000, 65536, 4093, 2 ** 32, 417053)[n % 7]
        cases.append((v, seed, k, rows))
    cases[0] = (0, 0, 4, 1000)
    cases[1] = (1, 0, 63, 65536)
    cases[2] = (2 ** 63, 7, 2, 1)
    for v, seed, k, rows in cases:
        idx = indices(v, seed, k, rows)
        lines.append(" ".join([str(v), str(seed), str(k), str(rows)] + [str(i) for i in idx]))
    out = Path(__file__).parent / "kshift_vectors.txt"
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} vectors to {out}")


if __name__ == "__main__":
    main()
