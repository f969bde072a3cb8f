"""Regenerate the committed toy dataset under data/toy/.

A deterministic word-mapped, order-reversed language pair: each source word
maps character-wise (a..j -> n..w) and the word order is reversed, so the
model must use attention but can learn the task from a few hundred pairs.
"""

import pathlib

import numpy as np

OUT = pathlib.Path(__file__).resolve().parent.parent / "data" / "toy"
SRC_CHARS = "abcdefghij"
TGT_CHARS = "nopqrstuvw"
MAP = {s: t for s, t in zip(SRC_CHARS, TGT_CHARS)}


def translate_word(word: str) -> str:
    return "".join(MAP[c] for c in word)


def main():
    rng = np.random.default_rng(20170707)
    lexicon = []
    seen = set()
    while len(lexicon) < 40:
        n = int(rng.integers(3, 7))
        word = "".join(SRC_CHARS[int(i)] for i in rng.integers(0, 10, size=n))
        if word not in seen:
            seen.add(word)
            lexicon.append(word)

    def sentence():
        n = int(rng.integers(3, 9))
        words = [lexicon[int(i)] for i in rng.integers(0, len(lexicon), size=n)]
        return words, [translate_word(w) for w in reversed(words)]

    OUT.mkdir(parents=True, exist_ok=True)
    sets = {"train": 300, "dev": 50}
    for name, count in sets.items():
        src_lines, tgt_lines = [], []
        for _ in range(count):
            s, t = sentence()
            src_lines.append(" ".join(s))
            tgt_lines.append(" ".join(t))
        (OUT / f"{name}.src").write_text("\n".join(src_lines) + "\n")
        (OUT / f"{name}.tgt").write_text("\n".join(tgt_lines) + "\n")

    mono = []
    for _ in range(150):
        _, t = sentence()
        mono.append(" ".join(t))
    (OUT / "mono.tgt").write_text("\n".join(mono) + "\n")
    print(f"wrote toy dataset under {OUT}")


if __name__ == "__main__":
    main()
