"""Synthetic text-classification tasks for desk-scale runs.

``separable``: every sentence carries three cue words of its class (from
six per class) among shared filler words, so the classes are linearly
separable by word presence. ``graded``: three cues per sentence drawn from
a 32-word lexicon per class plus one filler. Small K leaves many cues
unseen in training, so accuracy rises with K.

Run as ``python -m consprompt.toy OUT_DIR [--task graded]`` to write
train.tsv / test.tsv plus the matching template and verbalizer files.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

LABELS = ("negative", "positive")
LABEL_WORDS = {"negative": "terrible", "positive": "wonderful"}
TEMPLATES = (
    ("t0", "{input} It is {mask}"),
    ("t1", "{input} All in all it was {mask}"),
    ("t2", "In summary {input} so {mask}"),
)

_FILLERS = tuple(f"w{i}" for i in range(40))


def _sentence(rng, cues, n_cues, n_fill):
    words = list(rng.choice(_FILLERS, size=n_fill))
    for cue in rng.choice(cues, size=n_cues):
        words.insert(int(rng.integers(0, len(words) + 1)), str(cue))
    return " ".join(words)


def make_task(kind: str = "separable", n_per_label: int = 200, seed: int = 0) -> list[tuple[str, str]]:
    """Return balanced ``(text, label)`` rows, labels interleaved."""
    rng = np.random.default_rng([seed, 0 if kind == "separable" else 1])
    if kind == "separable":
        cues = {lab: tuple(f"{lab[:3]}{i}" for i in range(6)) for lab in LABELS}
        n_cues, n_fill = 3, 3
    elif kind == "graded":
        cues = {lab: tuple(f"{lab[:3]}{i}" for i in range(32)) for lab in LABELS}
        n_cues, n_fill = 3, 1
    else:
        raise ValueError(f"unknown toy task {kind!r}")
    rows = []
    for _ in range(n_per_label):
        for lab in LABELS:
            rows.append((_sentence(rng, cues[lab], n_cues, n_fill), lab))
    return rows


def write_tsv(rows, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for text, label in rows:
            fh.write(f"{text}\t{label}\n")


def write_task(out_dir, kind: str = "separable", n_train: int = 200, n_test: int = 200, seed: int = 0) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tsv(make_task(kind, n_train, seed), out / "train.tsv")
    write_tsv(make_task(kind, n_test, seed + 10_000), out / "test.tsv")
    with (out / "templates.tsv").open("w", encoding="utf-8") as fh:
        fh.writelines(f"{tid}\t{pat}\n" for tid, pat in TEMPLATES)
    with (out / "verbalizer.tsv").open("w", encoding="utf-8") as fh:
        fh.writelines(f"{lab}\t{LABEL_WORDS[lab]}\n" for lab in LABELS)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description="write a synthetic toy task")
    ap.add_argument("out_dir")
    ap.add_argument("--task", choices=["separable", "graded"], default="separable")
    ap.add_argument("--n-train", type=int, default=200, help="training rows per label")
    ap.add_argument("--n-test", type=int, default=200, help="test rows per label")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    print(write_task(args.out_dir, args.task, args.n_train, args.n_test, args.seed))


if __name__ == "__main__":
    main()
