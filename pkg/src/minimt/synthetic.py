"""Synthetic language-pair fixtures.

Two toy "languages" related by a deterministic word bijection plus local
reordering (adjacent swaps), so the whole pipeline can run end to end with
zero external data. Generated corpora are plain one-sentence-per-line text.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

SRC_LANG = "aa"
TGT_LANG = "bb"


def _word_tables(vocab_size: int, seed: int):
    src_words = [f"ka{i}" for i in range(vocab_size)]
    tgt_words = [f"zo{i}" for i in range(vocab_size)]
    perm = np.random.default_rng([seed, 7]).permutation(vocab_size)
    mapping = {src_words[i]: tgt_words[int(perm[i])] for i in range(vocab_size)}
    return src_words, tgt_words, mapping


def _swap_adjacent(tokens):
    out = list(tokens)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def translate_line(line: str, mapping: dict) -> str:
    """The ground-truth transformation: substitute each word, then swap
    adjacent pairs."""
    return " ".join(_swap_adjacent([mapping[w] for w in line.split()]))


def _sentences(rng, words, n, min_len, max_len):
    return [" ".join(rng.choice(words, size=rng.integers(min_len, max_len + 1)))
            for _ in range(n)]


def generate_pair(out_dir, n_parallel: int, n_mono: int, seed: int = 0,
                  vocab_size: int = 24, min_len: int = 3, max_len: int = 8) -> dict:
    """Write parallel and per-language monolingual corpora under ``out_dir``.

    Returns the file paths keyed by role: parallel_src, parallel_tgt, and
    mono_<lang> for both languages.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    src_words, _, mapping = _word_tables(vocab_size, seed)
    rng = np.random.default_rng([seed, 11])

    src_lines = _sentences(rng, src_words, n_parallel, min_len, max_len)
    tgt_lines = [translate_line(line, mapping) for line in src_lines]
    mono_src = _sentences(rng, src_words, n_mono, min_len, max_len)
    mono_tgt = [translate_line(line, mapping)
                for line in _sentences(rng, src_words, n_mono, min_len, max_len)]

    paths = {
        "parallel_src": out / f"parallel.{SRC_LANG}",
        "parallel_tgt": out / f"parallel.{TGT_LANG}",
        f"mono_{SRC_LANG}": out / f"mono.{SRC_LANG}",
        f"mono_{TGT_LANG}": out / f"mono.{TGT_LANG}",
    }
    contents = {
        "parallel_src": src_lines,
        "parallel_tgt": tgt_lines,
        f"mono_{SRC_LANG}": mono_src,
        f"mono_{TGT_LANG}": mono_tgt,
    }
    for key, path in paths.items():
        path.write_text("\n".join(contents[key]) + "\n", encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}
