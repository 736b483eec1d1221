"""Synthetic task corpora.

Two families:

* instruction_proxy — templated string transformations (copy / reverse /
  uppercase), scored with Rouge-L.
* math_proxy — single-digit modular arithmetic "a{op}b%m" whose reference
  carries the answer behind the "=" delimiter, scored with exact match.

Prompts are unique across the whole corpus, so train/valid/test splits
never share a prompt. Generation is deterministic in the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Vocab

TASKS = ("instruction_proxy", "math_proxy")

# payloads draw from a small closed word list so tiny models can learn the
# spellings and concentrate on the transformation itself
PAYLOAD_WORDS = ("aba", "bid", "cage", "dig", "echo", "fade", "gap", "hide",
                 "ice", "jig", "ace", "bog", "chip", "dab", "ebb", "fig",
                 "gob", "hat", "imp", "jab")

_LOWER = "".join(sorted(set("".join(PAYLOAD_WORDS)) | set("copyrevuper")))
INSTRUCTION_CHARS = _LOWER + _LOWER.upper() + " :"
MATH_CHARS = "0123456789+*%= "

ANSWER_DELIMITER = "="


@dataclass(frozen=True)
class CorpusExample:
    id: str
    prompt: str
    reference: str


def vocab_for_task(task: str) -> Vocab:
    if task == "instruction_proxy":
        return Vocab(INSTRUCTION_CHARS)
    if task == "math_proxy":
        return Vocab(MATH_CHARS)
    raise ValueError(f"unknown task {task!r}")


def _instruction_examples(size: int, rng: np.random.Generator) -> list[CorpusExample]:
    ops = ("copy", "rev", "upper")
    seen = set()
    out = []
    while len(out) < size:
        op = ops[rng.integers(len(ops))]
        n_words = int(rng.integers(1, 4))
        words = [PAYLOAD_WORDS[i] for i in rng.integers(0, len(PAYLOAD_WORDS), size=n_words)]
        payload = " ".join(words)
        prompt = f"{op}: {payload}"
        if prompt in seen:
            continue
        seen.add(prompt)
        if op == "copy":
            ref = payload
        elif op == "rev":
            ref = " ".join(reversed(words))
        else:
            ref = payload.upper()
        out.append(CorpusExample(id=f"if{len(out):05d}", prompt=prompt, reference=ref))
    return out


def _math_examples(size: int, rng: np.random.Generator) -> list[CorpusExample]:
    combos = [(a, op, b, m) for a in range(10) for op in "+*" for b in range(10)
              for m in range(2, 10)]
    if size > len(combos):
        raise ValueError(f"math_proxy supports at most {len(combos)} unique prompts")
    idx = rng.permutation(len(combos))[:size]
    out = []
    for j, i in enumerate(idx):
        a, op, b, m = combos[i]
        value = (a + b) % m if op == "+" else (a * b) % m
        out.append(CorpusExample(id=f"ma{j:05d}", prompt=f"{a}{op}{b}%{m}",
                                 reference=f"= {value}"))
    return out


def gen_corpus(task: str, size: int, seed: int) -> dict[str, list[CorpusExample]]:
    """Deterministic 80/10/10 split (remainder goes to train)."""
    if size < 30:
        raise ValueError("corpus size must be at least 30")
    rng = np.random.default_rng(seed)
    if task == "instruction_proxy":
        examples = _instruction_examples(size, rng)
    elif task == "math_proxy":
        examples = _math_examples(size, rng)
    else:
        raise ValueError(f"unknown task {task!r}")
    n_valid = size // 10
    n_test = size // 10
    n_train = size - n_valid - n_test
    return {
        "train": examples[:n_train],
        "valid": examples[n_train:n_train + n_valid],
        "test": examples[n_train + n_valid:],
    }


def write_split(examples: list[CorpusExample], path):
    with open(path, "w") as f:
        for ex in examples:
            f.write(json.dumps({"id": ex.id, "prompt": ex.prompt,
                                "reference": ex.reference}, sort_keys=True) + "\n")


def read_split(path) -> list[CorpusExample]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out.append(CorpusExample(d["id"], d["prompt"], d["reference"]))
    return out


def write_corpus(splits: dict[str, list[CorpusExample]], outdir) -> dict[str, str]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, examples in splits.items():
        p = outdir / f"{name}.jsonl"
        write_split(examples, p)
        paths[name] = str(p)
    return paths


def encode_example(ex: CorpusExample, vocab: Vocab) -> tuple[list[int], list[int]]:
    """(prompt ids, reference ids with terminal EOS)."""
    from .model import EOS_ID

    return vocab.encode(ex.prompt), vocab.encode(ex.reference) + [EOS_ID]
