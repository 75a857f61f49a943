"""Synthetic long-context retrieval tasks over a small symbolic vocabulary.

A sample is a flat token sequence: filler sentences, one needle carrying a
target value, more filler, a query, and the answer tokens at the very end.
``answer_start:answer_end`` is the half-open span of those answer tokens —
training computes CE there, evaluation greedy-decodes the same span from
the prefix and string-matches the target value.

Filler sentences are "the <noun> <verb> <adj> ." with the noun pool split
in half between train and eval, so eval contexts are never seen verbatim
during training.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

TASKS = ("passkey", "niah1", "niah2", "niah3")
POOLS = ("train", "eval")

_DIGITS = [str(d) for d in range(10)]
_LETTERS = [chr(c) for c in range(ord("a"), ord("z") + 1)]
_TEMPLATE = [
    ".", "?", "the", "pass", "key", "is", "remember", "it",
    "what", "special", "magic", "for",
]
_NOUNS = [
    "grass", "sky", "sun", "trees", "rivers", "birds", "rain", "wind",
    "stars", "clouds", "moon", "waves", "stones", "leaves", "fog", "hills",
    "fields", "lakes", "snow", "storms",
]
_VERBS = ["looks", "seems", "stays", "gets"]
_ADJS = [
    "green", "blue", "yellow", "tall", "deep", "quiet", "soft", "cold",
    "bright", "slow", "pale", "loud", "still", "red", "grey", "calm",
    "wide", "dark", "white", "wild",
]
_KEYS = ["door", "box", "gate", "safe", "chest", "vault", "lock", "drawer"]

VOCAB: list[str] = _TEMPLATE + _DIGITS + _LETTERS + _NOUNS + _VERBS + _ADJS + _KEYS
assert len(VOCAB) == len(set(VOCAB)) and len(VOCAB) <= 256
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

_TRAIN_NOUNS = _NOUNS[: len(_NOUNS) // 2]
_EVAL_NOUNS = _NOUNS[len(_NOUNS) // 2 :]
_SENTENCE_LEN = 5  # the <noun> <verb> <adj> .


def ids(words: list[str]) -> list[int]:
    return [TOKEN_ID[w] for w in words]


def detokenize(token_ids) -> str:
    """Ids -> text. Consecutive single-character tokens (digits, letters)
    concatenate without separators so a 5-digit value reads back as one
    word; everything else is space-joined."""
    out: list[str] = []
    prev_char = False
    for t in token_ids:
        w = VOCAB[int(t)]
        is_char = len(w) == 1 and w.isalnum()
        if out and is_char and prev_char:
            out[-1] += w
        else:
            out.append(w)
        prev_char = is_char
    return " ".join(out)


@dataclass(frozen=True)
class SampleRecord:
    tokens: tuple
    answer_start: int
    answer_end: int
    task: str
    target_value: str
    context_len: int
    seed: int

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task {self.task!r} not in {TASKS}")
        if not 1 <= self.answer_start < self.answer_end <= len(self.tokens):
            raise DataError(
                f"answer span [{self.answer_start}, {self.answer_end}) invalid "
                f"for {len(self.tokens)} tokens"
            )


def _filler_sentence(rng: np.random.Generator, pool: str) -> list[str]:
    nouns = _TRAIN_NOUNS if pool == "train" else _EVAL_NOUNS
    return [
        "the",
        nouns[rng.integers(len(nouns))],
        _VERBS[rng.integers(len(_VERBS))],
        _ADJS[rng.integers(len(_ADJS))],
        ".",
    ]


def _assemble(rng, context_len, pool, needle, query, answer, task, target, seed):
    fixed = len(needle) + len(query) + len(answer)
    n_filler = (context_len - fixed) // _SENTENCE_LEN
    if pool not in POOLS:
        raise ConfigError(f"pool {pool!r} not in {POOLS}")
    if n_filler < 1:
        raise ConfigError(
            f"context_len {context_len} too small: needle+query+answer is "
            f"{fixed} tokens and at least one filler sentence must fit"
        )
    pad = context_len - fixed - n_filler * _SENTENCE_LEN  # 0..4 pause tokens
    at = int(rng.integers(0, n_filler + 1))  # needle slot among sentences
    words: list[str] = []
    for i in range(n_filler):
        if i == at:
            words += needle
        words += _filler_sentence(rng, pool)
    if at == n_filler:
        words += needle
    words += ["."] * pad + query + answer
    toks = tuple(ids(words))
    return SampleRecord(
        tokens=toks,
        answer_start=len(toks) - len(answer),
        answer_end=len(toks),
        task=task,
        target_value=target,
        context_len=context_len,
        seed=seed,
    )


def gen_passkey(context_len: int, seed: int, pool: str = "train") -> SampleRecord:
    """Hide a 5-digit pass key at a seed-determined depth; ask for it back.

    Deterministic in (context_len, seed, pool); total length is exactly
    context_len (filler sentences plus up to four pad periods).
    """
    rng = np.random.default_rng(seed)
    digits = [str(rng.integers(1, 10))] + [str(rng.integers(0, 10)) for _ in range(4)]
    # the key is stated twice so the query pattern has two in-context matches
    needle = ["the", "pass", "key", "is", *digits, ".", "remember", "it", ".",
              "the", "pass", "key", "is", *digits, "."]
    query = ["what", "is", "the", "pass", "key", "?", "the", "pass", "key", "is"]
    return _assemble(rng, context_len, pool, needle, query, digits,
                     "passkey", "".join(digits), seed)


def gen_niah(context_len: int, seed: int, variant: int, pool: str = "train") -> SampleRecord:
    """Needle-in-a-haystack: "the special magic <key> is <value>".

    variant 1: value is a single word; 2: a 5-digit number; 3: an 8-symbol
    alphanumeric string.
    """
    if variant not in (1, 2, 3):
        raise ConfigError(f"niah variant must be 1, 2 or 3, got {variant}")
    rng = np.random.default_rng(seed)
    key = _KEYS[rng.integers(len(_KEYS))]
    if variant == 1:
        value = [_ADJS[rng.integers(len(_ADJS))]]
        target = value[0]
    elif variant == 2:
        value = [str(rng.integers(1, 10))] + [str(rng.integers(0, 10)) for _ in range(4)]
        target = "".join(value)
    else:
        alphabet = _DIGITS + _LETTERS
        value = [alphabet[rng.integers(len(alphabet))] for _ in range(8)]
        target = "".join(value)
    needle = ["the", "special", "magic", key, "is", *value, "."]
    query = ["what", "is", "the", "special", "magic", key, "?",
             "the", "special", "magic", key, "is"]
    return _assemble(rng, context_len, pool, needle, query, value,
                     f"niah{variant}", target, seed)


def generate_set(task: str, context_len: int, seeds, pool: str = "train") -> list[SampleRecord]:
    if task == "passkey":
        return [gen_passkey(context_len, s, pool) for s in seeds]
    if task.startswith("niah"):
        return [gen_niah(context_len, s, int(task[-1]), pool) for s in seeds]
    raise ConfigError(f"task {task!r} not in {TASKS}")


def collate(samples: list[SampleRecord]):
    """-> (tokens [B, N], spans [B, 2]); desk tasks are fixed-length, so a
    ragged batch is a data bug, not something to pad over."""
    if not samples:
        raise DataError("empty batch")
    lens = {len(s.tokens) for s in samples}
    if len(lens) != 1:
        raise DataError(f"ragged batch: lengths {sorted(lens)}")
    toks = np.array([s.tokens for s in samples], dtype=np.int64)
    spans = np.array([[s.answer_start, s.answer_end] for s in samples], dtype=np.int64)
    return toks, spans


def needle_depth(sample: SampleRecord) -> float:
    """Fraction of the context preceding the answer value's first token
    inside the needle (0 = very start, 1 = right before the query)."""
    toks = list(sample.tokens)
    n_ans = sample.answer_end - sample.answer_start
    value = toks[sample.answer_start : sample.answer_end]
    for i in range(len(toks) - 2 * n_ans):
        if toks[i : i + n_ans] == value:
            return i / max(sample.answer_start - n_ans, 1)
    raise DataError("needle value not found in context")  # pragma: no cover


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, samples: list[SampleRecord], *, lora=None, mode: str = "chunked",
             batch_size: int = 8) -> dict:
    """Greedy-decode each answer span and exact-match the target value in
    the detokenized output. Returns {"accuracy", "n", "per_sample"}."""
    from .model import generate_greedy

    if not samples:
        raise DataError("evaluate() needs at least one sample")
    results = []
    # group by (prefix length, answer length) so each batch decodes in lockstep
    groups: dict[tuple, list[SampleRecord]] = {}
    for s in samples:
        groups.setdefault((s.answer_start, s.answer_end - s.answer_start), []).append(s)
    for (prefix_len, n_ans), group in sorted(groups.items()):
        for i in range(0, len(group), batch_size):
            chunk = group[i : i + batch_size]
            prefix = np.array([s.tokens[:prefix_len] for s in chunk], dtype=np.int64)
            gen = generate_greedy(model, prefix, n_ans, mode=mode, lora=lora)
            for s, row in zip(chunk, gen):
                text = detokenize(row)
                results.append({
                    "task": s.task,
                    "seed": s.seed,
                    "context_len": s.context_len,
                    "target": s.target_value,
                    "generated": text,
                    "correct": s.target_value in text.split() or s.target_value == text.replace(" ", ""),
                })
    acc = sum(r["correct"] for r in results) / len(results)
    return {"accuracy": acc, "n": len(results), "per_sample": results}


# ---------------------------------------------------------------------------
# JSONL persistence


def dump_samples(path, samples: list[SampleRecord]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            doc = dataclasses.asdict(s)
            doc["tokens"] = list(doc["tokens"])
            fh.write(json.dumps(doc) + "\n")


def load_samples(path) -> list[SampleRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            doc["tokens"] = tuple(doc["tokens"])
            out.append(SampleRecord(**doc))
    return out
