"""Synthetic parallel "domains" for continual-training experiments.

A domain translates a source sentence by mapping every word through a
lexicon and then reordering the result. Two domains of one experiment
share a core lexicon, own disjoint tail lexicons, and may use different
reorder rules, so switching domains shifts both vocabulary and structure.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import yaml

from .nanoformer import BOS_ID, EOS_ID, PAD_ID, ConfigError

NUM_RESERVED = 3
REORDER_RULES = ("identity", "reverse", "rotate", "swap-adjacent")


@dataclass(frozen=True)
class Vocab:
    """Token tables shared by both domains (reserved ids first)."""

    src_words: tuple[str, ...]
    tgt_words: tuple[str, ...]

    @property
    def src_size(self) -> int:
        return NUM_RESERVED + len(self.src_words)

    @property
    def tgt_size(self) -> int:
        return NUM_RESERVED + len(self.tgt_words)

    def src_token(self, i: int) -> str:
        return _RESERVED[i] if i < NUM_RESERVED else self.src_words[i - NUM_RESERVED]

    def tgt_token(self, i: int) -> str:
        return _RESERVED[i] if i < NUM_RESERVED else self.tgt_words[i - NUM_RESERVED]


_RESERVED = ("<pad>", "<s>", "</s>")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    vocab_core_size: int
    vocab_tail_size: int
    # source id -> target id; core entries first, then this domain's tail
    lexicon: tuple[tuple[int, int], ...]
    reorder: str = "identity"
    rotate_k: int = 1
    min_len: int = 4
    max_len: int = 12
    seed: int = 0
    vocab: Vocab = field(repr=False, default=None)

    @property
    def core(self) -> tuple[tuple[int, int], ...]:
        return self.lexicon[: self.vocab_core_size]

    @property
    def tail(self) -> tuple[tuple[int, int], ...]:
        return self.lexicon[self.vocab_core_size :]

    @property
    def source_ids(self) -> np.ndarray:
        return np.array([s for s, _ in self.lexicon], dtype=np.int64)

    def translate(self, src: Sequence[int]) -> list[int]:
        table = dict(self.lexicon)
        return reorder([table[s] for s in src], self.reorder, self.rotate_k)

    def to_config_block(self) -> str:
        """Human-readable provenance block (YAML)."""
        d = {
            "name": self.name,
            "vocab_core_size": self.vocab_core_size,
            "vocab_tail_size": self.vocab_tail_size,
            "reorder": self.reorder,
            "rotate_k": self.rotate_k,
            "length": {"min": self.min_len, "max": self.max_len, "distribution": "uniform"},
            "seed": self.seed,
            "lexicon": {self.vocab.src_token(s): self.vocab.tgt_token(t) for s, t in self.lexicon},
        }
        return yaml.safe_dump(d, sort_keys=False)


def reorder(tokens: Sequence[int], rule: str, k: int = 1) -> list[int]:
    toks = list(tokens)
    if rule == "identity":
        return toks
    if rule == "reverse":
        return toks[::-1]
    if rule == "rotate":
        if not toks:
            return toks
        k %= len(toks)
        return toks[k:] + toks[:k]
    if rule == "swap-adjacent":
        out = toks[:]
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out
    raise ConfigError(f"unknown reorder rule {rule!r}; expected one of {REORDER_RULES}")


def make_domain_pair(
    shared_seed: int = 0,
    overlap: float = 0.7,
    vocab_size: int = 200,
    *,
    reorder_g: str = "identity",
    reorder_i: str = "reverse",
    rotate_k: int = 1,
    min_len: int = 4,
    max_len: int = 12,
) -> tuple[DomainSpec, DomainSpec]:
    """General (G) and in-domain (I) specs sharing ``overlap`` of the lexicon.

    Each domain uses ``vocab_size`` source words: ``round(overlap *
    vocab_size)`` shared core words plus its own tail. The token tables hold
    every word of both domains, with the I tail absent from G's data.
    """
    if not 0.0 <= overlap <= 1.0:
        raise ConfigError(f"overlap must lie in [0, 1], got {overlap}")
    if vocab_size < 1:
        raise ConfigError(f"vocab_size must be >= 1, got {vocab_size}")
    if not 1 <= min_len <= max_len:
        raise ConfigError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    for rule in (reorder_g, reorder_i):
        reorder([], rule)
    core = int(round(overlap * vocab_size))
    tail = vocab_size - core
    n_words = core + 2 * tail
    vocab = Vocab(
        src_words=tuple(f"s{i:03d}" for i in range(n_words)),
        tgt_words=tuple(f"t{i:03d}" for i in range(n_words)),
    )
    rng = np.random.default_rng(shared_seed)
    perm = rng.permutation(n_words) + NUM_RESERVED
    src_ids = np.arange(n_words) + NUM_RESERVED
    mapping = list(zip(src_ids.tolist(), perm.tolist()))
    lex_g = tuple(mapping[:core] + mapping[core : core + tail])
    lex_i = tuple(mapping[:core] + mapping[core + tail :])
    common = dict(vocab_core_size=core, vocab_tail_size=tail, rotate_k=rotate_k,
                  min_len=min_len, max_len=max_len, vocab=vocab)
    g = DomainSpec("G", lexicon=lex_g, reorder=reorder_g, seed=shared_seed, **common)
    i = DomainSpec("I", lexicon=lex_i, reorder=reorder_i, seed=shared_seed + 1, **common)
    return g, i


@dataclass
class ParallelCorpus:
    domain: DomainSpec
    train: list[tuple[list[int], list[int]]]
    dev: list[tuple[list[int], list[int]]] = field(default_factory=list)
    test: list[tuple[list[int], list[int]]] = field(default_factory=list)

    @property
    def vocab(self) -> Vocab:
        return self.domain.vocab

    @property
    def split_sizes(self) -> dict[str, int]:
        return {"train": len(self.train), "dev": len(self.dev), "test": len(self.test)}

    def split(self, name: str) -> list[tuple[list[int], list[int]]]:
        if name not in ("train", "dev", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    def dump(self, path, split: str = "train") -> None:
        """One pair per line: space-joined source tab space-joined target."""
        v = self.vocab
        lines = [
            " ".join(v.src_token(t) for t in s) + "\t" + " ".join(v.tgt_token(t) for t in y)
            for s, y in self.split(split)
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_pairs(path, vocab: Vocab) -> list[tuple[list[int], list[int]]]:
    src_index = {w: i + NUM_RESERVED for i, w in enumerate(vocab.src_words)}
    tgt_index = {w: i + NUM_RESERVED for i, w in enumerate(vocab.tgt_words)}
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        s, t = line.split("\t")
        pairs.append(([src_index[w] for w in s.split()], [tgt_index[w] for w in t.split()]))
    return pairs


def sample_corpus(spec: DomainSpec, n: int, seed: int, n_dev: int = 0, n_test: int = 0) -> ParallelCorpus:
    """Draw ``n`` training pairs plus dev/test pairs with distinct sources.

    Lengths are uniform on ``[spec.min_len, spec.max_len]`` and words are
    uniform over the domain's lexicon.
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    total = n + n_dev + n_test
    rng = np.random.default_rng([seed, spec.seed])
    words = spec.source_ids
    n_distinct = sum(len(words) ** L for L in range(spec.min_len, spec.max_len + 1))
    if n_distinct < total:
        raise ConfigError(f"cannot draw {total} distinct sentences from this domain")
    seen: set[tuple[int, ...]] = set()
    sources: list[list[int]] = []
    while len(sources) < total:
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        s = tuple(words[rng.integers(0, len(words), size=length)].tolist())
        if s in seen:
            continue
        seen.add(s)
        sources.append(list(s))
    pairs = [(s, spec.translate(s)) for s in sources]
    return ParallelCorpus(spec, pairs[:n], pairs[n : n + n_dev], pairs[n + n_dev :])


@dataclass
class Batch:
    src: np.ndarray       # (B, J+1) source ids + EOS, PAD right
    tgt_in: np.ndarray    # (B, I+1) BOS + target
    tgt_out: np.ndarray   # (B, I+1) target + EOS
    index: np.ndarray     # positions of the rows in the originating pair list

    def __len__(self) -> int:
        return self.src.shape[0]

    @property
    def num_target_tokens(self) -> int:
        return int((self.tgt_out != PAD_ID).sum())


def _pad(rows: list[list[int]], pad_id: int) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def make_batch(pairs, index=None, pad_id: int = PAD_ID, bos_id: int = BOS_ID, eos_id: int = EOS_ID) -> Batch:
    pairs = list(pairs)
    return Batch(
        src=_pad([list(s) + [eos_id] for s, _ in pairs], pad_id),
        tgt_in=_pad([[bos_id] + list(t) for _, t in pairs], pad_id),
        tgt_out=_pad([list(t) + [eos_id] for _, t in pairs], pad_id),
        index=np.arange(len(pairs)) if index is None else np.asarray(index),
    )


def encode_batches(
    pairs,
    batch_size: int,
    *,
    pad_id: int = PAD_ID,
    bos_id: int = BOS_ID,
    eos_id: int = EOS_ID,
    src_vocab: int | None = None,
    tgt_vocab: int | None = None,
    shuffle_seed: int | None = None,
) -> list[Batch]:
    """Length-bucketed teacher-forcing batches.

    Pairs are sorted by (source length, target length, original index) and
    cut into chunks of ``batch_size``; with ``shuffle_seed`` the chunk order
    is permuted deterministically.
    """
    if isinstance(pairs, ParallelCorpus):
        pairs = pairs.train
    pairs = list(pairs)
    reserved = {pad_id, bos_id, eos_id}
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    for s, t in pairs:
        if src_vocab is not None and any(x >= src_vocab for x in s):
            raise ConfigError(f"source id exceeds vocabulary of {src_vocab}")
        if tgt_vocab is not None and any(x >= tgt_vocab for x in t):
            raise ConfigError(f"target id exceeds vocabulary of {tgt_vocab}")
        if reserved.intersection(s) or reserved.intersection(t):
            raise ConfigError("reserved ids inside sentence content")
    order = sorted(range(len(pairs)), key=lambda i: (len(pairs[i][0]), len(pairs[i][1]), i))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if shuffle_seed is not None:
        perm = np.random.default_rng(shuffle_seed).permutation(len(chunks))
        chunks = [chunks[i] for i in perm]
    return [make_batch([pairs[i] for i in c], c, pad_id, bos_id, eos_id) for c in chunks]


def decode_batch(batch: Batch, eos_id: int = EOS_ID, pad_id: int = PAD_ID) -> list[tuple[list[int], list[int]]]:
    """Inverse of :func:`make_batch`, in the batch's row order."""

    def strip(row, lead=0):
        out = []
        for x in row[lead:]:
            if x in (eos_id, pad_id):
                break
            out.append(int(x))
        return out

    return [(strip(s), strip(t, 1)) for s, t in zip(batch.src, batch.tgt_in)]


def iter_tokens(pairs) -> Iterator[int]:
    for s, t in pairs:
        yield from s
        yield from t


def spec_to_dict(spec: DomainSpec) -> dict:
    d = dataclasses.asdict(spec)
    d.pop("vocab", None)
    d["lexicon"] = [list(p) for p in spec.lexicon]
    return d
