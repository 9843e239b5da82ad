"""Greedy decoding and corpus-level BLEU."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Hashable, Sequence

import numpy as np

from . import ndgrad as nd
from .nanoformer import BOS_ID, EOS_ID, PAD_ID, Model

MAX_ORDER = 4


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    matches: list[int]
    totals: list[int]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BleuReport":
        return cls(**json.loads(text))


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence[Hashable]], references: Sequence[Sequence[Hashable]]) -> BleuReport:
    """Single-reference BLEU-4 with corpus-level clipped counts.

    For orders 2-4 a zero match count is smoothed to 1/(total+1); unigram
    precision is never smoothed. ``BP = exp(1 - r/c)`` when ``c < r``.
    Strings are split on whitespace.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("corpus_bleu needs at least one sentence")
    hyps = [h.split() if isinstance(h, str) else list(h) for h in hypotheses]
    refs = [r.split() if isinstance(r, str) else list(r) for r in references]
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    for h, r in zip(hyps, refs):
        for n in range(1, MAX_ORDER + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    precisions = []
    for n in range(MAX_ORDER):
        if n == 0:
            precisions.append(matches[0] / totals[0] if totals[0] else 0.0)
        elif matches[n] == 0:
            precisions.append(1.0 / (totals[n] + 1))
        else:
            precisions.append(matches[n] / totals[n])
    if c == 0:
        bp = 0.0
    else:
        bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    if precisions[0] == 0.0 or bp == 0.0:
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(bleu, precisions, matches, totals, bp, c, r)


def greedy_decode(model: Model, src_ids, max_len: int | None = None, batch_size: int = 256) -> list[list[int]]:
    """Argmax decoding until EOS or ``max_len`` tokens.

    ``src_ids`` is a list of source sentences (without EOS; it is appended
    here, as during training). Ties go to the lowest token id.
    """
    sources = [list(s) for s in src_ids]
    if not sources:
        return []
    cfg = model.config
    limit = cfg.max_len - 1 if max_len is None else min(max_len, cfg.max_len - 1)
    out: list[list[int] | None] = [None] * len(sources)
    order = sorted(range(len(sources)), key=lambda i: (len(sources[i]), i))
    with nd.no_grad():
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            rows = [sources[i] + [EOS_ID] for i in idx]
            width = max(len(r) for r in rows)
            src = np.full((len(rows), width), PAD_ID, dtype=np.int64)
            for k, r in enumerate(rows):
                src[k, : len(r)] = r
            memory, mask = model.encode(src)
            prefix = np.full((len(rows), 1), BOS_ID, dtype=np.int64)
            done = np.zeros(len(rows), dtype=bool)
            for _ in range(limit):
                states = model.decode(memory, mask, prefix)
                logits = model.project(states).data[:, -1, :]
                nxt = np.argmax(logits, axis=-1)
                nxt = np.where(done, PAD_ID, nxt)
                done |= nxt == EOS_ID
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
                if done.all():
                    break
            for k, i in enumerate(idx):
                hyp = []
                for tok in prefix[k, 1:]:
                    if tok in (EOS_ID, PAD_ID):
                        break
                    hyp.append(int(tok))
                out[i] = hyp
    return out


def evaluate_bleu(model: Model, pairs, max_extra: int = 10) -> BleuReport:
    srcs = [s for s, _ in pairs]
    refs = [t for _, t in pairs]
    longest = max(len(r) for r in refs)
    hyps = greedy_decode(model, srcs, max_len=longest + max_extra)
    return corpus_bleu(hyps, refs)


def exact_match_rate(model: Model, pairs) -> float:
    hyps = greedy_decode(model, [s for s, _ in pairs])
    return float(np.mean([h == list(t) for h, (_, t) in zip(hyps, pairs)]))
