"""Parameter-level analysis: Taylor importance, erasure, heatmaps, drift.

Importance of a single weight ``w`` on one training sentence is the
first-order estimate of the loss change from setting ``w`` to zero,
``|dL/dw * w|``. Scores are averaged over sentences with the absolute
value taken per sentence, so sentences that push a weight in opposite
directions do not cancel.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, PngImagePlugin

from . import ndgrad as nd
from .corpusgen import ParallelCorpus, encode_batches, make_batch
from .metrics import evaluate_bleu
from .nanoformer import ConfigError, Model, ParamTag, Sublayer, loss_on_batch, read_container, write_container

DEFAULT_FRACTIONS = tuple(round(0.1 * k, 1) for k in range(11))
NUM_DECILES = 10


@dataclass
class ImportanceMap:
    scores: dict[ParamTag, np.ndarray]
    num_examples: int
    domain: str = "G"

    def __getitem__(self, tag: ParamTag) -> np.ndarray:
        return self.scores[tag]

    def get(self, key: str | ParamTag) -> np.ndarray:
        tag = ParamTag.parse(key) if isinstance(key, str) else key
        if tag not in self.scores:
            raise ConfigError(f"importance map has no entry for {tag}")
        return self.scores[tag]

    def validate(self, model: Model) -> None:
        if self.num_examples < 1:
            raise ValueError("importance map built from zero examples")
        for tag, p in model.named_parameters():
            s = self.scores[tag]
            if s.shape != p.shape:
                raise ValueError(f"importance shape {s.shape} != parameter shape {p.shape} for {tag}")
            if not np.all(np.isfinite(s)) or np.any(s < 0):
                raise ValueError(f"importance for {tag} must be finite and nonnegative")

    def save(self, path, model: Model) -> None:
        """Checkpoint container with ``params`` and ``importance`` sections."""
        write_container(
            path,
            model.config,
            {"params": model.state_dict(), "importance": {t.key(): s for t, s in self.scores.items()}},
            meta={"importance_examples": self.num_examples, "importance_domain": self.domain},
        )

    @classmethod
    def load(cls, path) -> "ImportanceMap":
        _, sections, meta = read_container(path)
        scores = {ParamTag.parse(k): v for k, v in sections["importance"].items()}
        return cls(scores, int(meta["importance_examples"]), meta.get("importance_domain", "G"))


def analysis_matrices(model: Model, keys: Sequence[str] = ()) -> list[ParamTag]:
    """Tags named by ``keys``, or every attention/FFN weight matrix when empty."""
    if keys:
        return [model.tag(k) for k in keys]
    return [
        t for t in model.tags()
        if t.sublayer in (Sublayer.SA, Sublayer.CA, Sublayer.FFN) and model[t].data.ndim == 2
    ]


def _pairs(data) -> list:
    return data.train if isinstance(data, ParallelCorpus) else list(data)


def accumulate_importance(model: Model, corpus, t_limit: int = 2000, domain: str = "G", loss_scale: float = 1.0) -> ImportanceMap:
    """Per-weight Taylor importance averaged over the first ``t_limit`` sentences.

    Each sentence is its own batch. ``loss_scale`` multiplies the loss
    before differentiation (used to check scale covariance).
    """
    if t_limit < 1:
        raise ConfigError(f"t_limit must be >= 1, got {t_limit}")
    pairs = _pairs(corpus)[:t_limit]
    if not pairs:
        raise ConfigError("importance needs at least one sentence")
    tags = model.tags()
    sums = {t: np.zeros_like(model[t].data) for t in tags}
    saved = {t: model[t].requires_grad for t in tags}
    try:
        for t in tags:
            model[t].requires_grad = True
        for idx, pair in enumerate(pairs):
            model.zero_grad()
            loss = loss_on_batch(model, make_batch([pair]))
            if loss_scale != 1.0:
                loss = nd.mul(loss, loss_scale)
            nd.backward(loss)
            for t in tags:
                p = model[t]
                if not np.all(np.isfinite(p.grad)):
                    raise FloatingPointError(f"non-finite gradient for {t} at sentence {idx}")
                sums[t] += np.abs(p.grad * p.data)
    finally:
        for t in tags:
            model[t].requires_grad = saved[t]
            model[t].zero_grad()
    n = len(pairs)
    return ImportanceMap({t: s / n for t, s in sums.items()}, n, domain)


def batch_loss(model: Model, pairs, batch_size: int = 256) -> float:
    """Token-weighted mean loss over ``pairs`` without recording a graph."""
    total, count = 0.0, 0
    with nd.no_grad():
        for b in encode_batches(pairs, batch_size):
            k = b.num_target_tokens
            total += loss_on_batch(model, b).item() * k
            count += k
    return total / count


def brute_force_delta(model: Model, tag: ParamTag | str, flat_indices: Sequence[int], pairs) -> np.ndarray:
    """``|L(w_i = 0) - L|`` on ``pairs`` for each listed flat index."""
    p = model[tag]
    base = batch_loss(model, pairs)
    flat = p.data.reshape(-1)
    out = np.empty(len(flat_indices))
    for k, i in enumerate(flat_indices):
        old = flat[i]
        flat[i] = 0.0
        try:
            out[k] = abs(batch_loss(model, pairs) - base)
        finally:
            flat[i] = old
    return out


# ------------------------------------------------------------------- erasure


def ranked_indices(scores: np.ndarray, ordering: str) -> np.ndarray:
    """Flat indices ordered for erasure; ties broken by flat index."""
    flat = scores.reshape(-1)
    idx = np.arange(flat.size)
    if ordering == "descending":
        return np.lexsort((idx, -flat))
    if ordering == "ascending":
        return np.lexsort((idx, flat))
    raise ConfigError(f"ordering must be 'descending' or 'ascending', got {ordering!r}")


def erasure_mask(scores: np.ndarray, ordering: str, fraction: float) -> np.ndarray:
    """Boolean mask of the ``floor(fraction * K)`` weights erased first."""
    k = int(np.floor(round(fraction * scores.size, 9)))
    mask = np.zeros(scores.size, dtype=bool)
    mask[ranked_indices(scores, ordering)[:k]] = True
    return mask.reshape(scores.shape)


@dataclass
class ErasureCurve:
    matrix: str
    ordering: str
    fractions: list[float]
    bleu: list[float]
    loss: list[float]
    eval_set: str = "test"

    def mean_bleu(self, lo: float = 0.1, hi: float = 0.9) -> float:
        vals = [b for f, b in zip(self.fractions, self.bleu) if lo - 1e-9 <= f <= hi + 1e-9]
        return float(np.mean(vals))


def erase_and_eval(
    model: Model,
    importance: ImportanceMap,
    matrix_tag: ParamTag | str,
    ordering: str,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    test_set=(),
    eval_set: str = "test",
) -> ErasureCurve:
    """Zero a growing share of one matrix, most/least important first.

    Works on a private copy; the input model is not modified.
    """
    tag = model.tag(matrix_tag) if isinstance(matrix_tag, str) else matrix_tag
    if tag not in model.params:
        raise ConfigError(f"unknown parameter tag {tag}")
    fr = [float(f) for f in fractions]
    if not fr or fr[0] != 0.0 or any(b <= a for a, b in zip(fr, fr[1:])) or fr[-1] > 1.0:
        raise ConfigError("fractions must increase strictly from 0 and stay within [0, 1]")
    scores = importance.get(tag)
    pairs = _pairs(test_set)
    work = model.copy()
    original = model[tag].data.copy()
    bleu, loss = [], []
    for f in fr:
        data = original.copy()
        data[erasure_mask(scores, ordering, f)] = 0.0
        work[tag].data = data
        bleu.append(evaluate_bleu(work, pairs).bleu)
        loss.append(batch_loss(work, pairs))
    return ErasureCurve(tag.key(), ordering, fr, bleu, loss, eval_set)


def curves_to_csv(curves: Sequence[ErasureCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["matrix", "ordering", "fraction", "bleu", "loss"])
    for c in curves:
        for f, b, l in zip(c.fractions, c.bleu, c.loss):
            w.writerow([c.matrix, c.ordering, repr(f), repr(b), repr(l)])
    return buf.getvalue()


# ------------------------------------------------------------------ heatmaps


def heatmap_pixels(scores: np.ndarray) -> np.ndarray:
    """Min-max scaled 8-bit gray levels; lighter means more important.

    A constant matrix maps to mid-gray (0.5 before quantisation).
    """
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    lo, hi = s.min(), s.max()
    if hi > lo:
        norm = (s - lo) / (hi - lo)
    else:
        norm = np.full(s.shape, 0.5)
    return np.rint(norm * 255.0).astype(np.uint8)


def export_heatmap(
    importance: ImportanceMap, matrix_tag: ParamTag | str, path, metadata: dict[str, str] | None = None
) -> tuple[Path, Path]:
    """Write ``<path>.png`` (one pixel per weight) and ``<path>.csv`` (raw scores).

    ``metadata`` goes into PNG text chunks and ``# key=value`` CSV header lines.
    """
    tag = ParamTag.parse(matrix_tag) if isinstance(matrix_tag, str) else matrix_tag
    scores = importance.get(tag)
    base = Path(path)
    if base.suffix in (".png", ".csv"):
        base = base.with_suffix("")
    png, csv_path = base.with_name(base.name + ".png"), base.with_name(base.name + ".csv")
    info = PngImagePlugin.PngInfo()
    header = ""
    for k, v in sorted((metadata or {}).items()):
        info.add_text(k, str(v))
        header += f"# {k}={v}\n"
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(heatmap_pixels(scores), mode="L").save(png, format="PNG", pnginfo=info)
        rows = np.atleast_2d(scores)
        csv_path.write_text(header + "\n".join(",".join(repr(float(x)) for x in r) for r in rows) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing heatmap for {tag} to {base}: {exc}") from exc
    return png, csv_path


def read_heatmap_csv(path) -> np.ndarray:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line and not line.startswith("#")]
    return np.array([[float(x) for x in r] for r in rows])


def map_correlation(a: np.ndarray, b: np.ndarray) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(a.reshape(-1), b.reshape(-1)).statistic)


# --------------------------------------------------------------------- drift


def decile_groups(scores: np.ndarray, n_groups: int = NUM_DECILES) -> list[np.ndarray]:
    """Flat indices split into ``n_groups`` near-equal groups, most important first."""
    order = ranked_indices(scores, "descending")
    return np.array_split(order, n_groups)


@dataclass
class DriftReport:
    intervals: list[str]
    distances: list[float]
    num_modules: int
    per_module: dict[str, list[float]] = field(default_factory=dict)
    group_sizes: dict[str, list[int]] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["interval", "mean_distance"])
        for iv, d in zip(self.intervals, self.distances):
            w.writerow([iv, repr(d)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def _interval_labels(n: int) -> list[str]:
    step = 100 // n
    labels = [f"[{k * step}%,{(k + 1) * step}%)" for k in range(n)]
    labels[-1] = labels[-1][:-1] + "]"
    return labels


def decile_drift(model_g: Model, model_i: Model, importance_g: ImportanceMap, min_size: int = NUM_DECILES) -> DriftReport:
    """Mean absolute parameter change per importance decile.

    Within each module (parameter tensor with at least ``min_size``
    elements) weights are ranked by general-domain importance and split
    into ten groups; per-group mean ``|w_G - w_I|`` is then averaged over
    modules.
    """
    if model_g.config.to_dict() != model_i.config.to_dict():
        raise ValueError("decile_drift: models have different configurations")
    per_module: dict[str, list[float]] = {}
    sizes: dict[str, list[int]] = {}
    for tag, pg in model_g.named_parameters():
        if pg.size < min_size:
            continue
        diff = np.abs(pg.data - model_i[tag].data).reshape(-1)
        groups = decile_groups(importance_g[tag])
        per_module[tag.key()] = [float(diff[g].mean()) for g in groups]
        sizes[tag.key()] = [int(g.size) for g in groups]
    table = np.array(list(per_module.values()))
    return DriftReport(
        intervals=_interval_labels(NUM_DECILES),
        distances=table.mean(axis=0).tolist(),
        num_modules=len(per_module),
        per_module=per_module,
        group_sizes=sizes,
    )
