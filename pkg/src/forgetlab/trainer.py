"""General-domain training, continual training and module strategy sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import ndgrad as nd
from .corpusgen import ParallelCorpus, encode_batches
from .metrics import evaluate_bleu
from .nanoformer import (
    ConfigError,
    Grouping,
    Model,
    ParamTag,
    enumerate_groups,
    load_checkpoint,
    loss_on_batch,
    resolve_group,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainOpts:
    epochs: int = 5
    lr: float = 3e-4
    batch_size: int = 64
    eval_each: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    # domain whose dev BLEU picks the retained best checkpoint
    select_on: str | None = None

    def validate(self) -> "TrainOpts":
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.eval_each < 1:
            raise ConfigError("batch_size and eval_each must be >= 1")
        return self


class Adam:
    """Adam over an explicit parameter list (excluded tensors get no state)."""

    def __init__(self, params: Iterable[nd.Tensor], lr=3e-4, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass(frozen=True)
class FreezeSpec:
    """Which tags the optimizer may touch during continual training.

    ``mode`` is ``none`` (everything trains), ``freeze_only`` (the listed
    tags are frozen) or ``update_only`` (only the listed tags train).
    """

    mode: str = "none"
    tags: frozenset = frozenset()
    group: str | None = None

    @classmethod
    def from_group(cls, model: Model, mode: str, group: str, attach_ln: bool = True) -> "FreezeSpec":
        return cls(mode, resolve_group(model, group, attach_ln), group)

    def trainable(self, model: Model) -> list[ParamTag]:
        if self.mode not in ("none", "freeze_only", "update_only"):
            raise ConfigError(f"unknown freeze mode {self.mode!r}")
        if self.mode == "none":
            return model.tags()
        if not self.tags:
            raise ConfigError(f"{self.mode} needs a non-empty tag set")
        known = set(model.tags())
        missing = [str(t) for t in self.tags if t not in known]
        if missing:
            raise ConfigError(f"tags not in model: {missing}")
        if self.mode == "freeze_only":
            return [t for t in model.tags() if t not in self.tags]
        return [t for t in model.tags() if t in self.tags]

    def describe(self) -> str:
        return self.mode if self.mode == "none" else f"{self.mode}({self.group or len(self.tags)})"


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    dev_loss: dict[str, float] = field(default_factory=dict)
    dev_bleu: dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0


@dataclass
class TrainLog:
    strategy: str
    opts: dict
    records: list[EpochRecord] = field(default_factory=list)
    initial: EpochRecord | None = None
    best_epoch: int | None = None
    best_state: dict | None = field(default=None, repr=False)

    def domains(self) -> list[str]:
        seen: list[str] = []
        for r in ([self.initial] if self.initial else []) + self.records:
            for d in r.dev_bleu:
                if d not in seen:
                    seen.append(d)
        return seen

    def to_csv(self, include_wall_time: bool = False) -> str:
        doms = self.domains()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["phase", "epoch", "train_loss"]
        head += [f"dev_loss_{d}" for d in doms] + [f"bleu_{d}" for d in doms]
        if include_wall_time:
            head.append("wall_time")
        w.writerow(head)
        for r in self.records:
            row = [r.phase, r.epoch, repr(r.train_loss)]
            row += [repr(r.dev_loss[d]) if d in r.dev_loss else "" for d in doms]
            row += [repr(r.dev_bleu[d]) if d in r.dev_bleu else "" for d in doms]
            if include_wall_time:
                row.append(f"{r.wall_time:.3f}")
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self, include_wall_time: bool = False) -> dict:
        def rec(r):
            d = asdict(r)
            if not include_wall_time:
                d.pop("wall_time")
            return d

        return {
            "strategy": self.strategy,
            "opts": self.opts,
            "initial": rec(self.initial) if self.initial else None,
            "records": [rec(r) for r in self.records],
            "best_epoch": self.best_epoch,
        }

    def to_json(self, include_wall_time: bool = False) -> str:
        return json.dumps(self.to_dict(include_wall_time), sort_keys=True, indent=2)


def batch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def dev_loss(model: Model, pairs, batch_size: int = 256) -> float:
    total, count = 0.0, 0
    with nd.no_grad():
        for b in encode_batches(pairs, batch_size):
            n = b.num_target_tokens
            total += loss_on_batch(model, b).item() * n
            count += n
    return total / count if count else 0.0


def _evaluate(model, epoch, phase, train_loss, eval_sets, t0) -> EpochRecord:
    rec = EpochRecord(epoch, phase, train_loss, wall_time=time.perf_counter() - t0)
    for name, pairs in (eval_sets or {}).items():
        rec.dev_loss[name] = dev_loss(model, pairs)
        rec.dev_bleu[name] = evaluate_bleu(model, pairs).bleu
    return rec


def _pairs(corpus) -> list:
    return corpus.train if isinstance(corpus, ParallelCorpus) else list(corpus)


def _run(model: Model, corpus, opts: TrainOpts, trainable: list[ParamTag], eval_sets, phase, strategy) -> TrainLog:
    opts = opts.validate()
    pairs = _pairs(corpus)
    cfg = model.config
    log_ = TrainLog(strategy, asdict(opts))
    t0 = time.perf_counter()
    train_set = set(trainable)
    saved_flags = {t: p.requires_grad for t, p in model.named_parameters()}
    for t, p in model.named_parameters():
        p.requires_grad = t in train_set
        p.grad = np.zeros_like(p.data) if p.requires_grad else None
    opt = Adam([model[t] for t in trainable], opts.lr, opts.beta1, opts.beta2, opts.eps)
    drop_rng = np.random.default_rng([opts.seed, 7]) if cfg.dropout > 0 else None
    select = opts.select_on
    best_score = -np.inf
    try:
        if eval_sets:
            log_.initial = _evaluate(model, 0, phase, float("nan"), eval_sets, t0)
        for epoch in range(1, opts.epochs + 1):
            seed = batch_seed(opts.seed, epoch)
            batches = encode_batches(
                pairs, opts.batch_size, src_vocab=cfg.src_vocab, tgt_vocab=cfg.tgt_vocab, shuffle_seed=seed
            )
            total, count = 0.0, 0
            for bi, batch in enumerate(batches):
                opt.zero_grad()
                loss = loss_on_batch(model, batch, rng=drop_rng)
                val = loss.item()
                if not np.isfinite(val):
                    raise TrainingError(
                        f"non-finite loss in {phase} epoch {epoch}, batch {bi} (batch seed {seed})"
                    )
                nd.backward(loss)
                opt.step()
                n = batch.num_target_tokens
                total += val * n
                count += n
            train_loss = total / count
            if eval_sets and epoch % opts.eval_each == 0:
                rec = _evaluate(model, epoch, phase, train_loss, eval_sets, t0)
            else:
                rec = EpochRecord(epoch, phase, train_loss, wall_time=time.perf_counter() - t0)
            log_.records.append(rec)
            log.info("%s epoch %d loss %.4f bleu %s", phase, epoch, train_loss, rec.dev_bleu)
            if select and select in rec.dev_bleu and rec.dev_bleu[select] > best_score:
                best_score = rec.dev_bleu[select]
                log_.best_epoch = epoch
                log_.best_state = model.state_dict()
        if log_.best_state is None:
            log_.best_epoch = opts.epochs
            log_.best_state = model.state_dict()
    finally:
        for t, p in model.named_parameters():
            p.requires_grad = saved_flags[t]
            p.grad = np.zeros_like(p.data) if p.requires_grad else None
    return log_


def train(model: Model, corpus, opts: TrainOpts | None = None, eval_sets: Mapping[str, list] | None = None) -> TrainLog:
    """Train every parameter on ``corpus`` with Adam; model updated in place.

    ``eval_sets`` maps a domain label to dev pairs evaluated (loss and
    greedy BLEU) every ``eval_each`` epochs. The best state by
    ``opts.select_on`` is kept in the returned log.
    """
    opts = opts or TrainOpts()
    return _run(model, corpus, opts, model.tags(), eval_sets, "general", "none")


def continual_train(
    model: Model,
    in_domain_corpus,
    freeze: FreezeSpec | None = None,
    opts: TrainOpts | None = None,
    eval_sets: Mapping[str, list] | None = None,
) -> TrainLog:
    """Continue training on in-domain data with a fresh Adam state.

    Frozen tags are left out of the optimizer entirely, so they end
    bit-identical and accumulate no moments.
    """
    freeze = freeze or FreezeSpec()
    opts = opts or TrainOpts()
    trainable = freeze.trainable(model)
    return _run(model, in_domain_corpus, opts, trainable, eval_sets, "continual", freeze.describe())


# --------------------------------------------------------------------- sweep


@dataclass
class SweepRow:
    group: str
    strategy: str
    bleu_G: float
    bleu_I: float
    best_bleu_G: float
    best_bleu_I: float
    best_epoch: int
    before_G: float
    before_I: float
    vanilla_G: float
    vanilla_I: float


def _test_bleu(model: Model, test_sets) -> dict[str, float]:
    return {k: evaluate_bleu(model, v).bleu for k, v in test_sets.items()}


def _sweep_cell(args):
    state, config_model, corpus, freeze_mode, group, opts, dev_sets, test_sets, attach_ln = args
    model = config_model.copy()
    model.load_state_dict(state)
    freeze = FreezeSpec() if freeze_mode == "none" else FreezeSpec.from_group(model, freeze_mode, group, attach_ln)
    tl = continual_train(model, corpus, freeze, opts, dev_sets)
    final = _test_bleu(model, test_sets)
    model.load_state_dict(tl.best_state)
    best = _test_bleu(model, test_sets)
    return final, best, tl.best_epoch


def run_strategy_sweep(
    checkpoint,
    grouping: Grouping | str,
    in_domain_corpus,
    opts: TrainOpts,
    dev_sets: Mapping[str, list],
    test_sets: Mapping[str, list],
    jobs: int = 1,
    attach_ln: bool = True,
) -> list[SweepRow]:
    """Module-frozen and module-updated runs for every group of a grouping.

    All cells start from the same checkpoint with the same seeds. The first
    row is the vanilla (mode ``none``) baseline.
    """
    model = load_checkpoint(checkpoint) if not isinstance(checkpoint, Model) else checkpoint.copy()
    state = model.state_dict()
    before = _test_bleu(model, test_sets)
    groups = [name for name, _ in enumerate_groups(model, grouping, attach_ln)]
    cells = [("none", "-")] + [(mode, g) for g in groups for mode in ("freeze_only", "update_only")]
    opts = TrainOpts(**{**asdict(opts), "select_on": opts.select_on or "I"})
    args = [(state, model, in_domain_corpus, mode, g, opts, dev_sets, test_sets, attach_ln) for mode, g in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_cell, args))
    else:
        results = [_sweep_cell(a) for a in args]
    vanilla = results[0][0]
    rows = []
    for (mode, g), (final, best, best_epoch) in zip(cells, results):
        rows.append(
            SweepRow(
                group=g, strategy=mode,
                bleu_G=final["G"], bleu_I=final["I"],
                best_bleu_G=best["G"], best_bleu_I=best["I"], best_epoch=best_epoch,
                before_G=before["G"], before_I=before["I"],
                vanilla_G=vanilla["G"], vanilla_I=vanilla["I"],
            )
        )
    return rows


def sweep_to_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    fields = list(asdict(rows[0]).keys()) if rows else []
    w.writerow(fields)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
    return buf.getvalue()
