import numpy as np
import pytest

from forgetlab import corpusgen as cg
from forgetlab import nanoformer as nf


def central_diff(f, x: np.ndarray, eps: float = 1e-4, idx=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. entries of ``x`` (in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(x.shape)


def rel_err(a, n, floor=1e-6) -> float:
    a, n = np.asarray(a, float), np.asarray(n, float)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


@pytest.fixture(scope="session")
def small_pair():
    return cg.make_domain_pair(0, 0.7, 40, min_len=3, max_len=6)


@pytest.fixture(scope="session")
def small_corpora(small_pair):
    g, i = small_pair
    return cg.sample_corpus(g, 400, 1, 30, 30), cg.sample_corpus(i, 150, 2, 30, 30)


@pytest.fixture()
def small_model(small_corpora):
    vocab = small_corpora[0].vocab
    return nf.build_model(
        nf.ModelConfig(num_layers=2, d_model=16, d_ffn=32, num_heads=2,
                       src_vocab=vocab.src_size, tgt_vocab=vocab.tgt_size, max_len=10)
    )


# ---------------------------------------------------------------- experiment

CRITERIA: dict[str, str] = {}


def record(criterion: str, ok: bool, detail: str) -> None:
    """Log one acceptance line; printed again in the terminal summary."""
    line = f"{criterion} {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[key])


class Lab:
    """Default experiment, run once per session and shared by the slow tests."""

    def __init__(self):
        import time

        from forgetlab.config import ExperimentConfig
        from forgetlab.metrics import evaluate_bleu
        from forgetlab.trainer import continual_train, train

        self.cfg = ExperimentConfig()
        self.spec_g, self.spec_i, self.corpus_g, self.corpus_i = self.cfg.build_data()
        vocab = self.corpus_g.vocab
        dev = {"G": self.corpus_g.dev, "I": self.corpus_i.dev}
        t0 = time.perf_counter()
        self.model_g = nf.build_model(self.cfg.model_config(vocab.src_size, vocab.tgt_size))
        self.log_g = train(self.model_g, self.corpus_g, self.cfg.train, dev)
        self.time_g = time.perf_counter() - t0
        self.before = {
            "G": evaluate_bleu(self.model_g, self.corpus_g.test).bleu,
            "I": evaluate_bleu(self.model_g, self.corpus_i.test).bleu,
        }
        t0 = time.perf_counter()
        self.model_i = self.model_g.copy()
        self.log_i = continual_train(self.model_i, self.corpus_i, None, self.cfg.continual, dev)
        self.time_i = time.perf_counter() - t0
        self.after = {
            "G": evaluate_bleu(self.model_i, self.corpus_g.test).bleu,
            "I": evaluate_bleu(self.model_i, self.corpus_i.test).bleu,
        }
        self._imp = {}

    def importance(self, domain: str):
        from forgetlab.forensics import accumulate_importance

        if domain not in self._imp:
            model, corpus = (self.model_g, self.corpus_g) if domain == "G" else (self.model_i, self.corpus_i)
            self._imp[domain] = accumulate_importance(model, corpus, self.cfg.analysis.t_limit, domain)
        return self._imp[domain]


@pytest.fixture(scope="session")
def lab():
    return Lab()
