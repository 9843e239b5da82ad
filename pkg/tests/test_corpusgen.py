import numpy as np
import pytest

from forgetlab import corpusgen as cg
from forgetlab.nanoformer import ConfigError


def test_reorder_rules():
    t = [1, 2, 3, 4, 5]
    assert cg.reorder(t, "identity") == t
    assert cg.reorder(t, "reverse") == [5, 4, 3, 2, 1]
    assert cg.reorder(t, "rotate", 2) == [3, 4, 5, 1, 2]
    assert cg.reorder(t, "swap-adjacent") == [2, 1, 4, 3, 5]
    with pytest.raises(ConfigError):
        cg.reorder(t, "shuffle")


def test_full_overlap_same_rule_gives_same_distribution():
    g, i = cg.make_domain_pair(5, overlap=1.0, vocab_size=30, reorder_i="identity")
    assert g.lexicon == i.lexicon and g.reorder == i.reorder and g.vocab_tail_size == 0


def test_zero_overlap_shares_nothing():
    g, i = cg.make_domain_pair(5, overlap=0.0, vocab_size=30)
    assert not {s for s, _ in g.lexicon} & {s for s, _ in i.lexicon}
    assert not {t for _, t in g.lexicon} & {t for _, t in i.lexicon}


def test_core_shared_tails_disjoint():
    g, i = cg.make_domain_pair(0, 0.7, 200)
    assert g.vocab_core_size == i.vocab_core_size == 140
    assert g.core == i.core
    assert not {s for s, _ in g.tail} & {s for s, _ in i.tail}
    assert g.vocab.src_size == 3 + 140 + 2 * 60


def test_unseen_fraction_matches_counting_oracle():
    g, i = cg.make_domain_pair(0, 0.7, 200)
    cg_g = cg.sample_corpus(g, 20000, 1)
    cg_i = cg.sample_corpus(i, 10, 2, n_test=2000)
    seen = {tok for s, _ in cg_g.train for tok in s}
    test_tokens = [tok for s, _ in cg_i.test for tok in s]
    unseen = np.mean([tok not in seen for tok in test_tokens])
    tail = {s for s, _ in i.tail}
    from_tail = np.mean([tok in tail for tok in test_tokens])
    # every G word shows up in 20k sentences, so unseen == drawn from the I tail
    assert unseen == from_tail
    # words are drawn uniformly from I's lexicon: expectation is the tail share
    share = i.vocab_tail_size / (i.vocab_core_size + i.vocab_tail_size)
    assert share == pytest.approx(0.3)
    assert abs(unseen - share) < 0.02


def test_same_inputs_same_corpus():
    g, _ = cg.make_domain_pair(0, 0.7, 50)
    a = cg.sample_corpus(g, 300, 4, 20, 20)
    b = cg.sample_corpus(g, 300, 4, 20, 20)
    assert (a.train, a.dev, a.test) == (b.train, b.dev, b.test)
    assert cg.sample_corpus(g, 300, 5).train != a.train


def test_every_pair_is_its_own_translation():
    g, i = cg.make_domain_pair(0, 0.7, 50, reorder_i="swap-adjacent")
    for spec in (g, i):
        c = cg.sample_corpus(spec, 500, 1, 50, 50)
        for s, t in c.train + c.dev + c.test:
            assert spec.translate(s) == t


def test_splits_have_distinct_sources():
    g, _ = cg.make_domain_pair(0, 0.7, 20, min_len=2, max_len=3)
    c = cg.sample_corpus(g, 500, 1, 100, 100)
    srcs = [tuple(s) for s, _ in c.train + c.dev + c.test]
    assert len(srcs) == len(set(srcs)) == 700


def test_too_many_sentences_requested():
    g, _ = cg.make_domain_pair(0, 0.5, 2, min_len=1, max_len=1)
    with pytest.raises(ConfigError):
        cg.sample_corpus(g, 10, 0)


def test_mean_length_law_of_large_numbers():
    g, _ = cg.make_domain_pair(0, 0.7, 200, min_len=4, max_len=12)
    c = cg.sample_corpus(g, 10000, 3)
    lengths = [len(s) for s, _ in c.train]
    assert min(lengths) == 4 and max(lengths) == 12
    assert abs(np.mean(lengths) - 8.0) < 0.2


def test_batch_round_trip_and_padding():
    g, _ = cg.make_domain_pair(0, 0.7, 50)
    pairs = cg.sample_corpus(g, 257, 1).train
    batches = cg.encode_batches(pairs, 32, shuffle_seed=9)
    back = {}
    for b in batches:
        for row, pair in zip(b.index, cg.decode_batch(b)):
            back[int(row)] = pair
        longest = max(len(pairs[k][0]) for k in b.index)
        assert b.src.shape[1] == longest + 1  # EOS appended
        assert b.tgt_in.shape == b.tgt_out.shape
        assert b.tgt_in.shape[1] == max(len(pairs[k][1]) for k in b.index) + 1
    assert [back[k] for k in range(len(pairs))] == [(list(s), list(t)) for s, t in pairs]


def test_token_count_over_batches():
    g, _ = cg.make_domain_pair(0, 0.7, 50)
    pairs = cg.sample_corpus(g, 300, 2).train
    batches = cg.encode_batches(pairs, 16)
    corpus_tokens = sum(1 for _ in cg.iter_tokens(pairs))
    in_batches = sum(int((b.src > 2).sum() + (b.tgt_out > 2).sum()) for b in batches)
    assert in_batches == corpus_tokens
    # each sentence adds one EOS to the target stream
    assert sum(b.num_target_tokens for b in batches) == sum(len(t) for _, t in pairs) + len(pairs)


def test_batch_rejects_out_of_vocab_and_reserved_ids():
    with pytest.raises(ConfigError):
        cg.encode_batches([([3, 99], [4])], 4, src_vocab=50)
    with pytest.raises(ConfigError):
        cg.encode_batches([([3, 0], [4])], 4)


def test_dump_and_load(tmp_path):
    g, _ = cg.make_domain_pair(0, 0.7, 50)
    c = cg.sample_corpus(g, 40, 1)
    c.dump(tmp_path / "train.tsv")
    assert cg.load_pairs(tmp_path / "train.tsv", c.vocab) == c.train
    block = g.to_config_block()
    assert "reorder: identity" in block and "s000" in block
