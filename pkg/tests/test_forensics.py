import numpy as np
import pytest
from PIL import Image

from forgetlab import forensics as fo
from forgetlab import nanoformer as nf
from forgetlab import ndgrad as nd
from forgetlab.corpusgen import make_batch
from forgetlab.nanoformer import ConfigError
from forgetlab.trainer import TrainOpts, train

MATRIX = "Encoder/0/FFN/fc1.weight"


@pytest.fixture(scope="module")
def trained(small_corpora):
    g, _ = small_corpora
    vocab = g.vocab
    model = nf.build_model(nf.ModelConfig(num_layers=2, d_model=16, d_ffn=32, num_heads=2,
                                          src_vocab=vocab.src_size, tgt_vocab=vocab.tgt_size, max_len=10))
    train(model, g, TrainOpts(epochs=6, lr=3e-3, batch_size=32))
    return model


def test_zero_weight_has_zero_importance(small_model, small_corpora):
    small_model[MATRIX].data[2, 5] = 0.0
    imp = fo.accumulate_importance(small_model, small_corpora[0], t_limit=5)
    assert imp.get(MATRIX)[2, 5] == 0.0


def test_single_sentence_map_is_grad_times_value(small_model, small_corpora):
    pair = small_corpora[0].train[0]
    imp = fo.accumulate_importance(small_model, [pair], t_limit=1)
    small_model.zero_grad()
    nd.backward(nf.loss_on_batch(small_model, make_batch([pair])))
    for tag, p in small_model.named_parameters():
        assert np.array_equal(imp[tag], np.abs(p.grad * p.data))


def test_average_uses_absolute_value_per_sentence(small_model, small_corpora):
    pairs = small_corpora[0].train[:3]
    singles = [fo.accumulate_importance(small_model, [p], 1).get(MATRIX) for p in pairs]
    joint = fo.accumulate_importance(small_model, pairs, 3).get(MATRIX)
    np.testing.assert_allclose(joint, sum(singles) / 3, rtol=1e-12)


def test_importance_scales_with_loss(small_model, small_corpora):
    a = fo.accumulate_importance(small_model, small_corpora[0], 4)
    b = fo.accumulate_importance(small_model, small_corpora[0], 4, loss_scale=2.5)
    for tag in small_model.tags():
        np.testing.assert_allclose(b[tag], 2.5 * a[tag], rtol=1e-12)


def test_t_limit_validation_and_invariants(small_model, small_corpora):
    with pytest.raises(ConfigError):
        fo.accumulate_importance(small_model, small_corpora[0], t_limit=0)
    imp = fo.accumulate_importance(small_model, small_corpora[0], t_limit=7)
    assert imp.num_examples == 7
    imp.validate(small_model)
    assert all(np.all(np.isfinite(s)) and np.all(s >= 0) for s in imp.scores.values())


def test_importance_map_save_load(small_model, small_corpora, tmp_path):
    imp = fo.accumulate_importance(small_model, small_corpora[0], t_limit=3, domain="I")
    imp.save(tmp_path / "imp.ckpt", small_model)
    back = fo.ImportanceMap.load(tmp_path / "imp.ckpt")
    assert back.num_examples == 3 and back.domain == "I"
    for tag in small_model.tags():
        assert back[tag].tobytes() == imp[tag].tobytes()


def test_taylor_scores_track_brute_force_deltas(trained, small_corpora):
    g, _ = small_corpora
    batch = g.train[:128]
    imp = fo.accumulate_importance(trained, batch, t_limit=128)
    rng = np.random.default_rng(0)
    rhos = []
    for key in ("Encoder/0/FFN/fc1.weight", "Decoder/1/FFN/fc2.weight"):
        idx = rng.choice(imp.get(key).size, 120, replace=False)
        delta = fo.brute_force_delta(trained, key, idx, batch)
        rhos.append(fo.map_correlation(imp.get(key).reshape(-1)[idx], delta))
    assert min(rhos) > 0.4, rhos


def test_ranking_breaks_ties_by_index():
    s = np.array([[1.0, 3.0], [3.0, 1.0]])
    assert fo.ranked_indices(s, "descending").tolist() == [1, 2, 0, 3]
    assert fo.ranked_indices(s, "ascending").tolist() == [0, 3, 1, 2]
    with pytest.raises(ConfigError):
        fo.ranked_indices(s, "random")


def test_erasure_sets_are_nested_and_sized():
    s = np.random.default_rng(0).random((7, 9))
    prev = np.zeros(s.shape, dtype=bool)
    for f in fo.DEFAULT_FRACTIONS:
        m = fo.erasure_mask(s, "descending", f)
        assert m.sum() == int(np.floor(round(f * s.size, 9)))
        assert np.all(m[prev])
        prev = m
    # 0.3 * 10 is not exactly 3 in binary; the rounding keeps it at 3
    assert fo.erasure_mask(np.arange(10.0), "ascending", 0.3).sum() == 3


def test_erasure_curve_endpoints_and_isolation(trained, small_corpora):
    g, _ = small_corpora
    imp = fo.accumulate_importance(trained, g, t_limit=50)
    before = {t: p.data.tobytes() for t, p in trained.named_parameters()}
    base = fo.erase_and_eval(trained, imp, MATRIX, "descending", [0.0], g.test)
    desc = fo.erase_and_eval(trained, imp, MATRIX, "descending", [0.0, 0.5, 1.0], g.test)
    asc = fo.erase_and_eval(trained, imp, MATRIX, "ascending", [0.0, 0.5, 1.0], g.test)
    assert desc.bleu[0] == asc.bleu[0] == base.bleu[0]
    assert desc.loss[0] == asc.loss[0]
    assert desc.bleu[-1] == asc.bleu[-1] and desc.loss[-1] == asc.loss[-1]
    assert {t: p.data.tobytes() for t, p in trained.named_parameters()} == before
    csv_text = fo.curves_to_csv([desc, asc])
    assert csv_text.count("\n") == 1 + 6


def test_erasure_rejects_bad_grid(trained, small_corpora):
    imp = fo.accumulate_importance(trained, small_corpora[0], t_limit=2)
    with pytest.raises(ConfigError):
        fo.erase_and_eval(trained, imp, MATRIX, "descending", [0.2, 0.5], small_corpora[0].test)


def test_constant_matrix_is_mid_gray(tmp_path):
    tag = nf.ParamTag.parse(MATRIX)
    imp = fo.ImportanceMap({tag: np.full((4, 6), 0.37)}, 1)
    png, _ = fo.export_heatmap(imp, MATRIX, tmp_path / "const")
    px = np.asarray(Image.open(png))
    assert px.shape == (4, 6) and np.all(px == 128)


def test_heatmap_csv_round_trip_and_metadata(tmp_path):
    tag = nf.ParamTag.parse(MATRIX)
    scores = np.random.default_rng(4).random((5, 3)) * 1e-3
    imp = fo.ImportanceMap({tag: scores}, 10)
    png, csv_path = fo.export_heatmap(imp, tag, tmp_path / "h.png", {"domain": "G"})
    assert png.name == "h.png" and csv_path.name == "h.csv"
    assert np.array_equal(fo.read_heatmap_csv(csv_path), scores)
    img = Image.open(png)
    assert img.text["domain"] == "G"
    px = np.asarray(img)
    assert px.max() == 255 and px.min() == 0
    assert np.unravel_index(px.argmax(), px.shape) == np.unravel_index(scores.argmax(), scores.shape)


def test_decile_groups_partition():
    for n in (10, 11, 19, 257, 1024):
        groups = fo.decile_groups(np.random.default_rng(n).random(n))
        sizes = [len(g) for g in groups]
        assert len(groups) == 10 and max(sizes) - min(sizes) <= 1
        assert sorted(np.concatenate(groups).tolist()) == list(range(n))


def test_drift_identity_and_uniform_shift(small_model, small_corpora):
    imp = fo.accumulate_importance(small_model, small_corpora[0], t_limit=3)
    same = fo.decile_drift(small_model, small_model.copy(), imp)
    assert same.distances == [0.0] * 10
    shifted = small_model.copy()
    for p in shifted.parameters():
        p.data = p.data + 0.1
    rep = fo.decile_drift(small_model, shifted, imp)
    np.testing.assert_allclose(rep.distances, 0.1, rtol=1e-12)
    assert rep.intervals[0] == "[0%,10%)" and rep.intervals[-1] == "[90%,100%]"
    assert rep.num_modules == sum(1 for p in small_model.parameters() if p.size >= 10)
    assert all(max(s) - min(s) <= 1 for s in rep.group_sizes.values())
    assert rep.to_csv().count("\n") == 11


def test_drift_top_decile_holds_most_important(small_model, small_corpora):
    imp = fo.accumulate_importance(small_model, small_corpora[0], t_limit=3)
    moved = small_model.copy()
    w = moved[MATRIX].data
    top = fo.decile_groups(imp.get(MATRIX))[0]
    w.reshape(-1)[top] += 1.0
    rep = fo.decile_drift(small_model, moved, imp)
    assert rep.per_module[MATRIX][0] == pytest.approx(1.0)
    assert rep.per_module[MATRIX][1:] == [0.0] * 9


def test_analysis_matrices_default(small_model):
    keys = [t.key() for t in fo.analysis_matrices(small_model)]
    assert len(keys) == 2 * 6 + 2 * 10
    assert all(k.split("/")[2] in ("SA", "CA", "FFN") and k.endswith("weight") for k in keys)
    assert fo.analysis_matrices(small_model, [MATRIX])[0].key() == MATRIX
