import numpy as np
import pytest

from msaes import losses as L
from msaes import tensor as T
from msaes import trainer as TR
from msaes.corpus import make_folds, out_of_domain_pool
from msaes.encoder import EncoderConfig
from msaes.multiscale import MultiScaleConfig
from msaes.synthetic import planted_corpus, synthetic_vocab, transfer_corpus
from msaes.tensor import Tape, backward, parameter, precision
from msaes.trainer import (Adam, AdamState, ModelFactory, TrainingAborted, TrainingConfig, adam_step,
                           batch_slices, encode_set, greedy_scale_search, loss_weight_grid, parse_scales,
                           select_best, train_epoch, tune_loss_weights)

VOCAB = synthetic_vocab()
MS = MultiScaleConfig(scales=(20,), n_p=40, doc_len=24)


def tiny_factory(seed=0, dropout=0.0, ms=MS):
    enc = EncoderConfig(len(VOCAB), d=8, n_layers=1, n_heads=2, dropout_rate=dropout)
    return ModelFactory(enc, ms, seed, "none")


@pytest.fixture(scope="module")
def tiny_data():
    essays, spec = planted_corpus(20, seed=3, max_score=2, length=(40, 60))
    return essays, spec, encode_set(essays, VOCAB, MS, spec)


class TestAdam:
    def test_zero_gradient_no_decay(self):
        p = parameter(np.array([0.3, -1.2]))
        before = p.data.copy()
        adam_step([p], [np.zeros(2)], AdamState(), TrainingConfig(weight_decay=0.0))
        np.testing.assert_array_equal(p.data, before)

    @pytest.mark.parametrize("g", [1.0, -3.0, 0.25])
    def test_first_step_is_lr_sized(self, g):
        with precision(np.float64):
            p = parameter(np.array([0.5]))
            cfg = TrainingConfig(learning_rate=1e-3, weight_decay=0.0)
            adam_step([p], [np.array([g])], AdamState(), cfg)
            assert abs((p.data[0] - 0.5) + np.sign(g) * 1e-3) < 1e-6 * 1e-3

    def test_decoupled_decay(self):
        with precision(np.float64):
            p = parameter(np.array([2.0, -4.0]))
            cfg = TrainingConfig(learning_rate=0.1, weight_decay=0.005)
            adam_step([p], [np.zeros(2)], AdamState(), cfg)
            np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.005), rtol=1e-14)

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=(4, 3))
        cfg = TrainingConfig(learning_rate=0.01, weight_decay=0.01)
        with precision(np.float64):
            p = parameter(np.array([0.1, 0.2, 0.3]))
            state = AdamState()
            for g in grads:
                adam_step([p], [g], state, cfg)
        x, m, v = np.array([0.1, 0.2, 0.3]), np.zeros(3), np.zeros(3)
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            step = (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            x = x - 0.01 * (step + 0.01 * x)
        np.testing.assert_allclose(p.data, x, rtol=1e-12)

    def test_frozen_untouched(self):
        p = parameter(np.array([1.0, 2.0]))
        p.requires_grad = False
        before = p.data.copy()
        adam_step([p], [np.ones(2)], AdamState(), TrainingConfig())
        np.testing.assert_array_equal(p.data, before)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            adam_step([parameter(np.zeros(2))], [np.zeros(3)], AdamState(), TrainingConfig())

    def test_optimizer_skips_missing_grads(self):
        a, b = parameter(np.ones(2)), parameter(np.ones(2))
        with Tape() as tape:
            loss = T.sum(T.mul(a, a))
        backward(loss, tape)
        opt = Adam([a, b], TrainingConfig(learning_rate=0.1))
        opt.step()
        assert np.all(a.data < 1) and np.all(b.data == 1)


class TestTrainingConfig:
    def test_paper_defaults(self):
        cfg = TrainingConfig()
        assert (cfg.learning_rate, cfg.weight_decay, cfg.batch_size, cfg.epochs) == (6e-5, 0.005, 32, 80)
        assert (cfg.dropout, cfg.rdrop_coeff, cfg.pretrain_epochs) == (0.1, 9.0, 20)

    @pytest.mark.parametrize("kwargs", [
        {"learning_rate": 0.0}, {"batch_size": 1, "beta": 0.5}, {"dropout": 1.0},
        {"alpha": 0.0}, {"adam_beta1": 1.0}, {"epochs": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainingConfig(**kwargs)


def test_batch_slices():
    assert batch_slices(5, 2) == [slice(0, 2), slice(2, 5)]
    assert batch_slices(6, 2) == [slice(0, 2), slice(2, 4), slice(4, 6)]
    assert batch_slices(1, 32) == [slice(0, 1)]
    assert batch_slices(33, 32) == [slice(0, 33)]


class TestTrainEpoch:
    def _run(self, data, cfg, dropout=0.0):
        model = tiny_factory(dropout=dropout)()
        rng = T.make_rng(cfg.seed)
        return train_epoch(model, data, cfg, rng, Adam(model.parameters(), cfg), VOCAB.pad_id), model

    def test_reproducible(self, tiny_data):
        cfg = TrainingConfig(learning_rate=1e-3, batch_size=8, beta=0.5, gamma=0.5)
        a, m1 = self._run(tiny_data[2], cfg, dropout=0.1)
        b, m2 = self._run(tiny_data[2], cfg, dropout=0.1)
        assert a == b
        for (n, x), (_, y) in zip(m1.state_dict().items(), m2.state_dict().items()):
            np.testing.assert_array_equal(x, y, err_msg=n)

    def test_rdrop_collapse_without_dropout(self, tiny_data):
        data = tiny_data[2]
        single, _ = self._run(data, TrainingConfig(learning_rate=1e-3, batch_size=8, rdrop_coeff=0.0))
        double, _ = self._run(data, TrainingConfig(learning_rate=1e-3, batch_size=8, rdrop_coeff=9.0))
        assert abs(single - double) < 1e-7

    def test_single_pass_loss_is_combined(self, tiny_data):
        data = tiny_data[2]
        cfg = TrainingConfig(learning_rate=1e-3, batch_size=32, rdrop_coeff=0.0, beta=1.0)
        model = tiny_factory()()
        with T.no_record():
            expected = L.combined(model.forward(data.batch, VOCAB.pad_id).total,
                                  data.labels.astype(np.float32), cfg.loss_weights).item()
        got = train_epoch(model, data, cfg, T.make_rng(0), Adam(model.parameters(), cfg), VOCAB.pad_id)
        assert got == pytest.approx(expected, rel=1e-5)

    def test_two_passes_differ_with_dropout(self, tiny_data):
        model = tiny_factory(dropout=0.3)()
        rng = T.make_rng(1)
        with T.no_record():
            y1 = model.forward(tiny_data[2].batch, VOCAB.pad_id, True, rng).total.data
            y2 = model.forward(tiny_data[2].batch, VOCAB.pad_id, True, rng).total.data
        assert not np.array_equal(y1, y2)

    def test_non_finite_aborts(self, tiny_data):
        model = tiny_factory()()
        model.head["b_doc_tok"].data[:] = np.nan
        cfg = TrainingConfig(batch_size=8)
        with pytest.raises(TrainingAborted):
            train_epoch(model, tiny_data[2], cfg, T.make_rng(0), Adam(model.parameters(), cfg), VOCAB.pad_id)

    def test_empty(self, tiny_data):
        model = tiny_factory()()
        cfg = TrainingConfig()
        with pytest.raises(ValueError):
            train_epoch(model, tiny_data[2].take([]), cfg, T.make_rng(0), Adam([], cfg), VOCAB.pad_id)


class TestSelection:
    def test_argmax(self):
        assert select_best([0.2, 0.9, 0.5]) + 1 == 2

    def test_first_tie_wins(self):
        assert select_best([0.3, 0.7, 0.7]) == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            select_best([])


class TestFit:
    def test_fold_protocol(self, tiny_data, monkeypatch):
        essays, spec, data = tiny_data
        split = make_folds(essays, 0)[0]
        train, dev, test = (data.subset(s) for s in (split.train_ids, split.dev_ids, split.test_ids))
        seen = []
        real = TR.predict_normalized
        monkeypatch.setattr(TR, "predict_normalized", lambda m, d, *a: seen.append(d) or real(m, d, *a))
        cfg = TrainingConfig(learning_rate=3e-3, epochs=4, batch_size=8)
        model = tiny_factory()()
        r = TR.fit_fold(model, train, dev, test, spec, cfg, VOCAB.pad_id)
        assert [d is test for d in seen] == [False] * 4 + [True]
        assert len(r.dev_history) == 4 and r.best_epoch == select_best(r.dev_history) + 1
        # model holds the selected weights; the stored metrics belong to them
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, r.state[name])
        assert TR.dev_score(real(model, dev, VOCAB.pad_id), dev, spec) == r.dev_best
        assert r.test_metrics == TR.evaluate_prompt(real(model, test, VOCAB.pad_id), test.raw, spec)
        assert len(r.per_scale_sample) == 3

    def test_five_folds_and_mean(self, tiny_data):
        essays, spec, data = tiny_data
        cfg = TrainingConfig(learning_rate=3e-3, epochs=1, batch_size=8)
        res = TR.fit(tiny_factory(), data, make_folds(essays, 0), spec, cfg, VOCAB.pad_id)
        assert [f.fold_index for f in res.folds] == [0, 1, 2, 3, 4]
        assert res.mean_test_rmse == pytest.approx(np.mean([f.test_metrics["rmse"] for f in res.folds]))

    def test_bit_identical_reruns_and_jobs(self, tiny_data):
        essays, spec, data = tiny_data
        folds = make_folds(essays, 1)[:2]
        cfg = TrainingConfig(learning_rate=3e-3, epochs=2, batch_size=8, dropout=0.1)
        runs = [TR.fit(tiny_factory(dropout=0.1), data, folds, spec, cfg, VOCAB.pad_id, jobs=j) for j in (1, 1, 2)]
        for other in runs[1:]:
            for a, b in zip(runs[0].folds, other.folds):
                assert a.dev_history == b.dev_history
                for name in a.state:
                    np.testing.assert_array_equal(a.state[name], b.state[name])


@pytest.fixture(scope="module")
def corpus():
    return transfer_corpus(10, 10, seed=0)


class TestTransfer:
    def _sets(self, essays, specs):
        ms = MultiScaleConfig(scales=(20,), n_p=128, doc_len=24)
        pool = out_of_domain_pool(essays, 2, specs)
        pool_set = encode_set([e for e, _ in pool], VOCAB, ms, specs, labels=[y for _, y in pool])
        target = [e for e in essays if e.prompt_id == 2]
        return ms, pool_set, target, encode_set(target, VOCAB, ms, specs)

    def test_pretrain_uses_mse_only(self, corpus, monkeypatch):
        essays, specs = corpus
        ms, pool_set, target, data = self._sets(essays, specs)
        used = []
        real = TR.train_epoch
        monkeypatch.setattr(TR, "train_epoch", lambda *a: used.append(a[6]) or real(*a))
        cfg = TrainingConfig(learning_rate=1e-3, batch_size=8, beta=1.0, gamma=0.5, rdrop_coeff=9,
                             pretrain_epochs=2, epochs=1)
        TR.pretrain(tiny_factory(ms=ms)(), pool_set, cfg, VOCAB.pad_id)
        assert used == [L.LossWeights(1.0, 0.0, 0.0)] * 2

    def test_pretrained_weights_carried(self, corpus, monkeypatch):
        essays, specs = corpus
        ms, pool_set, target, data = self._sets(essays, specs)
        starts = []
        real = TR.fit_fold
        monkeypatch.setattr(TR, "fit_fold", lambda model, *a, **k: starts.append(model.state_dict()) or real(model, *a, **k))
        cfg = TrainingConfig(learning_rate=1e-3, batch_size=8, pretrain_epochs=1, epochs=1, rdrop_coeff=0)
        res = TR.transfer_pipeline(tiny_factory(ms=ms), pool_set, data, make_folds(target, 0)[:2],
                                   specs[2], cfg, VOCAB.pad_id)
        assert len(starts) == 2
        for s in starts:
            for name, value in res.pretrained_state.items():
                np.testing.assert_array_equal(s[name], value)
        fresh = tiny_factory(ms=ms)().state_dict()
        assert not np.array_equal(fresh["head.W_seg"], res.pretrained_state["head.W_seg"])

    def test_empty_pool(self, corpus):
        essays, specs = corpus
        ms, pool_set, target, data = self._sets(essays, specs)
        with pytest.raises(ValueError, match="out-of-domain"):
            TR.transfer_pipeline(tiny_factory(ms=ms), pool_set.take([]), data, make_folds(target, 0),
                                 specs[2], TrainingConfig(), VOCAB.pad_id)


class TestGreedySearch:
    SINGLE = {10: 0.70, 30: 0.80, 50: 0.78, 70: 0.60}

    def _evaluator(self, prefixes, baseline=0.75):
        calls = []

        def ev(combo):
            calls.append(combo)
            if not combo:
                return baseline
            if len(combo) == 1 and len(calls) <= 1 + len(self.SINGLE):
                return self.SINGLE[combo[0]]
            return prefixes[combo]
        return ev, calls

    def test_hand_trace(self):
        ev, calls = self._evaluator({(30,): 0.80, (30, 50): 0.83})
        st = greedy_scale_search((10, 30, 50, 70), ev)
        assert st.qwk_ave == pytest.approx(0.72, abs=1e-12)
        assert st.candidates == [30, 50]
        assert calls == [(), (10,), (30,), (50,), (70,), (30,), (30, 50)]
        assert st.selected == (30, 50)
        assert len(st.trace) == 4 + 2 + 1
        assert st.to_dict()["selected"] == ["doc", "tok", 30, 50]

    def test_smaller_prefix_wins_tie(self):
        ev, _ = self._evaluator({(30,): 0.81, (30, 50): 0.81})
        assert greedy_scale_search((10, 30, 50, 70), ev).selected == (30,)

    def test_all_equal(self):
        st = greedy_scale_search((10, 30, 50), lambda c: 0.7)
        assert st.candidates == [] and st.selected == () and len(st.trace) == 4

    def test_deterministic(self):
        runs = [greedy_scale_search((10, 30, 50, 70), self._evaluator({(30,): 0.8, (30, 50): 0.83})[0])
                for _ in range(2)]
        assert runs[0].to_dict() == runs[1].to_dict()

    def test_empty(self):
        with pytest.raises(ValueError):
            greedy_scale_search((), lambda c: 0.0)


def test_parse_scales():
    assert parse_scales("10:190:20") == (10, 30, 50, 70, 90, 110, 130, 150, 170, 190)
    for bad in ("10:190", "a:b:c", "0:10:5", "20:10:5"):
        with pytest.raises(ValueError):
            parse_scales(bad)


def test_loss_weight_grid():
    grid = loss_weight_grid()
    assert len(grid) == 16 and all(a == 1.0 for a, _, _ in grid)
    assert {b for _, b, _ in grid} == {0.0, 0.1, 0.5, 1.0}
    best, table = tune_loss_weights(lambda a, b, g: 0.5 if b == 0.5 else 0.1)
    assert best == (1.0, 0.5, 0.0) and len(table) == 16
