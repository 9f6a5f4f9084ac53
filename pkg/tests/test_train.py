import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import f1_score

from msgm import tensor as T
from msgm.data import SyntheticSpec, generate_synthetic
from msgm.features import extract_features
from msgm.model import MsgmConfig
from msgm.train import (
    AdamW,
    DivergenceError,
    EarlyStopping,
    SplitError,
    SplitPlan,
    TrainConfig,
    adamw_step,
    evaluate,
    macro_f1,
    make_splits,
    score,
    summarize,
    train_fold,
)
from msgm.tensor import Tensor


def subjects_of(n_subjects, per=3):
    return np.repeat(np.arange(n_subjects), per)


class TestAdamW:
    def test_single_step(self):
        w = Tensor([1.0], requires_grad=True)
        adamw_step([w], [np.array([2.0])], cfg=TrainConfig(lr=1e-3, weight_decay=0.01))
        expected = 1 - 1e-3 * 0.01 * 1 - 1e-3 * (2 / (np.sqrt(4) + 1e-8))
        assert w.data[0] == pytest.approx(expected, abs=1e-12)
        assert w.data[0] == pytest.approx(0.99899, abs=1e-8)

    def test_zero_grad_zero_decay(self):
        w = Tensor([1.0, -2.0], requires_grad=True)
        opt = AdamW([w], lr=1e-2, weight_decay=0.0)
        for _ in range(5):
            opt.step([np.zeros(2)])
        np.testing.assert_array_equal(w.data, [1.0, -2.0])

    def test_quadratic_descent(self):
        w = Tensor([1.0], requires_grad=True)
        opt = AdamW([w], lr=1e-3, weight_decay=0.01)
        for step in range(2000):
            with T.Tape() as tape:
                f = T.sum(T.mul(w, w))
            T.backward(f, tape, [w])
            opt.step()
            if abs(w.data[0]) < 0.1:
                break
        assert abs(w.data[0]) < 0.1

    def test_nan_gradient_raises(self):
        w = Tensor([1.0], requires_grad=True, name="w")
        with pytest.raises(DivergenceError, match="w"):
            AdamW([w]).step([np.array([np.nan])])


class TestSplits:
    def test_loso_fold_count(self):
        assert len(make_splits(subjects_of(15), SplitPlan("loso"))) == 15

    def test_leave_two_of_four(self):
        folds = make_splits(subjects_of(4), SplitPlan("leave_n_out", 2))
        assert len(folds) == 2
        assert set(folds[0].test_subjects).isdisjoint(folds[1].test_subjects)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 20), st.integers(1, 5), st.integers(0, 1000))
    def test_partition(self, S, n, seed):
        if n >= S:
            with pytest.raises(SplitError):
                make_splits(subjects_of(S), SplitPlan("leave_n_out", n))
            return
        subj = subjects_of(S)
        folds = make_splits(subj, SplitPlan("leave_n_out", n), seed)
        tests = [set(f.test_subjects) for f in folds]
        assert set().union(*tests) == set(range(S))
        assert sum(len(t) for t in tests) == S
        for f in folds:
            idx = np.concatenate([f.train_idx, f.val_idx, f.test_idx])
            assert sorted(idx) == list(range(len(subj)))
            assert not set(subj[f.train_idx]) & set(f.test_subjects)
            assert not set(subj[f.val_idx]) & set(f.test_subjects)

    def test_single_subject_rejected(self):
        with pytest.raises(SplitError):
            make_splits(subjects_of(1), SplitPlan())


class TestMetrics:
    def test_perfect(self):
        m = score([0, 1, 1, 0], [0, 1, 1, 0], 2)
        assert (m.accuracy, m.f1) == (1.0, 1.0)

    def test_all_wrong(self):
        m = score([1, 0, 0, 1], [0, 1, 1, 0], 2)
        assert (m.accuracy, m.f1) == (0.0, 0.0)

    def test_hand_confusion(self):
        m = score([1, 1, 0, 0], [1, 0, 1, 0], 2)
        assert (m.accuracy, m.f1) == (0.5, 0.5)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40))
    def test_matches_reference_implementation(self, pairs):
        pred, labels = map(np.array, zip(*pairs))
        ref = f1_score(labels, pred, labels=[0, 1, 2], average="macro", zero_division=0)
        assert macro_f1(pred, labels, 3) == pytest.approx(ref, abs=1e-12)

    def test_summary_population_std(self):
        assert summarize([0.5, 1.0]) == {"mean": 0.75, "std": 0.25}


class TestEarlyStopping:
    def test_flat_stops_at_six(self):
        stop_at = None
        es = EarlyStopping(5)
        for epoch in range(1, 20):
            _, stop = es.step(epoch, 0.5)
            if stop:
                stop_at = epoch
                break
        assert stop_at == 6 and es.best_epoch == 1

    def test_improving_runs_to_cap(self):
        es = EarlyStopping(5)
        assert not any(es.step(e, e / 10)[1] for e in range(1, 11))
        assert es.best_epoch == 10


@pytest.fixture(scope="module")
def small_fold_run():
    spec = SyntheticSpec(subjects=4, trials_per_subject=2, duration=28.0)
    recs = generate_synthetic(spec, 0)
    cfg = MsgmConfig(n_channels=16, hidden=8, d_state=4)
    data = extract_features(recs, cfg.scale_spec)
    fold = make_splits(data.subjects, SplitPlan("leave_n_out", 2, 0.25), 0)[0]
    result = train_fold(fold, data, cfg, TrainConfig(epochs=6, patience=2, lr=3e-3))
    return result, data, fold


class TestTrainFold:
    def test_reports_best_validation_checkpoint(self, small_fold_run):
        result, data, fold = small_fold_run
        assert result.status == "ok"
        val_accs = [h["val_accuracy"] for h in result.history]
        assert result.best_val_accuracy == max(val_accs)
        assert result.best_epoch == 1 + int(np.argmax(val_accs))
        # the returned model is the best-epoch state, not the last one
        assert evaluate(result.model, data.subset(fold.val_idx)).accuracy == result.best_val_accuracy
        assert evaluate(result.model, data.subset(fold.test_idx)) == result.test

    def test_history_is_serialisable(self, small_fold_run):
        json.dumps(small_fold_run[0].to_json())
