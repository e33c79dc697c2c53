import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from coforge.archgraph import FEATURE_WIDTH, build_graph, featurize
from coforge.cli import sub_seed
from coforge.cosim import Record, generate_dataset, lut_estimate
from coforge.design_space import DEFAULT_SPACE, Architecture, combine, sample_valid
from coforge.lut import analytic_lut
from coforge.predictor import (
    PARAM_NAMES, GraphBatch, HyperParams, ModelFormatError, PredictorModel, TrainingError, correct,
    encode, evaluate, gradient_check, labels_of, pack_graphs, predict, predict_corrected,
    ranking_accuracy, train, within,
)
from coforge.profiles import load_pack

FIX = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def tx2():
    return load_pack("tx2-gpu")


@pytest.fixture(scope="module")
def small_data(tx2):
    return generate_dataset(DEFAULT_SPACE, tx2, 120, 11)


def batch_of(archs, tx2, metric="latency"):
    return encode(archs, metric, analytic_lut(tx2), tx2)


class TestForward:
    def test_golden_hand_forward(self):
        gold = json.loads((FIX / "gin_forward.json").read_text())
        params = {k: np.array(v, dtype=np.float64) for k, v in gold["params"].items()}
        model = PredictorModel(params, hidden=gold["hidden"], label_scale=gold["label_scale"])
        g = build_graph(Architecture((combine(64),)))
        batch = pack_graphs([(g, np.array(gold["features"]))])
        assert model.forward(batch)[0] == pytest.approx(gold["output"], rel=1e-9)

    def test_zero_features_give_topology_free_constant(self, tx2):
        model = PredictorModel.init(hidden=8, seed=3, label_scale=0.01)
        rng = np.random.default_rng(0)
        items = [(build_graph(a), np.zeros((len(a) + 1, FEATURE_WIDTH)))
                 for a in (sample_valid(rng, DEFAULT_SPACE) for _ in range(5))]
        out = model.forward(pack_graphs(items))
        assert np.all(out == 0.01 * 2.0)

    def test_mean_over_in_neighbourhood_only(self):
        g = build_graph(Architecture((combine(64),)))
        assert g.mean_operator().tolist() == [[0.5, 0.5], [0.5, 0.5]]

    def test_duplicated_neighbours_leave_mean_unchanged(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 4))
        # node 0 listens to nodes 1, 2; in the second graph also to exact copies 3, 4
        a1 = np.zeros((5, 5))
        a1[0, [1, 2]] = 1
        a2 = a1.copy()
        a2[0, [3, 4]] = 1
        x[3], x[4] = x[1], x[2]
        m1 = a1 / a1.sum(1, keepdims=True).clip(min=1)
        m2 = a2 / a2.sum(1, keepdims=True).clip(min=1)
        assert np.allclose((m1 @ x)[0], (m2 @ x)[0], rtol=0, atol=1e-15)

    def test_width_mismatch(self, tx2):
        model = PredictorModel.init(input_width=FEATURE_WIDTH, hidden=8)
        _, x = featurize(Architecture((combine(64),)), "latency", analytic_lut(tx2), tx2, enhanced=False)
        with pytest.raises(ValueError):
            model.forward(pack_graphs([(build_graph(Architecture((combine(64),))), x)]))

    def test_padding_does_not_change_predictions(self, tx2):
        rng = np.random.default_rng(4)
        archs = [sample_valid(rng, DEFAULT_SPACE) for _ in range(6)]
        model = PredictorModel.init(hidden=8, seed=1, label_scale=0.01)
        lut = analytic_lut(tx2)
        tight = encode(archs[:1], "latency", lut, tx2)
        loose = encode(archs[:1], "latency", lut, tx2, n_max=20)
        assert model.forward(tight)[0] == pytest.approx(model.forward(loose)[0], rel=1e-13)


class TestGradients:
    def test_random_pairs(self, tx2):
        rng = np.random.default_rng(5)
        for i in range(5):
            archs = [sample_valid(rng, DEFAULT_SPACE) for _ in range(3)]
            batch = batch_of(archs, tx2)
            y = rng.uniform(0.01, 0.2, size=3)
            model = PredictorModel.init(hidden=6, seed=i, label_scale=0.005)
            res = gradient_check(model, batch, y)
            assert res.max_rel_error < 1e-4
            assert res.checked > 0.9 * (res.checked + res.kinks)

    def test_log_ratio_loss(self, tx2):
        rng = np.random.default_rng(15)
        archs = [sample_valid(rng, DEFAULT_SPACE) for _ in range(3)]
        model = PredictorModel.init(hidden=6, seed=4, label_scale=0.005)
        res = gradient_check(model, batch_of(archs, tx2), rng.uniform(0.01, 0.2, size=3), kind="log")
        assert res.max_rel_error < 1e-4 and res.checked > 0

    def test_unknown_loss(self, tx2):
        b = batch_of([sample_valid(np.random.default_rng(1), DEFAULT_SPACE)], tx2)
        with pytest.raises(ValueError):
            PredictorModel.init(hidden=4).loss_and_grads(b, np.array([0.1]), "huber")

    def test_zero_input_first_layer_gradient_vanishes(self, tx2):
        archs = [sample_valid(np.random.default_rng(6), DEFAULT_SPACE)]
        b = batch_of(archs, tx2)
        zero = GraphBatch(np.zeros_like(b.x), b.m, b.mask)
        model = PredictorModel.init(hidden=6, seed=2, label_scale=0.005)
        _, grads = model.loss_and_grads(zero, np.array([0.1]))
        assert np.all(grads["W1_0"] == 0.0)

    def test_repeatable(self, tx2):
        archs = [sample_valid(np.random.default_rng(7), DEFAULT_SPACE)]
        b = batch_of(archs, tx2)
        y = np.array([0.07])
        r1 = gradient_check(PredictorModel.init(hidden=4, seed=9, label_scale=0.01), b, y)
        r2 = gradient_check(PredictorModel.init(hidden=4, seed=9, label_scale=0.01), b, y)
        assert r1 == r2


class TestTraining:
    def test_starts_at_median_label(self, tx2, small_data):
        model, _, _ = train(small_data, "latency", tx2, HyperParams(epochs=0, hidden=8), seed=0)
        y = labels_of([r for r in small_data if r.split == "train"], "latency")
        out = model.forward(batch_of([r.arch for r in small_data[:5]], tx2))
        assert np.allclose(out, np.median(y), rtol=1e-9)

    def test_no_collapse_onto_label_floor(self, tx2):
        # Pinned case: this dataset holds a few archs near 5 us next to a 0.56 s median,
        # and without the log-ratio warm-up this seed ends with every prediction on the
        # floor (val MAPE 0.999).
        lut = analytic_lut(tx2)
        recs = generate_dataset(DEFAULT_SPACE, tx2, 2000, sub_seed(42, "dataset"), lut)
        hp = HyperParams(epochs=60, hidden=32, schedule="cosine")
        _, report, _ = train(recs, "latency", tx2, hp, sub_seed(42, "train-latency"), lut)
        assert report.val_mape < 0.3 and report.within_20 > 0.5

    def test_constant_label(self, tx2, small_data):
        recs = [Record(r.arch, 0.05, 0.3, r.split) for r in small_data]
        _, report, _ = train(recs, "latency", tx2, HyperParams(epochs=60, hidden=16), seed=0)
        assert report.val_mape < 0.02

    @pytest.mark.slow
    def test_learns_exact_lut_sums(self, tx2):
        # Without overhead and compression the simulator label is exactly the LUT
        # sum, which the features carry node by node.
        sys_ = replace(tx2, net=replace(tx2.net, per_message_overhead_s=0.0, compression_ratio_estimate=1.0))
        lut = analytic_lut(sys_)
        recs = generate_dataset(DEFAULT_SPACE, sys_, 9000, 0, lut)
        for r in recs[:200]:
            assert r.latency_s == pytest.approx(lut_estimate(r.arch, sys_, lut), rel=1e-9)
        _, report, _ = train(recs, "latency", sys_, HyperParams(epochs=150, schedule="cosine"), 0, lut)
        assert report.within_10 > 0.95

    def test_report_populated_and_in_range(self, tx2, small_data):
        model, report, history = train(small_data, "energy", tx2, HyperParams(epochs=3, hidden=8), seed=1)
        assert (report.n_train, report.n_val) == (84, 36)
        for v in (report.within_10, report.within_20, report.ranking):
            assert 0.0 <= v <= 1.0
        assert report.val_mape >= 0 and report.train_mape >= 0
        assert len(history) == 3
        assert model.metric == "energy" and model.meta["epochs"] == 3

    def test_deterministic_weights(self, tx2, small_data):
        hp = HyperParams(epochs=2, hidden=8)
        m1, _, _ = train(small_data, "latency", tx2, hp, seed=4)
        m2, _, _ = train(small_data, "latency", tx2, hp, seed=4)
        for k in PARAM_NAMES:
            assert m1.params[k].tobytes() == m2.params[k].tobytes()

    def test_zero_label_rejected(self, small_data):
        bad = [Record(r.arch, 0.0, 1.0, r.split) for r in small_data[:3]]
        with pytest.raises(TrainingError):
            labels_of(bad, "latency")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts(self, tx2, small_data):
        recs = [Record(r.arch, float("inf"), 1.0, r.split) for r in small_data[:10]]
        with pytest.raises(TrainingError):
            train(recs, "latency", tx2, HyperParams(epochs=1, hidden=4), seed=0)

    def test_cosine_schedule(self):
        hp = HyperParams(epochs=10, schedule="cosine")
        assert hp.lr_at(0) == hp.lr and hp.lr_at(5) == pytest.approx(hp.lr / 2)
        assert HyperParams().lr_at(499) == 1e-3


class TestPersistence:
    def test_round_trip(self, tmp_path):
        model = PredictorModel.init(hidden=8, seed=1, metric="energy", label_scale=0.02)
        model.save(tmp_path / "m.json")
        back = PredictorModel.load(tmp_path / "m.json", expected_width=FEATURE_WIDTH)
        assert back.metric == "energy" and back.label_scale == 0.02
        for k in PARAM_NAMES:
            assert np.array_equal(back.params[k], model.params[k])

    def test_refuses_other_width(self, tmp_path):
        PredictorModel.init(input_width=7, hidden=4).save(tmp_path / "m.json")
        with pytest.raises(ModelFormatError):
            PredictorModel.load(tmp_path / "m.json", expected_width=FEATURE_WIDTH)

    def test_refuses_foreign_file(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"format": "other"}))
        with pytest.raises(ModelFormatError):
            PredictorModel.load(tmp_path / "m.json")


class TestMetrics:
    def test_perfect(self):
        y = np.array([1.0, 2.0, 3.0, 4.0])
        m = evaluate(y, y)
        assert (m["within_10"], m["within_20"], m["ranking"], m["mape"]) == (1.0, 1.0, 1.0, 0.0)

    def test_five_percent_over(self):
        y = np.linspace(0.01, 1.0, 50)
        pred = 1.05 * y
        assert within(pred, y, 0.10) == 1.0
        assert within(pred, y, 0.049) == 0.0

    def test_ranking_ties_excluded(self):
        y = np.array([1.0, 1.0, 2.0])
        assert ranking_accuracy(np.array([5.0, 1.0, 9.0]), y, n_pairs=500) == 1.0

    def test_ranking_inverted(self):
        y = np.arange(1.0, 20.0)
        assert ranking_accuracy(-y, y) == 0.0


class TestCorrection:
    def test_rule(self):
        assert correct(0.010, 0.015) == 0.015
        assert correct(0.020, 0.015) == 0.020

    def test_floor_sweep(self, tx2):
        model = PredictorModel.init(hidden=8, seed=0, label_scale=1e-4)
        lut = analytic_lut(tx2)
        rng = np.random.default_rng(8)
        archs = [sample_valid(rng, DEFAULT_SPACE) for _ in range(1000)]
        raw = predict(model, archs, tx2, lut)
        for a, r in zip(archs[:200], raw[:200]):
            assert predict_corrected(model, a, tx2, lut) == max(float(r), lut_estimate(a, tx2, lut))
        floors = np.array([lut_estimate(a, tx2, lut) for a in archs])
        assert np.all(np.maximum(raw, floors) >= floors)

    def test_energy_model_refused(self, tx2):
        model = PredictorModel.init(hidden=4, metric="energy")
        with pytest.raises(ValueError):
            predict_corrected(model, Architecture((combine(64),)), tx2)
