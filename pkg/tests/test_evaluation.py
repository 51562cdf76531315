import numpy as np
import pytest

from umsnet.errors import ContractError
from umsnet.evaluation import (
    MetricsReport,
    accuracy,
    config_fingerprint,
    confusion_matrix,
    count_mult_adds,
    count_params,
    evaluate,
    macro_f1,
    mult_adds_breakdown,
    parameter_breakdown,
    predict,
    time_inference,
)
from umsnet.model import SensorSpec, build_model
from umsnet.rng import Rng


def metrics_oracle(predictions, labels, num_classes):
    """Brute-force confusion matrix, accuracy, and macro-F1."""
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, y in zip(predictions, labels):
        counts[y, p] += 1
    acc = sum(p == y for p, y in zip(predictions, labels)) / len(labels)
    f1s = []
    for c in range(num_classes):
        tp = counts[c, c]
        fp = counts[:, c].sum() - tp
        fn = counts[c, :].sum() - tp
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return counts, acc, float(np.mean(f1s))


TINY = dict(single_widths=[4, 4, 8, 8], multi_widths=[8, 8, 16, 16],
            model_dim=16, num_heads=2)


def tiny_model(variant="A", k=4, sensors=None, num_classes=3, **kw):
    sensors = sensors or [SensorSpec("acc", 3, 8)]
    return build_model(variant, sensors, num_classes, k, **{**TINY, **kw})


class TestMetrics:
    def test_confusion_matrix_oracle(self):
        preds = [0, 1, 1, 2, 0]
        labels = [0, 1, 2, 2, 1]
        expected, _, _ = metrics_oracle(preds, labels, 3)
        np.testing.assert_array_equal(confusion_matrix(preds, labels, 3), expected)

    def test_macro_f1_worked_example(self):
        # classes inferred from the data: F1 is 2/3 for both class 1 and 2
        macro, per_class = macro_f1([1, 1, 2], [1, 2, 2])
        assert macro == pytest.approx(2.0 / 3.0)
        assert per_class == pytest.approx([2.0 / 3.0, 2.0 / 3.0])
        # with an explicit class range the absent class 0 scores zero
        macro3, per_class3 = macro_f1([1, 1, 2], [1, 2, 2], 3)
        assert per_class3[0] == 0.0
        assert macro3 == pytest.approx(4.0 / 9.0)

    def test_accuracy_simple(self):
        assert accuracy([1, 2, 3], [1, 2, 0]) == pytest.approx(2.0 / 3.0)

    def test_perfect_and_zero(self):
        assert accuracy([0, 1], [0, 1]) == 1.0
        macro, _ = macro_f1([0, 0], [1, 1], 2)
        assert macro == 0.0

    def test_absent_class_scores_zero(self):
        macro, per_class = macro_f1([0, 0], [0, 0], 2)
        assert per_class == [1.0, 0.0]
        assert macro == 0.5

    def test_matches_oracle_on_random_sets(self):
        rng = Rng(0)
        for trial in range(200):
            c = int(rng.integers(2, 11))
            n = int(rng.integers(1, 40))
            preds = rng.integers(0, c, n)
            labels = rng.integers(0, c, n)
            counts, acc, f1 = metrics_oracle(preds, labels, c)
            np.testing.assert_array_equal(confusion_matrix(preds, labels, c), counts)
            assert accuracy(preds, labels) == pytest.approx(acc)
            assert macro_f1(preds, labels, c)[0] == pytest.approx(f1)

    def test_contract_violations(self):
        with pytest.raises(ContractError):
            accuracy([1], [1, 2])
        with pytest.raises(ContractError):
            accuracy([], [])
        with pytest.raises(ContractError):
            confusion_matrix([5], [0], 3)


class TestCostAccounting:
    def test_depthwise_dense_ratio(self):
        from umsnet.layers import Conv1d

        for c in (2, 8, 16, 64):
            dw = Conv1d(c, c, 3, groups=c, bias=False, rng=Rng(0))
            dense = Conv1d(c, c, 3, groups=1, bias=False, rng=Rng(0))
            assert dw.weight.data.size * c == dense.weight.data.size

    def test_single_conv_closed_form(self):
        # a stem conv alone: B*C_out*T_out*(C_in/g)*k
        _, model = tiny_model()
        stem = model.sensor_stacks[0].stem
        rows = dict(mult_adds_breakdown(model, batch=1))
        assert rows["sensor_stacks.0.stem"] == 1 * 4 * stem.out_channels * 8 * 3 * 1

    def test_linear_in_batch(self):
        _, model = tiny_model()
        assert count_mult_adds(model, batch=3) == 3 * count_mult_adds(model, batch=1)

    def test_head_and_embed_rows(self):
        config, model = tiny_model(k=4, num_classes=3)
        rows = dict(mult_adds_breakdown(model, batch=1))
        assert rows["head"] == 16 * 3
        assert rows["embed"] == 4 * 16 * 16  # B*K slices x multi_widths[3] x dim

    def test_attention_row_closed_form(self):
        config, model = tiny_model(k=4)
        rows = dict(mult_adds_breakdown(model, batch=1))
        seq, d = 5, 16
        assert rows["encoder.0.attn"] == 4 * seq * d * d + 2 * seq * seq * d
        assert rows["encoder.0.mlp"] == 2 * seq * d * (4 * d)

    def test_params_match_manual_sum(self):
        _, model = tiny_model()
        total = sum(p.data.size for p in model.parameters())
        assert count_params(model) == total
        assert sum(n for _, n in parameter_breakdown(model)) == total

    def test_variant_ordering(self):
        sizes = {}
        for v in ("A", "B", "C"):
            _, model = tiny_model(v)
            sizes[v] = (count_params(model), count_mult_adds(model))
        assert sizes["A"][0] < sizes["B"][0] < sizes["C"][0]
        assert sizes["A"][1] < sizes["B"][1] < sizes["C"][1]


class TestReport:
    def make_samples(self, model_config, n=8, seed=0):
        from umsnet.data import SlicedSample

        rng = Rng(seed)
        samples = []
        for i in range(n):
            slices = [
                rng.normal(size=(model_config.K, s.channels, s.samples_per_slice))
                .astype(np.float32)
                for s in model_config.sensors
            ]
            samples.append(SlicedSample(slices, i % model_config.num_classes, "u", 1.0))
        return samples

    def test_predict_shape_and_determinism(self):
        config, model = tiny_model()
        samples = self.make_samples(config)
        preds = predict(model, samples, batch_size=3)
        assert preds.shape == (8,)
        np.testing.assert_array_equal(preds, predict(model, samples, batch_size=5))

    def test_evaluate_report(self):
        config, model = tiny_model()
        samples = self.make_samples(config)
        report = evaluate(model, samples)
        assert isinstance(report, MetricsReport)
        assert 0.0 <= report.accuracy <= 1.0
        assert report.params == count_params(model)
        assert report.mult_adds == count_mult_adds(model)
        assert report.time_ms_median is None
        assert len(report.config_fingerprint) == 16
        blob = report.to_json()
        assert '"accuracy"' in blob

    def test_fingerprint_stable_and_sensitive(self):
        c1, _ = tiny_model()
        c2, _ = tiny_model()
        c3, _ = tiny_model(num_classes=4)
        assert config_fingerprint(c1) == config_fingerprint(c2)
        assert config_fingerprint(c1) != config_fingerprint(c3)

    def test_time_inference(self):
        _, model = tiny_model()
        ms = time_inference(model, repeats=5, warmup=1)
        assert ms > 0.0
        with pytest.raises(ContractError):
            time_inference(model, repeats=2)
