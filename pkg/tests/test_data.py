import json

import numpy as np
import pytest

from umsnet.data import (
    RawRecording,
    SensorStream,
    SlicedDataset,
    apply_channel_stats,
    build_dataset,
    compute_channel_stats,
    ingest_csv,
    labels_array,
    leave_one_user_out,
    load_dataset,
    nearest_centroid_accuracy,
    resample,
    save_dataset,
    stack_sensor_arrays,
    synth_generate,
    window_and_slice,
)
from umsnet.errors import ContractError, IntegrityError, SchemaError
from umsnet.model import SensorSpec
from umsnet.rng import Rng


def make_recording(user="u1", seconds=8.0, rate=32.0, channels=2, label=0, num_classes=2):
    n = int(seconds * rate)
    values = Rng(1).normal(size=(channels, n)).astype(np.float32)
    return RawRecording(
        user_id=user,
        streams={"acc": SensorStream(rate_hz=rate, values=values)},
        labels=np.full(n, label, dtype=np.int64),
        label_rate_hz=rate,
        activity_set=[f"class{c}" for c in range(num_classes)],
    )


class TestResample:
    def test_linear_ramp_interpolation_oracle(self):
        # a ramp at 4 Hz resampled to 8 Hz must hit the midpoints exactly
        src = np.arange(5, dtype=np.float64)[None, :]
        rec = RawRecording("u", {"s": SensorStream(4.0, src)},
                           labels=np.zeros(5, dtype=np.int64), label_rate_hz=4.0,
                           activity_set=["a"])
        out = resample(rec, 8.0)
        np.testing.assert_allclose(
            out.streams["s"].values[0], np.arange(9) * 0.5, atol=1e-12
        )

    def test_identity_at_same_rate(self):
        rec = make_recording()
        out = resample(rec, 32.0)
        np.testing.assert_allclose(out.streams["acc"].values,
                                   rec.streams["acc"].values, atol=1e-6)

    def test_labels_nearest(self):
        labels = np.array([0, 0, 1, 1], dtype=np.int64)
        rec = RawRecording("u", {"s": SensorStream(2.0, np.zeros((1, 4)))},
                           labels=labels, label_rate_hz=2.0, activity_set=["a", "b"])
        out = resample(rec, 4.0)
        np.testing.assert_array_equal(out.labels, [0, 0, 0, 1, 1, 1, 1])

    def test_rejects_bad_rate(self):
        with pytest.raises(ContractError):
            resample(make_recording(), 0.0)


class TestWindowing:
    def test_window_geometry(self):
        samples = window_and_slice(make_recording(seconds=8.0), window_seconds=1.5)
        # 256 samples, 48-sample windows, non-overlapping -> 5 windows
        assert len(samples) == 5
        for s in samples:
            assert len(s.slices) == 1
            assert s.slices[0].shape == (6, 2, 8)  # K=6 slices, 2 ch, 8 samples

    def test_slice_layout_is_contiguous_time(self):
        rec = make_recording(seconds=2.0, channels=1)
        rec.streams["acc"].values[0] = np.arange(64, dtype=np.float32)
        samples = window_and_slice(rec, window_seconds=1.0)
        assert len(samples) == 2
        np.testing.assert_array_equal(
            samples[0].slices[0].reshape(-1), np.arange(32)
        )
        np.testing.assert_array_equal(samples[0].slices[0][1, 0], np.arange(8, 16))

    def test_majority_label(self):
        rec = make_recording(seconds=2.0)
        rec.labels[:40] = 1  # 40 of first 48 -> majority class 1
        samples = window_and_slice(rec, window_seconds=1.5)
        assert samples[0].label == 1

    def test_no_majority_dropped(self):
        rec = make_recording(seconds=1.5, num_classes=3)
        rec.labels[:16] = 0
        rec.labels[16:32] = 1
        rec.labels[32:] = 2  # 16/16/16: no >= 50% majority
        assert window_and_slice(rec, window_seconds=1.5) == []

    def test_exact_half_majority_kept(self):
        rec = make_recording(seconds=1.5)
        rec.labels[:24] = 1  # exactly 50%
        samples = window_and_slice(rec, window_seconds=1.5)
        assert len(samples) == 1

    def test_overlapping_stride(self):
        # 128 samples, 48-sample windows, 24-sample hop -> starts 0/24/48/72
        samples = window_and_slice(make_recording(seconds=4.0), window_seconds=1.5,
                                   stride_seconds=0.75)
        assert len(samples) == 4

    def test_window_must_divide_into_slices(self):
        with pytest.raises(ContractError):
            window_and_slice(make_recording(), window_seconds=1.1)


class TestSplitsAndStats:
    def build(self):
        recs = [make_recording(user=f"u{i}", label=i % 2) for i in range(3)]
        return build_dataset(recs, window_seconds=1.5)

    def test_build_dataset(self):
        ds = self.build()
        assert ds.users == ["u0", "u1", "u2"]
        assert ds.K == 6
        assert [s.name for s in ds.sensors] == ["acc"]

    def test_leave_one_user_out(self):
        ds = self.build()
        split = leave_one_user_out(ds.samples, "u1")
        assert {s.user_id for s in split.train} == {"u0", "u2"}
        assert {s.user_id for s in split.test} == {"u1"}
        with pytest.raises(ContractError):
            leave_one_user_out(ds.samples, "nobody")

    def test_channel_stats_two_pass_oracle(self):
        ds = self.build()
        stats = compute_channel_stats(ds.samples)
        stacked = np.concatenate([s.slices[0] for s in ds.samples], axis=0)
        for c in range(2):
            vals = stacked[:, c, :].ravel()
            mean = vals.sum() / vals.size
            var = ((vals - mean) ** 2).sum() / vals.size
            assert abs(stats[0][0][c] - mean) < 1e-6
            assert abs(stats[0][1][c] - np.sqrt(var)) < 1e-6

    def test_apply_stats_normalizes(self):
        ds = self.build()
        normed = apply_channel_stats(ds.samples, compute_channel_stats(ds.samples))
        stacked = np.concatenate([s.slices[0] for s in normed], axis=0)
        np.testing.assert_allclose(stacked.mean(axis=(0, 2)), 0.0, atol=1e-5)
        np.testing.assert_allclose(stacked.std(axis=(0, 2)), 1.0, atol=1e-4)

    def test_constant_channel_guard(self):
        ds = self.build()
        for s in ds.samples:
            s.slices[0][:, 1, :] = 3.0
        stats = compute_channel_stats(ds.samples)
        assert stats[0][1][1] == 1.0  # zero std replaced, no division blowup

    def test_stacking(self):
        ds = self.build()
        arrays = stack_sensor_arrays(ds.samples)
        labels = labels_array(ds.samples)
        assert arrays[0].shape == (len(ds.samples), 6, 2, 8)
        assert labels.shape == (len(ds.samples),)


class TestSynthetic:
    SENSORS = [SensorSpec("acc", 3, 8), SensorSpec("gyr", 3, 8)]

    def test_shapes_and_labels(self):
        recs = synth_generate(3, 4, self.SENSORS, seconds_per_user=48.0, seed=0)
        assert len(recs) == 3
        rec = recs[0]
        assert set(rec.streams) == {"acc", "gyr"}
        assert rec.streams["acc"].values.shape == (3, 48 * 32)
        assert set(np.unique(rec.labels)) == {0, 1, 2, 3}

    def test_deterministic(self):
        a = synth_generate(2, 2, self.SENSORS, 24.0, seed=7)
        b = synth_generate(2, 2, self.SENSORS, 24.0, seed=7)
        np.testing.assert_array_equal(a[0].streams["acc"].values,
                                      b[0].streams["acc"].values)

    def test_users_differ(self):
        recs = synth_generate(2, 2, self.SENSORS, 24.0, seed=7)
        assert not np.array_equal(recs[0].streams["acc"].values,
                                  recs[1].streams["acc"].values)

    def test_classes_separable_short_window(self):
        recs = synth_generate(2, 3, self.SENSORS, 72.0, seed=3)
        ds = build_dataset(recs, window_seconds=1.5)
        split = leave_one_user_out(ds.samples, "u2")
        assert nearest_centroid_accuracy(split.train, split.test) > 0.9

    def test_long_horizon_ambiguous_short_window(self):
        recs = synth_generate(2, 3, self.SENSORS, 144.0, seed=3,
                              segment_seconds=24.0, long_horizon=True)
        ds_short = build_dataset(recs, window_seconds=1.5)
        split = leave_one_user_out(ds_short.samples, "u2")
        acc_short = nearest_centroid_accuracy(split.train, split.test)
        ds_long = build_dataset(recs, window_seconds=6.0)
        split = leave_one_user_out(ds_long.samples, "u2")
        acc_long = nearest_centroid_accuracy(split.train, split.test)
        assert acc_long >= acc_short


class TestContainer:
    def roundtrip(self, tmp_path):
        recs = synth_generate(2, 2, [SensorSpec("acc", 2, 8)], 12.0, seed=1)
        ds = build_dataset(recs, window_seconds=1.5)
        path = tmp_path / "data.umsd"
        save_dataset(ds, path)
        return ds, path

    def test_roundtrip_exact(self, tmp_path):
        ds, path = self.roundtrip(tmp_path)
        loaded = load_dataset(path)
        assert len(loaded.samples) == len(ds.samples)
        assert loaded.activity_set == ds.activity_set
        assert loaded.window_seconds == ds.window_seconds
        for a, b in zip(loaded.samples, ds.samples):
            assert a.label == b.label and a.user_id == b.user_id
            np.testing.assert_array_equal(a.slices[0], b.slices[0].astype(np.float32))

    def test_bad_magic(self, tmp_path):
        _, path = self.roundtrip(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError):
            load_dataset(path)

    def test_truncation_detected(self, tmp_path):
        _, path = self.roundtrip(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(IntegrityError):
            load_dataset(path)

    def test_trailing_garbage_detected(self, tmp_path):
        _, path = self.roundtrip(tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(IntegrityError):
            load_dataset(path)

    def test_bad_version(self, tmp_path):
        _, path = self.roundtrip(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError):
            load_dataset(path)


class TestIngestion:
    def test_hhar_directory(self, tmp_path):
        import pandas as pd

        n = 200
        for sensor in ("acc", "gyro"):
            rows = []
            for user in ("a", "b"):
                for i in range(n):
                    rows.append({"timestamp": i / 50.0, "user": user,
                                 "gt": "walk" if i < n // 2 else "sit",
                                 "x": 0.1, "y": 0.2, "z": 0.3})
            pd.DataFrame(rows).to_csv(tmp_path / f"{sensor}.csv", index=False)
        recs = ingest_csv(tmp_path, "hhar")
        assert len(recs) == 2
        assert set(recs[0].streams) == {"acc", "gyro"}
        assert recs[0].activity_set == ["sit", "walk"]
        assert abs(recs[0].streams["acc"].rate_hz - 50.0) < 1e-6

    def test_hhar_missing_column(self, tmp_path):
        import pandas as pd

        pd.DataFrame({"timestamp": [0], "user": ["a"], "x": [0.0]}).to_csv(
            tmp_path / "acc.csv", index=False
        )
        with pytest.raises(SchemaError):
            ingest_csv(tmp_path, "hhar")

    def test_mhealth_file(self, tmp_path):
        rng = Rng(0)
        rows = rng.normal(size=(300, 24))
        rows[:, -1] = np.repeat([1, 0, 2], 100)  # label 0 = null class
        path = tmp_path / "subject1.log"
        np.savetxt(path, rows, delimiter="\t")
        recs = ingest_csv(path, "mhealth")
        assert len(recs) == 2  # two contiguous labeled runs
        assert recs[0].labels[0] == 0 and recs[1].labels[0] == 1  # 1-based shifted
        assert set(recs[0].streams) == {"accelerometer", "ecg", "gyroscope",
                                        "magnetometer"}
        assert recs[0].streams["ecg"].values.shape == (2, 100)

    def test_mhealth_wrong_width(self, tmp_path):
        path = tmp_path / "subject1.log"
        np.savetxt(path, np.zeros((10, 5)), delimiter="\t")
        with pytest.raises(SchemaError):
            ingest_csv(path, "mhealth")

    def test_generic_with_sidecar(self, tmp_path):
        import pandas as pd

        df = pd.DataFrame({
            "ax": np.arange(100, dtype=float), "ay": np.arange(100, dtype=float),
            "label": ["run"] * 50 + ["walk"] * 50, "subject": ["s1"] * 100,
        })
        csv = tmp_path / "custom.csv"
        df.to_csv(csv, index=False)
        schema = {"sensors": {"acc": ["ax", "ay"]}, "label_column": "label",
                  "user_column": "subject", "rate_hz": 32.0}
        csv.with_suffix(".schema.json").write_text(json.dumps(schema))
        recs = ingest_csv(csv, "generic")
        assert len(recs) == 1
        assert recs[0].streams["acc"].values.shape == (2, 100)
        assert recs[0].activity_set == ["run", "walk"]

    def test_generic_missing_sidecar(self, tmp_path):
        csv = tmp_path / "x.csv"
        csv.write_text("a,b\n1,2\n")
        with pytest.raises(SchemaError):
            ingest_csv(csv, "generic")

    def test_unknown_schema(self, tmp_path):
        csv = tmp_path / "x.csv"
        csv.write_text("a\n1\n")
        with pytest.raises(SchemaError):
            ingest_csv(csv, "other")

    def test_missing_path(self, tmp_path):
        with pytest.raises(SchemaError):
            ingest_csv(tmp_path / "missing.csv", "hhar")
