"""Dataset ingestion, resampling, windowing/slicing, leave-one-user-out
splits, the on-disk "UMSD" dataset container, and a synthetic multi-sensor
generator for desk-scale verification.

Recordings are resampled onto a 32 Hz grid by default so a 0.25 s slice is
8 samples (a power of two, which survives the three stride-2 downsamples).
Windows are non-overlapping by default and labeled by majority vote; windows
without a >= 50% majority are dropped.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ContractError, IntegrityError, SchemaError
from .model import SensorSpec
from .rng import Rng

UMSD_MAGIC = b"UMSD"
UMSD_VERSION = 1


@dataclass
class SensorStream:
    """One sensor's uniformly sampled channel block (channels x samples)."""

    rate_hz: float
    values: np.ndarray

    @property
    def num_samples(self) -> int:
        return self.values.shape[1]

    @property
    def duration_s(self) -> float:
        return (self.num_samples - 1) / self.rate_hz if self.num_samples else 0.0


@dataclass
class RawRecording:
    """One user's continuous multi-sensor capture with per-timestep labels.

    Labels live on their own uniform timeline at ``label_rate_hz``.
    """

    user_id: str
    streams: dict[str, SensorStream]
    labels: np.ndarray
    label_rate_hz: float
    activity_set: list[str]


@dataclass
class SlicedSample:
    """One classification instance: K slices for each of N sensors."""

    slices: list[np.ndarray]  # per sensor, each (K, channels_i, samples_per_slice)
    label: int
    user_id: str
    window_seconds: float

    @property
    def K(self) -> int:
        return self.slices[0].shape[0]


@dataclass
class SlicedDataset:
    samples: list[SlicedSample]
    sensors: list[SensorSpec]
    activity_set: list[str]
    window_seconds: float

    @property
    def K(self) -> int:
        return self.samples[0].K if self.samples else 0

    @property
    def users(self) -> list[str]:
        return sorted({s.user_id for s in self.samples})


@dataclass
class DatasetSplit:
    train: list[SlicedSample]
    test: list[SlicedSample]
    held_out_user: str


# -- resampling ---------------------------------------------------------------


def _resample_stream(stream: SensorStream, target_hz: float) -> SensorStream:
    n = stream.num_samples
    if n < 2:
        raise ContractError("cannot resample a stream with fewer than 2 samples")
    duration = (n - 1) / stream.rate_hz
    src_t = np.arange(n) / stream.rate_hz
    out_n = int(np.floor(duration * target_hz)) + 1
    dst_t = np.arange(out_n) / target_hz
    values = np.stack([np.interp(dst_t, src_t, ch) for ch in stream.values])
    return SensorStream(rate_hz=target_hz, values=values.astype(stream.values.dtype))


def resample(recording: RawRecording, target_hz: float) -> RawRecording:
    """Linear interpolation onto a uniform grid; labels by nearest timestamp."""
    if target_hz <= 0:
        raise ContractError("target_hz must be positive")
    streams = {name: _resample_stream(s, target_hz) for name, s in recording.streams.items()}
    n_lbl = len(recording.labels)
    duration = (n_lbl - 1) / recording.label_rate_hz
    out_n = int(np.floor(duration * target_hz)) + 1
    dst_t = np.arange(out_n) / target_hz
    idx = np.clip(np.round(dst_t * recording.label_rate_hz).astype(int), 0, n_lbl - 1)
    return RawRecording(
        user_id=recording.user_id,
        streams=streams,
        labels=recording.labels[idx],
        label_rate_hz=target_hz,
        activity_set=list(recording.activity_set),
    )


# -- windowing ----------------------------------------------------------------


def window_and_slice(recording: RawRecording, window_seconds: float,
                     slice_seconds: float = 0.25, target_hz: float = 32.0,
                     stride_seconds: float | None = None,
                     sensor_order: list[str] | None = None) -> list[SlicedSample]:
    """Cut a recording into majority-labeled windows of K slices each."""
    samples_per_slice = target_hz * slice_seconds
    if abs(samples_per_slice - round(samples_per_slice)) > 1e-9:
        raise ContractError(
            f"target_hz * slice_seconds must be an integer, got {samples_per_slice}"
        )
    samples_per_slice = int(round(samples_per_slice))
    k = window_seconds / slice_seconds
    if abs(k - round(k)) > 1e-9:
        raise ContractError("window_seconds must be a multiple of slice_seconds")
    k = int(round(k))
    win_len = k * samples_per_slice
    stride = win_len if stride_seconds is None else int(round(stride_seconds * target_hz))
    if stride < 1:
        raise ContractError("stride must be positive")

    rec = resample(recording, target_hz)
    names = sensor_order or sorted(rec.streams)
    length = min(min(s.num_samples for s in rec.streams.values()), len(rec.labels))
    out = []
    for start in range(0, length - win_len + 1, stride):
        window_labels = rec.labels[start : start + win_len]
        counts = np.bincount(window_labels)
        label = int(counts.argmax())
        if counts[label] * 2 < win_len:
            continue  # no >= 50% majority
        slices = []
        for name in names:
            block = rec.streams[name].values[:, start : start + win_len]
            ch = block.shape[0]
            slices.append(
                block.reshape(ch, k, samples_per_slice).transpose(1, 0, 2).copy()
            )
        out.append(
            SlicedSample(slices=slices, label=label, user_id=rec.user_id,
                         window_seconds=window_seconds)
        )
    return out


def build_dataset(recordings: list[RawRecording], window_seconds: float,
                  slice_seconds: float = 0.25, target_hz: float = 32.0,
                  stride_seconds: float | None = None) -> SlicedDataset:
    """Window every recording and bundle samples with sensor metadata."""
    if not recordings:
        raise ContractError("no recordings supplied")
    names = sorted(recordings[0].streams)
    samples = []
    for rec in sorted(recordings, key=lambda r: r.user_id):
        samples.extend(
            window_and_slice(rec, window_seconds, slice_seconds, target_hz,
                             stride_seconds, sensor_order=names)
        )
    samples_per_slice = int(round(target_hz * slice_seconds))
    sensors = [
        SensorSpec(name, recordings[0].streams[name].values.shape[0], samples_per_slice)
        for name in names
    ]
    return SlicedDataset(
        samples=samples,
        sensors=sensors,
        activity_set=list(recordings[0].activity_set),
        window_seconds=window_seconds,
    )


# -- splits ---------------------------------------------------------------------


def leave_one_user_out(samples: list[SlicedSample], held_out_user: str) -> DatasetSplit:
    users = sorted({s.user_id for s in samples})
    if held_out_user not in users:
        raise ContractError(
            f"unknown user {held_out_user!r}; available users: {users}"
        )
    if len(users) < 2:
        raise ContractError("leave-one-user-out needs at least two users")
    train = [s for s in samples if s.user_id != held_out_user]
    test = [s for s in samples if s.user_id == held_out_user]
    return DatasetSplit(train=train, test=test, held_out_user=held_out_user)


# -- normalization ---------------------------------------------------------------


def compute_channel_stats(samples: list[SlicedSample]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-sensor, per-channel mean/std over a (train) sample list."""
    if not samples:
        raise ContractError("cannot compute statistics of an empty sample list")
    stats = []
    for i in range(len(samples[0].slices)):
        stacked = np.concatenate([s.slices[i] for s in samples], axis=0)  # (n*K, ch, sps)
        # float64 stats: checkpoints store them as JSON doubles, so computing
        # in double keeps fresh and resumed runs bit-identical
        mean = stacked.mean(axis=(0, 2), dtype=np.float64)
        std = np.sqrt(
            np.mean((stacked.astype(np.float64) - mean.reshape(1, -1, 1)) ** 2, axis=(0, 2))
        )
        std[std < 1e-8] = 1.0
        stats.append((mean, std))
    return stats


def apply_channel_stats(samples: list[SlicedSample],
                        stats: list[tuple[np.ndarray, np.ndarray]]) -> list[SlicedSample]:
    out = []
    for s in samples:
        slices = [
            ((block - mean.reshape(1, -1, 1)) / std.reshape(1, -1, 1)).astype(np.float32)
            for block, (mean, std) in zip(s.slices, stats)
        ]
        out.append(SlicedSample(slices, s.label, s.user_id, s.window_seconds))
    return out


# -- synthetic generator ----------------------------------------------------------


def synth_generate(num_users: int, num_classes: int, sensors: list[SensorSpec],
                   seconds_per_user: float, seed: int, noise_sigma: float = 0.1,
                   sample_rate: float = 32.0, segment_seconds: float = 12.0,
                   long_horizon: bool = False) -> list[RawRecording]:
    """Class-distinct sinusoids with per-user gain and Gaussian noise.

    Each class c emits sin(2*pi*f_c*t + phase) per channel, with f_c chosen
    so that every 1.5/3/6 s window sees an integer number of periods.  With
    ``long_horizon`` all classes share one carrier and differ only in a slow
    amplitude-modulation frequency, so short windows are ambiguous but long
    ones are separable.
    """
    if min(num_users, num_classes) < 1 or seconds_per_user <= 0:
        raise ContractError("counts and duration must be positive")
    rng = Rng(seed)
    seg_len = int(round(segment_seconds * sample_rate))
    total = int(round(seconds_per_user * sample_rate))
    t = np.arange(total) / sample_rate

    total_channels = sum(s.channels for s in sensors)
    recordings = []
    for u in range(num_users):
        gain = float(rng.uniform(0.8, 1.2))
        labels = np.zeros(total, dtype=np.int64)
        signal = np.zeros((total_channels, total))
        for seg_start in range(0, total, seg_len):
            seg = slice(seg_start, min(seg_start + seg_len, total))
            c = (seg_start // seg_len) % num_classes
            labels[seg] = c
            ts = t[seg]
            for j in range(total_channels):
                phase = 2.0 * np.pi * (c / num_classes + j / (3.0 * total_channels))
                if long_horizon:
                    # identical carrier for all classes; class identity lives
                    # only in the slow amplitude-modulation frequency, so
                    # short windows are ambiguous
                    carrier = np.sin(2.0 * np.pi * 8.0 * ts + 2.0 * np.pi * j / 7.0)
                    f_mod = (c + 1) / 24.0
                    envelope = 1.0 + 0.8 * np.sin(2.0 * np.pi * f_mod * ts)
                    base = carrier * envelope
                else:
                    f_c = 2.0 * ((c % 7) + 1)
                    base = np.sin(2.0 * np.pi * f_c * ts + phase)
                signal[j, seg] = gain * base
        if noise_sigma > 0:
            signal = signal + rng.normal(0.0, noise_sigma, signal.shape)
        streams = {}
        offset = 0
        for spec in sensors:
            streams[spec.name] = SensorStream(
                rate_hz=sample_rate,
                values=signal[offset : offset + spec.channels].astype(np.float32),
            )
            offset += spec.channels
        recordings.append(
            RawRecording(
                user_id=f"u{u + 1}",
                streams=streams,
                labels=labels,
                label_rate_hz=sample_rate,
                activity_set=[f"class{c}" for c in range(num_classes)],
            )
        )
    return recordings


def nearest_centroid_accuracy(train: list[SlicedSample], test: list[SlicedSample]) -> float:
    """Baseline: nearest class centroid on flattened raw windows."""
    def features(s: SlicedSample) -> np.ndarray:
        return np.concatenate([b.ravel() for b in s.slices])

    labels = sorted({s.label for s in train})
    centroids = np.stack(
        [np.mean([features(s) for s in train if s.label == c], axis=0) for c in labels]
    )
    correct = 0
    for s in test:
        d = np.linalg.norm(centroids - features(s), axis=1)
        if labels[int(d.argmin())] == s.label:
            correct += 1
    return correct / len(test)


def stack_sensor_arrays(samples: list[SlicedSample], dtype=np.float32) -> list[np.ndarray]:
    """Batch sample slices into one (B, K, channels, samples) array per sensor."""
    if not samples:
        raise ContractError("cannot batch an empty sample list")
    n_sensors = len(samples[0].slices)
    return [
        np.stack([s.slices[i] for s in samples]).astype(dtype)
        for i in range(n_sensors)
    ]


def labels_array(samples: list[SlicedSample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


# -- CSV ingestion -----------------------------------------------------------------

HHAR_COLUMNS = {"timestamp", "user", "gt", "x", "y", "z"}

# MHEALTH column layout (23 signal columns + trailing label), mapped to four
# logical sensors: chest acceleration, left-ankle gyroscope and magnetometer,
# and the 2-lead ECG.
MHEALTH_SENSORS = {
    "accelerometer": [0, 1, 2],
    "ecg": [3, 4],
    "gyroscope": [8, 9, 10],
    "magnetometer": [11, 12, 13],
}
MHEALTH_RATE_HZ = 50.0
MHEALTH_NUM_COLUMNS = 24


def _split_segments(mask: np.ndarray) -> list[tuple[int, int]]:
    """Contiguous True runs as (start, end) half-open index pairs."""
    runs = []
    start = None
    for i, flag in enumerate(mask):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def _ingest_hhar(path: Path) -> list[RawRecording]:
    """HHAR-style per-sensor CSV files with timestamp/user/gt/x/y/z columns.

    ``path`` is either a directory of ``<sensor>.csv`` files or one file
    (treated as a single sensor named after the file).  One recording is
    emitted per (user, contiguous labeled run); unlabeled rows are dropped.
    """
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise SchemaError(f"no CSV files in directory {path}")
    else:
        files = [path]

    per_sensor = {}
    for f in files:
        df = pd.read_csv(f)
        df.columns = [c.strip().lower() for c in df.columns]
        missing = HHAR_COLUMNS - set(df.columns)
        if missing:
            raise SchemaError(f"{f}: missing column(s) {sorted(missing)}")
        per_sensor[f.stem] = df

    activity_set = sorted(
        {gt for df in per_sensor.values() for gt in df["gt"].dropna().unique()}
    )
    class_index = {a: i for i, a in enumerate(activity_set)}
    users = sorted({u for df in per_sensor.values() for u in df["user"].unique()})

    recordings = []
    for user in users:
        streams = {}
        labels = None
        rate = None
        skip = False
        for name, df in per_sensor.items():
            rows = df[(df["user"] == user) & df["gt"].notna()]
            if len(rows) < 2:
                skip = True
                break
            ts = rows["timestamp"].to_numpy(dtype=np.float64)
            dt = np.median(np.diff(ts))
            stream_rate = 1.0 / dt if dt > 0 else 1.0
            values = rows[["x", "y", "z"]].to_numpy(dtype=np.float64).T
            streams[name] = SensorStream(rate_hz=stream_rate, values=values)
            if labels is None:
                labels = np.array([class_index[g] for g in rows["gt"]], dtype=np.int64)
                rate = stream_rate
        if skip or labels is None:
            continue
        recordings.append(
            RawRecording(user_id=str(user), streams=streams, labels=labels,
                         label_rate_hz=rate, activity_set=activity_set)
        )
    return recordings


def _ingest_mhealth(path: Path) -> list[RawRecording]:
    """MHEALTH-style whitespace log files: 23 signal columns + label.

    One file per user (user id taken from the file name); rows labeled 0
    (null class) are dropped; one recording per contiguous labeled run.
    """
    files = sorted(path.glob("*.log")) + sorted(path.glob("*.csv")) \
        if path.is_dir() else [path]
    if not files:
        raise SchemaError(f"no MHEALTH files at {path}")
    recordings = []
    for f in files:
        data = pd.read_csv(f, sep=r"\s+|,", engine="python", header=None).to_numpy()
        if data.shape[1] != MHEALTH_NUM_COLUMNS:
            raise SchemaError(
                f"{f}: expected {MHEALTH_NUM_COLUMNS} columns, found {data.shape[1]}"
            )
        labels_all = data[:, -1].astype(np.int64)
        for start, end in _split_segments(labels_all > 0):
            if end - start < 2:
                continue
            seg = data[start:end]
            streams = {
                name: SensorStream(rate_hz=MHEALTH_RATE_HZ,
                                   values=seg[:, cols].T.astype(np.float64))
                for name, cols in MHEALTH_SENSORS.items()
            }
            recordings.append(
                RawRecording(
                    user_id=f.stem,
                    streams=streams,
                    labels=seg[:, -1].astype(np.int64) - 1,  # labels are 1-based
                    label_rate_hz=MHEALTH_RATE_HZ,
                    activity_set=[f"activity{i + 1}" for i in range(12)],
                )
            )
    return recordings


def _ingest_generic(path: Path) -> list[RawRecording]:
    """Generic CSV with a JSON sidecar schema (same stem, .schema.json).

    Schema keys: sensors (name -> column list), label_column, user_column,
    rate_hz, optional activity_set.
    """
    sidecar = path.with_suffix(".schema.json")
    if not sidecar.exists():
        raise SchemaError(f"generic schema sidecar not found: {sidecar}")
    schema = json.loads(sidecar.read_text())
    df = pd.read_csv(path)
    needed = [c for cols in schema["sensors"].values() for c in cols]
    needed += [schema["label_column"], schema["user_column"]]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")

    labeled = df[df[schema["label_column"]].notna()]
    activity_set = schema.get(
        "activity_set", sorted(labeled[schema["label_column"]].astype(str).unique())
    )
    class_index = {a: i for i, a in enumerate(activity_set)}
    recordings = []
    for user, rows in labeled.groupby(schema["user_column"], sort=True):
        if len(rows) < 2:
            continue
        streams = {
            name: SensorStream(rate_hz=float(schema["rate_hz"]),
                               values=rows[cols].to_numpy(dtype=np.float64).T)
            for name, cols in schema["sensors"].items()
        }
        labels = np.array(
            [class_index[str(v)] for v in rows[schema["label_column"]]], dtype=np.int64
        )
        recordings.append(
            RawRecording(user_id=str(user), streams=streams, labels=labels,
                         label_rate_hz=float(schema["rate_hz"]),
                         activity_set=list(activity_set))
        )
    return recordings


def ingest_csv(path, schema: str) -> list[RawRecording]:
    """Parse raw CSV data into recordings. schema: 'hhar', 'mhealth', 'generic'."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"input path does not exist: {path}")
    schema = schema.lower()
    if schema == "hhar":
        return _ingest_hhar(path)
    if schema == "mhealth":
        return _ingest_mhealth(path)
    if schema == "generic":
        return _ingest_generic(path)
    raise SchemaError(f"unknown schema {schema!r} (expected hhar, mhealth, or generic)")


# -- UMSD container ------------------------------------------------------------------


def save_dataset(dataset: SlicedDataset, path):
    """Persist a sliced dataset: magic 'UMSD', version, JSON metadata, then
    one little-endian float32 block per sensor in declared order."""
    meta = {
        "sensors": [
            {"name": s.name, "channels": s.channels, "samples_per_slice": s.samples_per_slice}
            for s in dataset.sensors
        ],
        "K": dataset.K,
        "window_seconds": dataset.window_seconds,
        "classes": dataset.activity_set,
        "users": dataset.users,
        "num_samples": len(dataset.samples),
        "labels": [s.label for s in dataset.samples],
        "user_ids": [s.user_id for s in dataset.samples],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(UMSD_MAGIC)
    buf.write(struct.pack("<I", UMSD_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for i in range(len(dataset.sensors)):
        block = np.stack([s.slices[i] for s in dataset.samples]).astype("<f4")
        buf.write(block.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path) -> SlicedDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != UMSD_MAGIC:
        raise IntegrityError(f"{path}: not a UMSD container")
    version, json_len = struct.unpack("<II", raw[4:12])
    if version != UMSD_VERSION:
        raise IntegrityError(f"{path}: unsupported UMSD version {version}")
    if len(raw) < 12 + json_len:
        raise IntegrityError(f"{path}: truncated metadata block")
    meta = json.loads(raw[12 : 12 + json_len])
    sensors = [SensorSpec(**s) for s in meta["sensors"]]
    n, k = meta["num_samples"], meta["K"]

    offset = 12 + json_len
    blocks = []
    for spec in sensors:
        count = n * k * spec.channels * spec.samples_per_slice
        nbytes = count * 4
        if len(raw) < offset + nbytes:
            raise IntegrityError(f"{path}: truncated data block for sensor {spec.name!r}")
        block = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        blocks.append(block.reshape(n, k, spec.channels, spec.samples_per_slice))
        offset += nbytes
    if offset != len(raw):
        raise IntegrityError(f"{path}: trailing bytes after data blocks")

    samples = [
        SlicedSample(
            slices=[np.array(blocks[i][j]) for i in range(len(sensors))],
            label=int(meta["labels"][j]),
            user_id=meta["user_ids"][j],
            window_seconds=meta["window_seconds"],
        )
        for j in range(n)
    ]
    return SlicedDataset(samples=samples, sensors=sensors,
                         activity_set=meta["classes"],
                         window_seconds=meta["window_seconds"])
