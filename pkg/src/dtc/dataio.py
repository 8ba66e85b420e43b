"""Datasets: UCR text files, per-sequence z-normalisation, synthetic bipolar events, checkpoints."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .tae import TaeConfig, TaeModel

DATA_DIR_ENV = "DTC_DATA_DIR"
ZNORM_EPS = 1e-8


@dataclass
class Dataset:
    sequences: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    # per-sequence list of (start, stop) event windows, synthetic data only
    windows: list | None = None
    label_names: tuple = ()

    def __post_init__(self):
        self.sequences = np.atleast_2d(np.asarray(self.sequences, dtype=np.float64))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if self.labels.shape != (len(self.sequences),):
                raise ValueError("labels must have one entry per sequence")
            if not np.isin(self.labels, (0, 1)).all():
                raise ValueError("labels must be binary")

    def __len__(self):
        return len(self.sequences)

    @property
    def length(self):
        return self.sequences.shape[1]

    @property
    def ratio(self):
        """Positive-to-negative class ratio r, or None without labels."""
        if self.labels is None:
            return None
        neg = int(np.sum(self.labels == 0))
        pos = int(np.sum(self.labels == 1))
        return pos / neg if neg else float("inf")

    @property
    def meta(self):
        return len(self), self.length, self.ratio

    def subset(self, idx):
        idx = np.asarray(idx)
        return replace(
            self,
            sequences=self.sequences[idx],
            labels=None if self.labels is None else self.labels[idx],
            windows=None if self.windows is None else [self.windows[i] for i in idx],
        )


class DataFormatError(ValueError):
    pass


def _split(line):
    if "\t" in line:
        return line.strip().split("\t")
    if "," in line:
        return line.strip().split(",")
    return line.split()


def _read_ucr(path):
    rows, labels = [], []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = _split(line)
            if len(fields) < 2:
                raise DataFormatError(f"{path}:{lineno}: expected a label followed by values")
            try:
                values = [float(v) for v in fields]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-numeric field ({exc})") from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DataFormatError(f"{path}:{lineno}: row has {len(values) - 1} values, expected {width - 1}")
            labels.append(values[0])
            rows.append(values[1:])
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return np.array(rows), np.array(labels)


def load_ucr(train_path, test_path=None, name=None):
    """Concatenate the train and test splits of a two-class UCR dataset.

    Class labels are remapped to {0, 1} in sorted order of the original values.
    """
    X, y = _read_ucr(train_path)
    if test_path is not None:
        X2, y2 = _read_ucr(test_path)
        if X2.shape[1] != X.shape[1]:
            raise DataFormatError(f"{test_path}: length {X2.shape[1]} differs from train length {X.shape[1]}")
        X, y = np.vstack([X, X2]), np.concatenate([y, y2])
    classes = np.unique(y)
    if len(classes) > 2:
        raise DataFormatError(f"expected at most 2 classes, found {len(classes)}: {classes.tolist()}")
    labels = np.searchsorted(classes, y)
    if name is None:
        name = Path(train_path).stem.replace("_TRAIN", "")
    return Dataset(X, labels, name=name, label_names=tuple(float(c) for c in classes))


def ucr_paths(name, root=None):
    """Locate ``<root>/<name>/<name>_TRAIN[.tsv|.txt]`` and its TEST sibling."""
    root = Path(root or os.environ.get(DATA_DIR_ENV, "."))
    for folder in (root / name, root):
        for suffix in (".tsv", ".txt", ""):
            train, test = folder / f"{name}_TRAIN{suffix}", folder / f"{name}_TEST{suffix}"
            if train.is_file() and test.is_file():
                return train, test
    return None


def znormalize_array(X):
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=-1, keepdims=True)
    sd = X.std(axis=-1, keepdims=True)
    out = (X - mu) / np.where(sd > ZNORM_EPS, sd, 1.0)
    out[np.broadcast_to(sd <= ZNORM_EPS, out.shape)] = 0.0
    return out


def znormalize(dataset: Dataset) -> Dataset:
    return replace(dataset, sequences=znormalize_array(dataset.sequences))


# --------------------------------------------------------------------------
# synthetic bipolar events
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthParams:
    ar_coef: float = 0.3
    walk_scale: float = 0.01
    width_range: tuple = (12.0, 30.0)
    amplitude_range: tuple = (3.0, 5.0)
    two_event_prob: float = 0.3


def bipolar_pulse(length, center, width, amplitude):
    """Positive lobe then negative lobe, peaks of +/- amplitude at center -/+ width."""
    u = (np.arange(length) - center) / width
    return amplitude * np.sqrt(np.e) * (-u) * np.exp(-0.5 * u * u)


def colored_noise(rng, n, length, ar_coef=0.3, walk_scale=0.01):
    """AR(1) noise with unit marginal variance plus a slow random walk."""
    e = rng.standard_normal((n, length)) * np.sqrt(1.0 - ar_coef**2)
    x = np.empty((n, length))
    x[:, 0] = rng.standard_normal(n)
    for t in range(1, length):
        x[:, t] = ar_coef * x[:, t - 1] + e[:, t]
    return x + walk_scale * np.cumsum(rng.standard_normal((n, length)), axis=1)


def synth_events(n, L=1140, event_rate=0.55, seed=0, params: SynthParams = SynthParams()):
    """Turbulent-looking noise, with 1-2 bipolar pulses injected into positive sequences.

    ``windows[i]`` lists the ``(start, stop)`` sample ranges of the pulses in
    sequence ``i`` (empty for negatives).
    """
    if n < 1 or L < 1:
        raise ValueError("n and L must be positive")
    rng = np.random.default_rng(seed)
    labels = (rng.random(n) < event_rate).astype(int)
    X = colored_noise(rng, n, L, params.ar_coef, params.walk_scale)
    windows = []
    for i in range(n):
        wins = []
        if labels[i]:
            count = 2 if rng.random() < params.two_event_prob else 1
            for _ in range(count):
                width = rng.uniform(*params.width_range)
                half = 3.0 * width
                for _attempt in range(50):
                    center = rng.uniform(half, max(half + 1.0, L - half))
                    win = (max(0, int(np.floor(center - half))), min(L, int(np.ceil(center + half))))
                    if all(win[1] <= a or b <= win[0] for a, b in wins):
                        break
                else:
                    continue  # no room for another pulse
                amp = rng.uniform(*params.amplitude_range)
                X[i] += bipolar_pulse(L, center, width, amp)
                wins.append(win)
        windows.append(sorted(wins))
    return Dataset(X, labels, name=f"synth_events(n={n},L={L},rate={event_rate},seed={seed})", windows=windows)


def in_any_window(t, windows):
    return any(a <= t < b for a, b in windows)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"DTCCKPT\x00"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: TaeModel
    centroids: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, model: TaeModel, centroids=None, extra=None):
    """Versioned container: fixed header, sorted-key JSON index, raw float64 payload, sha256."""
    tensors = [(k, p.value) for k, p in sorted(model.params.items())]
    if centroids is not None:
        tensors.append(("centroids", np.asarray(centroids, dtype=np.float64)))
    index, chunks, offset = [], [], 0
    for name, arr in tensors:
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps(
        {"config": model.config.to_dict(), "tensors": index, "extra": extra or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    payload = b"".join(chunks)
    body = _HEAD.pack(MAGIC, VERSION, len(header)) + header + payload
    data = body + hashlib.sha256(body).digest()
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size + 32:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    body, digest = data[:-32], data[-32:]
    magic, version, hlen = _HEAD.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt or truncated")
    try:
        header = json.loads(body[_HEAD.size:_HEAD.size + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    payload = body[_HEAD.size + hlen:]
    arrays = {}
    for t in header["tensors"]:
        start, stop = t["offset"], t["offset"] + t["nbytes"]
        if stop > len(payload):
            raise CheckpointError(f"{path}: tensor {t['name']} extends past end of file")
        arrays[t["name"]] = np.frombuffer(payload[start:stop], dtype="<f8").reshape(t["shape"]).astype(np.float64)
    centroids = arrays.pop("centroids", None)
    config = TaeConfig.from_dict(header["config"])
    model = TaeModel(config, {k: nn.Parameter(v) for k, v in arrays.items()})
    return Checkpoint(model, centroids, header.get("extra", {}))
