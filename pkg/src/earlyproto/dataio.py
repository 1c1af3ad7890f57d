"""Segment-feature datasets: a synthetic paired-ambiguity generator and the
EVPF binary feature file format.

EVPF layout (little-endian)::

    "EVPF" | version u32 = 1 | k_classes u32 | d_enc u32 | n_records u64
    per record: label u32 | T u32 | T * d_enc float64
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .diffcore import ConfigError

MAGIC = b"EVPF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")
_RECORD = struct.Struct("<II")


class ParseError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass
class SegmentFeatureSequence:
    features: np.ndarray  # [T, d_enc]
    label: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be [T>=1, d_enc], got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN or Inf")

    @property
    def T(self):
        return self.features.shape[0]


@dataclass
class Dataset:
    samples: list[SegmentFeatureSequence]
    k_classes: int
    d_enc: int

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def stacked(self):
        """``(features [N, T, d_enc], labels [N])``; requires uniform T."""
        lengths = {s.T for s in self.samples}
        if len(lengths) != 1:
            raise ConfigError(f"samples have mixed lengths {sorted(lengths)}")
        return (np.stack([s.features for s in self.samples]),
                np.array([s.label for s in self.samples], dtype=np.int64))


@dataclass(frozen=True)
class SynthSpec:
    k_classes: int = 6
    t_segments: int = 10
    d_enc: int = 16
    noise_sigma: float = 1.25
    ambiguity_depth: int = 4
    n_train: int = 480
    n_val: int = 1200
    seed: int = 0
    min_gap: float = 1.0

    def validate(self):
        if self.k_classes < 2 or self.k_classes % 2:
            raise ConfigError(f"paired classes need an even k_classes >= 2, got {self.k_classes}")
        if not 0 <= self.ambiguity_depth < self.t_segments:
            raise ConfigError(f"ambiguity_depth must be in [0, {self.t_segments}), got {self.ambiguity_depth}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.d_enc < 1 or self.n_train < 1 or self.n_val < 0:
            raise ConfigError("d_enc and n_train must be >= 1, n_val >= 0")
        return self


def class_trajectories(spec: SynthSpec) -> np.ndarray:
    """Mean feature path per class, ``[K, T, d_enc]``.

    Classes ``2p`` and ``2p+1`` share the first ``ambiguity_depth`` segments
    exactly; every other pair of (class, segment) means is at least
    ``min_gap`` apart. Paths are smooth random walks so that class identity
    lives in how features evolve.
    """
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0])
    K, T, D, a = spec.k_classes, spec.t_segments, spec.d_enc, spec.ambiguity_depth
    for _ in range(1000):
        start = rng.normal(0.0, 1.0, size=(K // 2, D))
        steps = rng.normal(0.0, 1.0 / np.sqrt(2.0), size=(K, T, D))
        steps[1::2, :a] = steps[0::2, :a]  # shared prefix increments within a pair
        traj = np.repeat(start, 2, axis=0)[:, None, :] + np.cumsum(steps, axis=1)
        if _min_gap(traj, a) >= spec.min_gap:
            return traj
    raise ConfigError("could not draw trajectories satisfying min_gap; raise d_enc")


def _min_gap(traj, a):
    K, T = traj.shape[:2]
    best = np.inf
    for t in range(T):
        diff = traj[:, None, t] - traj[None, :, t]
        dist = np.sqrt((diff**2).sum(-1))
        for i in range(K):
            for j in range(i + 1, K):
                if t < a and j == i + 1 and i % 2 == 0:
                    continue
                best = min(best, dist[i, j])
    return best


def _draw(spec, traj, n, stream):
    rng = np.random.default_rng([spec.seed, stream])
    labels = np.arange(n) % spec.k_classes
    rng.shuffle(labels)
    noise = rng.normal(0.0, 1.0, size=(n,) + traj.shape[1:]) * spec.noise_sigma
    return Dataset([SegmentFeatureSequence(traj[y] + noise[i], int(y)) for i, y in enumerate(labels)],
                   spec.k_classes, spec.d_enc)


def gen_synthetic(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    """Class-balanced (train, val) splits drawn from independent RNG streams."""
    traj = class_trajectories(spec)
    return _draw(spec, traj, spec.n_train, 1), _draw(spec, traj, spec.n_val, 2)


def nearest_trajectory(spec: SynthSpec, features, steps):
    """Label of the class path closest to ``features`` on the given segment indices."""
    traj = class_trajectories(spec)[:, steps]
    d = ((traj - np.asarray(features)[steps]) ** 2).sum(axis=(1, 2))
    return int(np.argmin(d))


# ---------------------------------------------------------------- EVPF files


def write_feature_file(dataset: Dataset, path):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dataset.k_classes, dataset.d_enc, len(dataset)))
        for s in dataset:
            if s.features.shape[1] != dataset.d_enc:
                raise ValueError(f"sample width {s.features.shape[1]} != d_enc {dataset.d_enc}")
            fh.write(_RECORD.pack(s.label, s.T))
            fh.write(np.ascontiguousarray(s.features, dtype="<f8").tobytes())


def read_feature_file(path) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_features(buf)


def parse_features(buf: bytes) -> Dataset:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise ParseError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", 0)
    if len(buf) < _HEADER.size:
        raise ParseError("truncated header", len(buf))
    _, version, k, d_enc, n = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    if k < 1 or d_enc < 1:
        raise ParseError(f"invalid k_classes={k} or d_enc={d_enc}", 8)
    off = _HEADER.size
    samples = []
    for i in range(n):
        if off + _RECORD.size > len(buf):
            raise ParseError(f"record {i}: truncated record header", off)
        label, T = _RECORD.unpack_from(buf, off)
        if T == 0:
            raise ParseError(f"record {i}: T must be >= 1", off + 4)
        if label >= k:
            raise ParseError(f"record {i}: label {label} outside [0, {k})", off)
        off += _RECORD.size
        nbytes = T * d_enc * 8
        if off + nbytes > len(buf):
            raise ParseError(f"record {i}: truncated payload", off)
        feats = np.frombuffer(buf, dtype="<f8", count=T * d_enc, offset=off).reshape(T, d_enc)
        if not np.all(np.isfinite(feats)):
            raise ParseError(f"record {i}: non-finite feature value", off)
        samples.append(SegmentFeatureSequence(feats.astype(np.float64), int(label)))
        off += nbytes
    if off != len(buf):
        raise ParseError(f"{len(buf) - off} trailing bytes", off)
    return Dataset(samples, k, d_enc)
