"""Evaluation-set construction: overlap ratios from dense match maps.

A pair (i, j) is scored by the fraction of pixels in each direction whose
match confidence exceeds a threshold; the pair's overlap is the smaller of
the two, and the overlap decides which benchmark bin the pair lands in.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

MAGIC = b"MMAP"
DEFAULT_THRESHOLD = 0.005

# (name, lower inclusive, upper exclusive); large's upper bound is inclusive
BINS = (("small", 0.05, 0.3), ("medium", 0.3, 0.55), ("large", 0.55, 0.8))
OUT_OF_RANGE = "out-of-range"


class MatchMapError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MatchMap:
    score: np.ndarray  # (H, W) float32 confidences in [0, 1]

    def __post_init__(self):
        s = np.asarray(self.score, dtype=np.float32)
        if s.ndim != 2:
            raise MatchMapError(f"score grid must be 2-D, got shape {s.shape}")
        if s.size and (not np.all(np.isfinite(s)) or s.min() < 0 or s.max() > 1):
            raise MatchMapError("scores must lie in [0, 1]")
        object.__setattr__(self, "score", s)

    @property
    def width(self):
        return self.score.shape[1]

    @property
    def height(self):
        return self.score.shape[0]

    def __eq__(self, other):
        return isinstance(other, MatchMap) and np.array_equal(self.score, other.score)


@dataclass(frozen=True)
class OverlapRecord:
    pair_id: str
    r12: float
    r21: float
    r_overlap: float
    bin: str

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def valid_ratio(m, threshold=DEFAULT_THRESHOLD):
    """Fraction of pixels whose score is strictly above ``threshold``."""
    if m.score.size == 0:
        return 0.0
    return float(np.count_nonzero(m.score > threshold)) / m.score.size


def bin_overlap(r):
    r = float(r)
    for name, lo, hi in BINS:
        if lo <= r < hi or (name == "large" and r == hi):
            return name
    return OUT_OF_RANGE


def overlap_ratio(m12, m21, threshold=DEFAULT_THRESHOLD, pair_id=""):
    r12 = valid_ratio(m12, threshold)
    r21 = valid_ratio(m21, threshold)
    r = min(r12, r21)
    return OverlapRecord(str(pair_id), r12, r21, r, bin_overlap(r))


def write_matchmap(m, path):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", m.width, m.height))
        f.write(m.score.astype("<f4").tobytes())


def read_matchmap(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise MatchMapError(f"bad magic in {path}: expected 'MMAP'")
    if len(data) < 12:
        raise MatchMapError(f"truncated header in {path}")
    w, h = struct.unpack("<II", data[4:12])
    payload = data[12:]
    if len(payload) != 4 * w * h:
        raise MatchMapError(f"size mismatch in {path}: header says {w}x{h} "
                            f"({4 * w * h} bytes), payload has {len(payload)} bytes")
    score = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    return MatchMap(score.astype(np.float32))


def bin_counts(records):
    counts = {name: 0 for name, _, _ in BINS}
    counts[OUT_OF_RANGE] = 0
    for r in records:
        counts[r.bin] += 1
    return counts


def write_manifest(records, path):
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_manifest(path):
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(OverlapRecord(**json.loads(line)))
    return out
