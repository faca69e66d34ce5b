"""Detector model and time-tag streams (TTAG1 files)."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

OUTCOME_CODES = {"unanalyzed": 0, "H": 1, "V": 2, "D": 3, "A": 4, "R": 5, "L": 6}
OUTCOME_LABELS = {v: k for k, v in OUTCOME_CODES.items()}


@dataclass(frozen=True)
class DetectorParams:
    """Single-photon detector; times in ps, dark counts in Hz.

    ``efficiency`` is the whole path from the source to a click. At a few
    percent the dead time barely correlates neighbouring cycles.
    """

    efficiency: float = 0.1
    jitter_sigma: float = 200.0
    dead_time: float = 20_000.0
    dark_count_rate: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must be in [0, 1], got {self.efficiency}")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        if self.dead_time < 0 or self.dark_count_rate < 0:
            raise ValueError("dead_time and dark_count_rate must be >= 0")


@dataclass
class TimeTagStream:
    """Merged detector clicks sorted by time (int64 ps)."""

    time: np.ndarray
    channel: np.ndarray
    outcome: np.ndarray

    def __len__(self):
        return len(self.time)

    def channel_times(self, *channels: int) -> np.ndarray:
        return self.time[np.isin(self.channel, channels)]

    @classmethod
    def merge(cls, parts: list["TimeTagStream"]) -> "TimeTagStream":
        t = np.concatenate([p.time for p in parts])
        order = np.argsort(t, kind="stable")
        return cls(t[order], np.concatenate([p.channel for p in parts])[order],
                   np.concatenate([p.outcome for p in parts])[order])


@njit(cache=True)
def _dead_time_mask(t, dead):
    keep = np.zeros(len(t), np.bool_)
    last = np.iinfo(np.int64).min // 2
    for i in range(len(t)):
        if t[i] - last >= dead:
            keep[i] = True
            last = t[i]
    return keep


def apply_dead_time(times: np.ndarray, dead_time: float) -> np.ndarray:
    """Non-paralyzable dead time on one sorted channel; returns a keep mask."""
    if dead_time <= 0 or len(times) == 0:
        return np.ones(len(times), bool)
    return _dead_time_mask(np.asarray(times, np.int64), np.int64(round(dead_time)))


def detect(times_ps: np.ndarray, channels: np.ndarray, n_channels: int, det: DetectorParams,
           duration_ps: float, rng: np.random.Generator, *, outcomes: np.ndarray | None = None,
           channel_outcomes: dict[int, int] | None = None, efficiency_scale: float = 1.0,
           channel_offset: int = 0) -> TimeTagStream:
    """Turn photon arrival times routed to detector channels into clicks.

    Photons survive with probability ``efficiency * efficiency_scale``; survivors
    get Gaussian jitter; each channel adds Poisson dark counts over
    [0, duration_ps) and then loses clicks inside its dead time.
    """
    eff = min(1.0, det.efficiency * efficiency_scale)
    times_ps = np.asarray(times_ps, float)
    keep = rng.random(len(times_ps)) < eff
    t = times_ps[keep]
    ch = np.asarray(channels)[keep]
    oc = np.asarray(outcomes)[keep] if outcomes is not None else None
    if det.jitter_sigma > 0:
        t = t + rng.normal(0.0, det.jitter_sigma, len(t))
    t = np.rint(t).astype(np.int64)

    out_t, out_c, out_o = [], [], []
    for c in range(n_channels):
        sel = ch == c
        tc = t[sel]
        oc_c = oc[sel] if oc is not None else np.full(len(tc), (channel_outcomes or {}).get(c, 0), np.uint8)
        n_dark = rng.poisson(det.dark_count_rate * duration_ps * 1e-12)
        if n_dark:
            tc = np.concatenate([tc, rng.integers(0, max(1, int(duration_ps)), n_dark)])
            oc_c = np.concatenate([oc_c, np.full(n_dark, (channel_outcomes or {}).get(c, 0), np.uint8)])
        order = np.argsort(tc, kind="stable")
        tc, oc_c = tc[order], oc_c[order]
        k = apply_dead_time(tc, det.dead_time)
        out_t.append(tc[k])
        out_o.append(np.asarray(oc_c[k], np.uint8))
        out_c.append(np.full(int(k.sum()), c + channel_offset, np.uint8))
    return TimeTagStream.merge([TimeTagStream(a, b, o) for a, b, o in zip(out_t, out_c, out_o)])


# --- TTAG1 binary format -------------------------------------------------------

TTAG_MAGIC = b"TTAG1"
TTAG_RECORD = np.dtype([("channel", "u1"), ("outcome", "u1"), ("time", "<i8")])


def write_ttag(path, stream: TimeTagStream) -> None:
    rec = np.empty(len(stream), dtype=TTAG_RECORD)
    rec["channel"] = stream.channel
    rec["outcome"] = stream.outcome
    rec["time"] = stream.time
    with open(path, "wb") as fh:
        fh.write(TTAG_MAGIC)
        fh.write(struct.pack("<Q", len(rec)))
        fh.write(rec.tobytes())


def read_ttag(path) -> TimeTagStream:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != TTAG_MAGIC:
        raise ValueError(f"{path}: bad magic at byte offset 0")
    if len(data) < 13:
        raise ValueError(f"{path}: truncated header at byte offset {len(data)}")
    (n,) = struct.unpack_from("<Q", data, 5)
    body = data[13:]
    if len(body) != n * TTAG_RECORD.itemsize:
        good = min(n, len(body) // TTAG_RECORD.itemsize)
        raise ValueError(f"{path}: truncated record at byte offset {13 + good * TTAG_RECORD.itemsize}")
    rec = np.frombuffer(body, dtype=TTAG_RECORD)
    t = rec["time"].astype(np.int64)
    ch = rec["channel"].copy()
    for c in np.unique(ch):
        tc = t[ch == c]
        if len(tc) > 1 and np.any(np.diff(tc) < 0):
            bad = int(np.flatnonzero(ch == c)[np.argmax(np.diff(tc) < 0) + 1])
            raise ValueError(f"{path}: channel {c} not time-sorted at byte offset "
                             f"{13 + bad * TTAG_RECORD.itemsize}")
    return TimeTagStream(t, ch, rec["outcome"].copy())
