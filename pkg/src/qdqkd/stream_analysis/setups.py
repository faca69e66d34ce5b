"""Detection arrangements used to characterize the source."""

from __future__ import annotations

import numpy as np

from ..source_model import EventStream
from .timetags import DetectorParams, TimeTagStream, detect


def _duration(stream: EventStream) -> float:
    return stream.n_pulses * stream.period_ps


def hbt(stream: EventStream, arm: str, det: DetectorParams, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Hanbury-Brown-Twiss: one line split 50:50 onto two detectors."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(10,)))
    _, t = stream.arm_photons(arm)
    ch = rng.integers(0, 2, len(t))
    tags = detect(t, ch, 2, det, _duration(stream), rng)
    return tags.channel_times(0), tags.channel_times(1)


def cross(stream: EventStream, det: DetectorParams, seed: int,
          det_x: DetectorParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Unpolarized XX (channel 0) and X (channel 1) detection."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    _, txx = stream.arm_photons("xx")
    _, tx = stream.arm_photons("x")
    a = detect(txx, np.zeros(len(txx), int), 1, det, _duration(stream), rng)
    b = detect(tx, np.zeros(len(tx), int), 1, det_x or det, _duration(stream), rng, channel_offset=1)
    return a.time, b.time


def single_arm(stream: EventStream, arm: str, det: DetectorParams, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(12,)))
    _, t = stream.arm_photons(arm)
    return detect(t, np.zeros(len(t), int), 1, det, _duration(stream), rng).time


def as_stream(times: np.ndarray, channel: int = 0) -> TimeTagStream:
    t = np.asarray(times, np.int64)
    return TimeTagStream(t, np.full(len(t), channel, np.uint8), np.zeros(len(t), np.uint8))
