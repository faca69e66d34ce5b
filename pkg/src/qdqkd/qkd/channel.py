"""Two-party detection: passive basis choice, four detectors per side, fiber and clocks."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from ..optics import BASES, arm_outcomes, rotation
from ..source_model import EventStream
from ..stream_analysis.timetags import DetectorParams, TimeTagStream, detect

SPEED_OF_LIGHT = 299_792_458.0  # m/s
PS_PER_HOUR = 3.6e15

# detector channel = 2 * basis + outcome; basis 0 = HV, 1 = DA
CHANNEL_OUTCOMES = {0: 1, 1: 2, 2: 3, 3: 4}  # H, V, D, A


@dataclass(frozen=True)
class ChannelParams:
    """Everything between the source and the two time taggers.

    Efficiencies are end-to-end (extraction, coupling, fiber, detector).
    The cryostat model lets the source collection efficiency decay linearly
    and restores it whenever it falls below ``reoptimize_threshold``.
    """

    arm_efficiency_alice: float = 1.3e-3
    arm_efficiency_bob: float = 1.3e-3
    fiber_length: float = 350.0  # m
    fiber_index: float = 1.468
    polarization_drift: float = math.radians(5.0) / 8.0  # rad per hour on Bob's arm
    dark_count_rate: float = 100.0  # Hz per detector
    clock_offset: float = 0.0  # ps, Bob's clock relative to Alice's
    clock_drift: float = 1e-9  # relative clock rate difference
    efficiency_decay: float = 0.0  # fraction of the optimum lost per hour
    reoptimize_threshold: float = 0.8

    def __post_init__(self):
        for name in ("arm_efficiency_alice", "arm_efficiency_bob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.fiber_length < 0 or self.fiber_index < 1:
            raise ValueError("fiber_length must be >= 0 and fiber_index >= 1")
        if self.dark_count_rate < 0 or self.efficiency_decay < 0:
            raise ValueError("dark_count_rate and efficiency_decay must be >= 0")
        if not 0.0 < self.reoptimize_threshold <= 1.0:
            raise ValueError("reoptimize_threshold must be in (0, 1]")

    @property
    def fiber_delay(self) -> float:
        """One-way propagation delay to Bob in ps."""
        return self.fiber_length * self.fiber_index / SPEED_OF_LIGHT * 1e12

    def polarization_angle(self, hours: float) -> float:
        return self.polarization_drift * hours

    def efficiency_factor(self, hours: float) -> float:
        """Relative collection efficiency of the source (sawtooth: decay, then re-optimization)."""
        if self.efficiency_decay == 0:
            return 1.0
        period = (1.0 - self.reoptimize_threshold) / self.efficiency_decay
        return 1.0 - self.efficiency_decay * (hours % period)

    def clock_offset_at(self, hours: float) -> float:
        """Offset of Bob's time tags at wall-clock time ``hours`` (ps), fiber delay included."""
        return self.fiber_delay + self.clock_offset + self.clock_drift * hours * PS_PER_HOUR


@dataclass
class BlockDetection:
    alice: TimeTagStream
    bob: TimeTagStream
    true_offset: float  # Bob's clock offset at the block start, ps
    true_slope: float  # offset change per ps of block time


def _scaled(det: DetectorParams, efficiency: float, dark: float, speedup: float) -> DetectorParams:
    return dataclasses.replace(det, efficiency=min(1.0, efficiency), dark_count_rate=dark,
                               dead_time=det.dead_time / speedup)


def detect_block(stream: EventStream, channel: ChannelParams, det: DetectorParams, *,
                 hours: float, compression: float, rng: np.random.Generator) -> BlockDetection:
    """Detect one block of simulated pulses on Alice's (XX) and Bob's (X) side.

    ``compression`` is the number of real pulses represented by one simulated
    pulse. Efficiencies and dark-count rates are scaled by its square root and
    dead times divided by it, which keeps true and accidental coincidences
    per block and the dead-time losses equal to the uncompressed experiment.
    """
    speed = math.sqrt(compression)
    n = len(stream)
    basis_a = rng.integers(0, 2, n)
    basis_b = rng.integers(0, 2, n)
    rot = rotation(channel.polarization_angle(hours))
    mats = np.stack([BASES["HV"], BASES["DA"]])
    oa, ob = arm_outcomes(stream, mats[basis_a], mats[basis_b] @ rot, rng)
    period = stream.period_ps
    duration = stream.n_pulses * period
    eta = channel.efficiency_factor(hours)
    dark = channel.dark_count_rate * speed

    has_a = oa >= 0
    ta = stream.pulse_index[has_a] * period + stream.xx_time[has_a]
    ca = 2 * basis_a[has_a] + oa[has_a]
    det_a = _scaled(det, channel.arm_efficiency_alice * eta * speed, dark, speed)
    alice = detect(ta, ca, 4, det_a, duration, rng, channel_outcomes=CHANNEL_OUTCOMES)

    offset0 = channel.clock_offset_at(hours)
    slope = channel.clock_drift * compression
    has_b = ob >= 0
    tb = stream.pulse_index[has_b] * period + stream.x_time[has_b]
    tb = tb + offset0 + slope * tb
    cb = 2 * basis_b[has_b] + ob[has_b]
    det_b = _scaled(det, channel.arm_efficiency_bob * eta * speed, dark, speed)
    # dark counts spread over Bob's clock range of the block
    bob = detect(tb - offset0, cb, 4, det_b, duration, rng, channel_outcomes=CHANNEL_OUTCOMES)
    bob = TimeTagStream(bob.time + np.int64(round(offset0)), bob.channel, bob.outcome)
    return BlockDetection(alice, bob, offset0, slope)
