"""Pulse-by-pulse Monte Carlo of the biexciton-exciton cascade.

Each excitation pulse can produce a polarization-entangled XX/X pair, extra
uncorrelated XX or X photons (multi-photon background), or nothing while the
dot is in its dark (blinking) state. Emission times are relative to the pulse.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .quantum_math import HBAR_UEV_NS

FLAG_SOURCE_ON = 1
FLAG_SLOW = 2
FLAG_BACKGROUND = 4
FLAG_BACKGROUND_X = 8  # background photon belongs to the X arm (else XX)

# state_code: 0 = cascade state with `phase`; 1..4 = product state HH, HV, VH, VV;
# 255 = no two-photon state (background single photon).
STATE_CASCADE = 0
STATE_NONE = 255

CHUNK_PULSES = 1 << 20

_SQ = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class SourceParams:
    rep_rate: float = 80e6
    pair_prob_epsilon: float = 0.87
    xx_lifetime: float = 72.0
    x_lifetime: float = 252.0
    fss_S: float = 0.96
    slow_channel_fraction: float = 0.0
    slow_channel_lifetime: float = 2000.0
    slow_channel_dephased: bool = True
    blink_beta: float = 1.0
    blink_off_mean: float = 1.0
    multiphoton_prob_xx: float = 0.0
    multiphoton_prob_x: float = 0.0
    fss_drift_rate: float = 0.0

    def __post_init__(self):
        if not self.rep_rate > 0:
            raise ValueError("rep_rate must be > 0")
        for name in ("pair_prob_epsilon", "slow_channel_fraction",
                     "multiphoton_prob_xx", "multiphoton_prob_x"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 < self.blink_beta <= 1.0:
            raise ValueError(f"blink_beta must be in (0, 1], got {self.blink_beta}")
        for name in ("xx_lifetime", "x_lifetime", "slow_channel_lifetime", "blink_off_mean"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.fss_S < 0:
            raise ValueError("fss_S must be >= 0")
        if self.slow_channel_lifetime <= self.x_lifetime:
            raise ValueError("slow_channel_lifetime must exceed x_lifetime")

    @property
    def period_ps(self) -> float:
        return 1e12 / self.rep_rate

    def fss_at(self, hours: float) -> float:
        return max(0.0, self.fss_S + self.fss_drift_rate * hours)


def multiphoton_prob_for_g2(g2: float, epsilon: float) -> float:
    """Background photon probability per pulse giving the requested g2(0).

    With a single-photon line at probability epsilon and an independent extra
    photon at probability m, a 50:50 Hanbury-Brown-Twiss setup measures
    g2(0) = 2 epsilon m / (epsilon + m)^2. Returns the small root.
    """
    if g2 <= 0:
        return 0.0
    if g2 >= 0.5:
        raise ValueError("g2 must be < 0.5 for a single-photon line")
    return float(epsilon * ((1.0 - g2) - math.sqrt(1.0 - 2.0 * g2)) / g2)


@dataclass
class EventStream:
    """Columnar storage of emission events, sorted by pulse_index."""

    pulse_index: np.ndarray
    xx_time: np.ndarray
    x_time: np.ndarray
    flags: np.ndarray
    phase: np.ndarray
    state_code: np.ndarray
    n_pulses: int
    rep_rate: float
    on_start: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    on_stop: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self) -> int:
        return len(self.pulse_index)

    @property
    def period_ps(self) -> float:
        return 1e12 / self.rep_rate

    @property
    def is_pair(self) -> np.ndarray:
        return (self.flags & FLAG_BACKGROUND) == 0

    @property
    def on_pulses(self) -> int:
        return int(np.sum(self.on_stop - self.on_start))

    @property
    def on_fraction(self) -> float:
        return self.on_pulses / self.n_pulses

    def amplitudes(self) -> np.ndarray:
        """Two-photon amplitudes per event, shape (n, 4); zeros for background."""
        n = len(self)
        amp = np.zeros((n, 4), dtype=complex)
        casc = self.state_code == STATE_CASCADE
        amp[casc, 0] = _SQ
        amp[casc, 3] = _SQ * np.exp(1j * self.phase[casc])
        prod = (self.state_code >= 1) & (self.state_code <= 4)
        amp[np.flatnonzero(prod), self.state_code[prod].astype(int) - 1] = 1.0
        return amp

    def arm_photons(self, arm: str) -> tuple[np.ndarray, np.ndarray]:
        """(event index, absolute emission time in ps) of photons in one arm."""
        col = self.xx_time if arm == "xx" else self.x_time
        idx = np.flatnonzero(~np.isnan(col))
        t = self.pulse_index[idx] * self.period_ps + col[idx]
        return idx, t


def _empty_stream(n_pulses: int, rep_rate: float) -> EventStream:
    return EventStream(
        pulse_index=np.zeros(0, np.int64), xx_time=np.zeros(0), x_time=np.zeros(0),
        flags=np.zeros(0, np.uint8), phase=np.zeros(0), state_code=np.zeros(0, np.uint8),
        n_pulses=n_pulses, rep_rate=rep_rate,
    )


def concat_streams(parts: list[EventStream]) -> EventStream:
    if not parts:
        raise ValueError("nothing to concatenate")
    first = parts[0]
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    return EventStream(
        pulse_index=cat("pulse_index"), xx_time=cat("xx_time"), x_time=cat("x_time"),
        flags=cat("flags"), phase=cat("phase"), state_code=cat("state_code"),
        n_pulses=max(p.n_pulses for p in parts), rep_rate=first.rep_rate,
        on_start=first.on_start, on_stop=first.on_stop,
    )


def blink_intervals(params: SourceParams, n_pulses: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """On-periods of the blinking process as half-open pulse-index ranges.

    Alternating renewal process with exponential on/off durations; the first
    state is drawn from the stationary distribution.
    """
    if params.blink_beta >= 1.0:
        return np.array([0], np.int64), np.array([n_pulses], np.int64)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    t_off = params.blink_off_mean * 1e-6
    t_on = t_off * params.blink_beta / (1.0 - params.blink_beta)
    total = n_pulses / params.rep_rate
    starts, stops = [], []
    t = 0.0
    on = rng.random() < params.blink_beta
    # Generate durations in batches; the process is sequential but cheap.
    batch = max(64, int(2 * total / (t_on + t_off)) + 64)
    while t < total:
        d_on = rng.exponential(t_on, batch)
        d_off = rng.exponential(t_off, batch)
        for a, b in zip(d_on, d_off):
            if on:
                starts.append(t)
                t += a
                stops.append(t)
                t += b
            else:
                t += b
                starts.append(t)
                t += a
                stops.append(t)
            if t >= total:
                break
    s = np.ceil(np.asarray(starts) * params.rep_rate).astype(np.int64)
    e = np.ceil(np.asarray(stops) * params.rep_rate).astype(np.int64)
    s = np.clip(s, 0, n_pulses)
    e = np.clip(e, 0, n_pulses)
    keep = e > s
    return s[keep], e[keep]


def _on_mask(p0: int, p1: int, on_start: np.ndarray, on_stop: np.ndarray) -> np.ndarray:
    n = p1 - p0
    diff = np.zeros(n + 1, np.int32)
    s = np.clip(on_start - p0, 0, n)
    e = np.clip(on_stop - p0, 0, n)
    np.add.at(diff, s, 1)
    np.add.at(diff, e, -1)
    return np.cumsum(diff[:-1]) > 0


def _simulate_chunk(params: SourceParams, p0: int, p1: int, seed: int, chunk_id: int,
                    on_start: np.ndarray, on_stop: np.ndarray, fss: float) -> EventStream:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, chunk_id)))
    n = p1 - p0
    on = _on_mask(p0, p1, on_start, on_stop)
    u = rng.random((3, n))
    pair = on & (u[0] < params.pair_prob_epsilon)
    bg_xx = on & (u[1] < params.multiphoton_prob_xx)
    bg_x = on & (u[2] < params.multiphoton_prob_x)

    # pairs
    pidx = np.flatnonzero(pair).astype(np.int64) + p0
    npair = len(pidx)
    t_xx = rng.exponential(params.xx_lifetime, npair)
    slow = rng.random(npair) < params.slow_channel_fraction
    delay = np.where(slow, rng.exponential(params.slow_channel_lifetime, npair),
                     rng.exponential(params.x_lifetime, npair))
    phase = fss * (delay * 1e-3) / HBAR_UEV_NS
    code = np.zeros(npair, np.uint8)
    if params.slow_channel_dephased:
        mixed = np.flatnonzero(slow)
        code[mixed] = rng.integers(1, 5, len(mixed)).astype(np.uint8)
    flags = (FLAG_SOURCE_ON | np.where(slow, FLAG_SLOW, 0)).astype(np.uint8)

    # background singles: same timing statistics as the line they belong to
    bxi = np.flatnonzero(bg_xx).astype(np.int64) + p0
    bxt = rng.exponential(params.xx_lifetime, len(bxi))
    bi = np.flatnonzero(bg_x).astype(np.int64) + p0
    bt = rng.exponential(params.xx_lifetime, len(bi)) + rng.exponential(params.x_lifetime, len(bi))

    nbx, nb = len(bxi), len(bi)
    pulse_index = np.concatenate([pidx, bxi, bi])
    order = np.argsort(pulse_index, kind="stable")
    return EventStream(
        pulse_index=pulse_index[order],
        xx_time=np.concatenate([t_xx, bxt, np.full(nb, np.nan)])[order],
        x_time=np.concatenate([t_xx + delay, np.full(nbx, np.nan), bt])[order],
        flags=np.concatenate([
            flags,
            np.full(nbx, FLAG_SOURCE_ON | FLAG_BACKGROUND, np.uint8),
            np.full(nb, FLAG_SOURCE_ON | FLAG_BACKGROUND | FLAG_BACKGROUND_X, np.uint8),
        ])[order],
        phase=np.concatenate([phase, np.zeros(nbx + nb)])[order],
        state_code=np.concatenate([code, np.full(nbx + nb, STATE_NONE, np.uint8)])[order],
        n_pulses=p1,
        rep_rate=params.rep_rate,
    )


def iter_pulse_chunks(params: SourceParams, n_pulses: int, seed: int, *,
                      start_hours: float = 0.0, workers: int = 1) -> Iterator[EventStream]:
    """Yield the event stream in fixed-size pulse chunks, in pulse order.

    Each chunk has its own seed derived from (seed, chunk number), so the
    output does not depend on ``workers``.
    """
    if n_pulses < 1:
        raise ValueError("n_pulses must be >= 1")
    on_start, on_stop = blink_intervals(params, n_pulses, seed)
    fss = params.fss_at(start_hours)
    bounds = [(k, k * CHUNK_PULSES, min(n_pulses, (k + 1) * CHUNK_PULSES))
              for k in range(math.ceil(n_pulses / CHUNK_PULSES))]

    def run(b):
        k, p0, p1 = b
        out = _simulate_chunk(params, p0, p1, seed, k, on_start, on_stop, fss)
        out.n_pulses = n_pulses
        out.on_start, out.on_stop = on_start, on_stop
        return out

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(run, bounds)
    else:
        for b in bounds:
            yield run(b)


def simulate_pulses(params: SourceParams, n_pulses: int, seed: int, *,
                    start_hours: float = 0.0, workers: int = 1) -> EventStream:
    """Simulate ``n_pulses`` excitation pulses and return all emission events.

    Identical (params, n_pulses, seed) give bit-identical streams regardless
    of the number of workers.
    """
    parts = list(iter_pulse_chunks(params, n_pulses, seed, start_hours=start_hours, workers=workers))
    out = concat_streams(parts) if parts else _empty_stream(n_pulses, params.rep_rate)
    out.n_pulses = n_pulses
    return out


@dataclass(frozen=True)
class VoltagePlateau:
    """Gate-voltage map of the charge-neutral, blinking-free window."""

    v_low: float = 0.25
    v_high: float = 0.35
    v_neutral_low: float = 0.15
    v_neutral_high: float = 0.35
    wavelength_shift_range: float = 0.2
    center_wavelength: float = 780.0
    off_plateau_beta: float = 0.3

    def __post_init__(self):
        if not self.v_low < self.v_high:
            raise ValueError("v_low must be < v_high")
        if self.wavelength_shift_range < 0:
            raise ValueError("wavelength_shift_range must be >= 0")
        if not 0 < self.off_plateau_beta <= 1:
            raise ValueError("off_plateau_beta must be in (0, 1]")

    @property
    def v_center(self) -> float:
        return 0.5 * (self.v_low + self.v_high)


def wavelength_at(voltage: float, plateau: VoltagePlateau) -> float:
    """Emission wavelength in nm; linear Stark shift inside the window, clamped outside."""
    v = min(max(voltage, plateau.v_low), plateau.v_high)
    frac = (v - plateau.v_center) / (plateau.v_high - plateau.v_low)
    return plateau.center_wavelength + plateau.wavelength_shift_range * frac


def on_fraction_at(voltage: float, plateau: VoltagePlateau) -> float:
    """Step model of the on-time fraction versus gate voltage."""
    if plateau.v_low <= voltage <= plateau.v_high:
        return 1.0
    return plateau.off_plateau_beta


def charge_state_at(voltage: float, plateau: VoltagePlateau) -> str:
    if voltage > plateau.v_neutral_high:
        return "negative trion"
    if voltage < plateau.v_neutral_low:
        return "undefined"
    return "neutral"


# --- QDEV1 binary event format -------------------------------------------------

QDEV_MAGIC = b"QDEV1"
_QDEV_HEADER = struct.Struct("<5sQdQ")
QDEV_RECORD = np.dtype([
    ("pulse_index", "<u8"), ("xx_time", "<f8"), ("x_time", "<f8"), ("flags", "u1"),
    ("amp", "<f8", (8,)),
])


def _records(stream: EventStream) -> np.ndarray:
    rec = np.empty(len(stream), dtype=QDEV_RECORD)
    rec["pulse_index"] = stream.pulse_index
    rec["xx_time"] = stream.xx_time
    rec["x_time"] = stream.x_time
    rec["flags"] = stream.flags
    amp = stream.amplitudes()
    rec["amp"][:, 0::2] = amp.real
    rec["amp"][:, 1::2] = amp.imag
    return rec


def write_events(path, chunks, n_pulses: int, rep_rate: float) -> int:
    """Write an iterable of EventStream chunks as a QDEV1 file; returns record count."""
    chunks = list(chunks)
    n_rec = sum(len(c) for c in chunks)
    with open(path, "wb") as fh:
        fh.write(_QDEV_HEADER.pack(QDEV_MAGIC, n_pulses, rep_rate, n_rec))
        for c in chunks:
            fh.write(_records(c).tobytes())
    return n_rec


def read_events(path) -> EventStream:
    with open(path, "rb") as fh:
        head = fh.read(_QDEV_HEADER.size)
        if len(head) < _QDEV_HEADER.size:
            raise ValueError(f"{path}: truncated header at byte offset {len(head)}")
        magic, n_pulses, rep_rate, n_rec = _QDEV_HEADER.unpack(head)
        if magic != QDEV_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r} at byte offset 0")
        body = fh.read()
    if len(body) != n_rec * QDEV_RECORD.itemsize:
        good = len(body) // QDEV_RECORD.itemsize
        raise ValueError(f"{path}: truncated record at byte offset "
                         f"{_QDEV_HEADER.size + good * QDEV_RECORD.itemsize}")
    rec = np.frombuffer(body, dtype=QDEV_RECORD)
    amp = rec["amp"][:, 0::2] + 1j * rec["amp"][:, 1::2]
    flags = rec["flags"].copy()
    code = np.full(len(rec), STATE_NONE, np.uint8)
    phase = np.zeros(len(rec))
    pair = (flags & FLAG_BACKGROUND) == 0
    casc = pair & (np.abs(amp[:, 0]) > 0) & (np.abs(amp[:, 3]) > 0)
    code[casc] = STATE_CASCADE
    phase[casc] = np.angle(amp[casc, 3] / amp[casc, 0])
    prod = pair & ~casc
    code[prod] = (np.argmax(np.abs(amp[prod]), axis=1) + 1).astype(np.uint8)
    return EventStream(
        pulse_index=rec["pulse_index"].astype(np.int64), xx_time=rec["xx_time"].copy(),
        x_time=rec["x_time"].copy(), flags=flags, phase=phase, state_code=code,
        n_pulses=int(n_pulses), rep_rate=float(rep_rate),
    )
