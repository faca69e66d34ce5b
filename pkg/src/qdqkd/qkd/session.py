"""Block-wise BBM92 key generation session over the simulated source and channel."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..source_model import SourceParams, simulate_pulses
from ..stream_analysis.timetags import DetectorParams, TimeTagStream
from .amplify import privacy_amplify
from .cascade import QBER_LIMIT, ReconciliationAborted, reconcile
from .channel import BlockDetection, ChannelParams, detect_block
from .sifting import estimate_qber, sift
from .sync import SyncResult, correct_times, synchronize


@dataclass(frozen=True)
class SessionParams:
    """Run plan; times in seconds of wall clock unless noted.

    Each block of ``block_duration`` seconds is represented by
    ``pulses_per_block`` simulated pulses (see :func:`detect_block`).
    """

    duration: float = 8 * 3600.0
    block_duration: float = 60.0
    pulses_per_block: int = 500_000
    window: float = 2000.0  # ps
    window_offset: float = 0.0  # ps
    sample_fraction: float = 0.0
    initial_qber: float = 0.05
    bootstrap_fraction: float = 0.1  # disclosed while no QBER is known yet
    workers: int = 1

    def __post_init__(self):
        if not self.duration > 0 or not self.block_duration > 0:
            raise ValueError("duration and block_duration must be > 0")
        if self.pulses_per_block < 1000:
            raise ValueError("pulses_per_block must be >= 1000")
        if self.window <= 0:
            raise ValueError("window must be > 0")
        if not 0.0 <= self.sample_fraction < 1.0:
            raise ValueError("sample_fraction must be in [0, 1)")
        if not 0.0 <= self.bootstrap_fraction < 1.0:
            raise ValueError("bootstrap_fraction must be in [0, 1)")

    @property
    def n_blocks(self) -> int:
        return max(1, int(round(self.duration / self.block_duration)))


@dataclass
class BlockResult:
    start_s: float
    status: str  # ok | aborted | sync_lost
    qber: float
    raw_bits: int
    secure_bits: int
    leaked_bits: int
    coincidences: int
    sync_offset_ps: float
    reconciled_bits: int = 0  # raw bits left after any disclosed sample


@dataclass
class SessionReport:
    block_duration: float
    blocks: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(b, name) for b in self.blocks], dtype=float)

    @property
    def raw_rate(self) -> np.ndarray:
        return self.column("raw_bits") / self.block_duration

    @property
    def secure_rate(self) -> np.ndarray:
        return self.column("secure_bits") / self.block_duration

    @property
    def qber(self) -> np.ndarray:
        return self.column("qber")

    def totals(self) -> dict:
        q = self.qber
        ok = ~np.isnan(q)
        raw = int(self.column("raw_bits").sum())
        sec = int(self.column("secure_bits").sum())
        dur = self.block_duration * len(self.blocks)
        return {
            "blocks": len(self.blocks),
            "blocks_ok": sum(b.status == "ok" for b in self.blocks),
            "mean_qber": float(q[ok].mean()) if ok.any() else float("nan"),
            "min_qber": float(q[ok].min()) if ok.any() else float("nan"),
            "max_qber": float(q[ok].max()) if ok.any() else float("nan"),
            "raw_bits": raw,
            "secure_bits": sec,
            "mean_raw_rate": raw / dur,
            "mean_secure_rate": sec / dur,
            "secure_over_raw": sec / raw if raw else 0.0,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block_start_s", "qber", "raw_bps", "secure_bps"])
        for b in self.blocks:
            w.writerow([f"{b.start_s:g}", f"{b.qber:.6f}", f"{b.raw_bits / self.block_duration:.6f}",
                        f"{b.secure_bits / self.block_duration:.6f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        def clean(d):
            return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}
        return json.dumps({"block_duration": self.block_duration, "totals": clean(self.totals()),
                           "blocks": [clean(asdict(b)) for b in self.blocks]}, indent=1, sort_keys=True)


@dataclass
class SessionResult:
    report: SessionReport
    alice_key: np.ndarray
    bob_key: np.ndarray
    sync: list


def _block_seeds(seed: int, i: int):
    ss = np.random.SeedSequence(seed, spawn_key=(100, i))
    sim_seed, det_ss, post_ss = ss.spawn(3)
    return int(sim_seed.generate_state(1, np.uint64)[0]), det_ss, post_ss


def simulate_block(source: SourceParams, channel: ChannelParams, det: DetectorParams,
                   params: SessionParams, seed: int, i: int) -> BlockDetection:
    """Simulate and detect block ``i``; depends only on its own seeds."""
    hours = i * params.block_duration / 3600.0
    sim_seed, det_ss, _ = _block_seeds(seed, i)
    stream = simulate_pulses(source, params.pulses_per_block, sim_seed, start_hours=hours)
    compression = source.rep_rate * params.block_duration / params.pulses_per_block
    return detect_block(stream, channel, det, hours=hours, compression=compression,
                        rng=np.random.default_rng(det_ss))


def _detections(source, channel, det, params, seed):
    n = params.n_blocks
    if params.workers <= 1:
        for i in range(n):
            yield simulate_block(source, channel, det, params, seed, i)
        return
    with ThreadPoolExecutor(max_workers=params.workers) as pool:
        # bounded look-ahead keeps memory flat; output order is block order
        pending = [pool.submit(simulate_block, source, channel, det, params, seed, i)
                   for i in range(min(n, 2 * params.workers))]
        nxt = len(pending)
        while pending:
            fut = pending.pop(0)
            if nxt < n:
                pending.append(pool.submit(simulate_block, source, channel, det, params, seed, nxt))
                nxt += 1
            yield fut.result()


def run_session(source: SourceParams, channel: ChannelParams, det: DetectorParams,
                params: SessionParams, seed: int) -> SessionResult:
    """Generate keys block by block: detect, synchronize, sift, reconcile, amplify.

    Simulation of blocks may run on several workers; synchronization and
    post-processing run in block order because each block starts from the
    previous block's clock estimate and QBER.
    """
    report = SessionReport(params.block_duration)
    period = 1e12 / source.rep_rate
    block_ps = params.pulses_per_block * period
    keys_a, keys_b, syncs = [], [], []
    prev_sync: SyncResult | None = None
    q_hint = params.initial_qber
    q_known = False
    for i, bd in enumerate(_detections(source, channel, det, params, seed)):
        start = i * params.block_duration
        post_rng = np.random.default_rng(_block_seeds(seed, i)[2])
        guess = slope = None
        if prev_sync is not None and prev_sync.locked:
            guess = prev_sync.offset + prev_sync.slope * block_ps
            slope = prev_sync.slope
        sync = synchronize(bd.alice.time, bd.bob.time, guess=guess, slope=slope or 0.0)
        if not sync.locked and guess is not None:
            sync = synchronize(bd.alice.time, bd.bob.time)
        syncs.append(sync)
        if not sync.locked:
            report.blocks.append(BlockResult(start, "sync_lost", float("nan"), 0, 0, 0, 0, sync.offset))
            prev_sync = None
            continue
        prev_sync = sync
        bob = TimeTagStream(correct_times(bd.bob.time, sync), bd.bob.channel, bd.bob.outcome)
        sr = sift(bd.alice, bob, params.window, params.window_offset, period)
        raw = len(sr.alice)
        ka, kb = sr.alice, sr.bob
        # CASCADE sizes its blocks from the expected QBER; until a block has
        # been reconciled, a disclosed sample stands in for the previous one
        frac = params.sample_fraction if q_known or params.sample_fraction > 0 else params.bootstrap_fraction
        if frac > 0:
            est, ka, kb = estimate_qber(ka, kb, frac, post_rng)
            if est.status == "ok":
                q_hint = est.qber
        leaked, secure = 0, 0
        try:
            rec = reconcile(ka.bits, kb.bits, min(max(q_hint, 0.005), 0.10),
                            seed=int(post_rng.integers(2**63)))
            qber = rec.corrected / len(ka) if len(ka) else float("nan")
            leaked = rec.leaked_bits
            status = "ok"
            if qber >= QBER_LIMIT:
                status = "aborted"
            else:
                pa_seed = int(post_rng.integers(2**63))
                amp_a = privacy_amplify(rec.alice, qber, leaked, np.random.default_rng(pa_seed))
                amp_b = privacy_amplify(rec.bob, qber, leaked, np.random.default_rng(pa_seed))
                if not np.array_equal(amp_a, amp_b):
                    raise AssertionError("amplified keys differ after successful reconciliation")
                secure = len(amp_a)
                keys_a.append(amp_a)
                keys_b.append(amp_b)
        except ReconciliationAborted:
            # a discarded block can be disclosed completely to measure its error rate
            qber = float(np.mean(ka.bits != kb.bits)) if len(ka) else float("nan")
            status = "aborted"
        if not math.isnan(qber):
            q_hint = qber
            q_known = True
        report.blocks.append(BlockResult(start, status, qber, raw, secure, leaked, sr.coincidences, sync.offset,
                                         len(ka)))
    cat = lambda ks: np.concatenate(ks) if ks else np.zeros(0, np.uint8)  # noqa: E731
    return SessionResult(report, cat(keys_a), cat(keys_b), syncs)



