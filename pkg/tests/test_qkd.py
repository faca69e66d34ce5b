"""Tests for synchronization, sifting, CASCADE, privacy amplification, OTP and sessions."""

import dataclasses
import json
import uuid

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdqkd.qkd import (
    QBER_LIMIT,
    SECURITY_MARGIN,
    Bitmap,
    ChannelParams,
    KeyExhausted,
    KeyMaterial,
    KeyReuseError,
    KeyStore,
    ReconciliationAborted,
    SessionParams,
    SyncResult,
    binary_entropy,
    bit_difference,
    clopper_pearson,
    correct_times,
    decrypt_bitmap,
    detect_block,
    encrypt_bitmap,
    estimate_qber,
    match_coincidences,
    otp_decrypt,
    otp_encrypt,
    privacy_amplify,
    read_bmp,
    read_key,
    reconcile,
    run_session,
    secure_length,
    sift,
    simulate_block,
    synchronize,
    toeplitz_hash,
    write_bmp,
    write_key,
)
from qdqkd.qkd.cascade import first_block_size
from qdqkd.source_model import SourceParams, simulate_pulses
from qdqkd.stream_analysis import DetectorParams, TimeTagStream

QUIET_DET = DetectorParams(dark_count_rate=0.0)
CLEAN_CHANNEL = ChannelParams(polarization_drift=0.0, dark_count_rate=0.0, clock_drift=0.0)


def noisy_keys(n, q, rng):
    a = rng.integers(0, 2, n, dtype=np.uint8)
    b = a ^ (rng.random(n) < q).astype(np.uint8)
    return a, b


def direct_block(source, channel, n_pulses, seed, efficiency=0.2, window=2000.0):
    """Uncompressed detection with a high arm efficiency, synchronized on the ground truth."""
    stream = simulate_pulses(source, n_pulses, seed)
    ch = dataclasses.replace(channel, arm_efficiency_alice=efficiency, arm_efficiency_bob=efficiency)
    bd = detect_block(stream, ch, QUIET_DET, hours=0.0, compression=1.0, rng=np.random.default_rng(seed))
    peak = synchronize(bd.alice.time, bd.bob.time, guess=bd.true_offset + 300, slope=0.0)
    bob = TimeTagStream(correct_times(bd.bob.time, peak), bd.bob.channel, bd.bob.outcome)
    return bd, sift(bd.alice, bob, window=window)


class TestSync:
    def test_inserted_offset_recovered(self):
        base = dataclasses.replace(CLEAN_CHANNEL, fiber_length=0.0)
        params = SessionParams()
        src = SourceParams()
        s0 = simulate_block(src, base, DetectorParams(), params, seed=5, i=0)
        s1 = simulate_block(src, dataclasses.replace(base, clock_offset=7337.0), DetectorParams(), params, seed=5, i=0)
        r0 = synchronize(s0.alice.time, s0.bob.time)
        r1 = synchronize(s1.alice.time, s1.bob.time)
        assert r0.locked and r1.locked
        assert r1.offset - r0.offset == pytest.approx(7337.0, abs=50)
        # the peak sits at the X emission delay after the inserted offset
        assert 0 < r1.offset - 7337.0 < 1000

    def test_fiber_delay_and_drift_recovered(self):
        bd = simulate_block(SourceParams(), ChannelParams(), DetectorParams(), SessionParams(), seed=6, i=0)
        r = synchronize(bd.alice.time, bd.bob.time)
        assert r.locked and r.peak_to_floor > 5 and r.significance > 6
        assert 0 < r.offset - bd.true_offset < 1000
        assert r.slope == pytest.approx(bd.true_slope, rel=0.02)

    def test_uncorrelated_streams_lose_sync(self):
        a = simulate_block(SourceParams(), ChannelParams(), DetectorParams(), SessionParams(), seed=7, i=0)
        b = simulate_block(SourceParams(), ChannelParams(), DetectorParams(), SessionParams(), seed=8, i=0)
        r = synchronize(a.alice.time, b.bob.time)
        assert not r.locked
        assert r.significance < 6

    def test_empty_stream_is_unlocked(self):
        r = synchronize(np.zeros(0, np.int64), np.arange(10))
        assert not r.locked

    def test_correct_times_inverts_clock_model(self):
        ta = np.arange(0, 10**9, 12345, dtype=np.int64)
        s = SyncResult(1_713_852.0, 9.6e-6, True, 100.0)
        tb = ta + s.predict(ta)
        np.testing.assert_allclose(correct_times(tb, s), ta, atol=1)

    def test_drift_tracking_against_ground_truth_oracle(self):
        src = SourceParams()
        drifting = ChannelParams(clock_drift=1e-9, polarization_drift=0.0)
        params = SessionParams(duration=5 * 60.0)
        static = simulate_block(src, dataclasses.replace(drifting, clock_drift=0.0), DetectorParams(), params, 9, 0)
        d0 = synchronize(static.alice.time, static.bob.time).offset - static.true_offset
        prev = None
        tracked = oracle = 0
        block_ps = params.pulses_per_block * src.period_ps
        for i in range(params.n_blocks):
            bd = simulate_block(src, drifting, DetectorParams(), params, 9, i)
            guess = None if prev is None else prev.offset + prev.slope * block_ps
            r = synchronize(bd.alice.time, bd.bob.time, guess=guess, slope=0.0 if prev is None else prev.slope)
            assert r.locked
            prev = r
            truth = SyncResult(bd.true_offset + d0, bd.true_slope, True, 0.0)
            tracked += len(match_coincidences(bd.alice.time, correct_times(bd.bob.time, r))[0])
            oracle += len(match_coincidences(bd.alice.time, correct_times(bd.bob.time, truth))[0])
        assert tracked > 0.95 * oracle


class TestSifting:
    def test_match_uses_each_click_once(self):
        a = np.array([0, 10, 20])
        b = np.array([5, 12])
        ia, ib = match_coincidences(a, b, window=40)
        assert len(set(ib.tolist())) == len(ib) == 2
        ia, ib = match_coincidences(a, b, window=4)
        assert len(ia) == 0

    def test_noise_free_phi_plus_gives_identical_keys(self):
        src = SourceParams(fss_S=0.0)
        _, sr = direct_block(src, CLEAN_CHANNEL, 500_000, seed=10)
        assert len(sr.alice) > 1000
        np.testing.assert_array_equal(sr.alice.bits, sr.bob.bits)
        n = sr.coincidences
        assert sr.sift_ratio == pytest.approx(0.5, abs=3 * np.sqrt(0.25 / n))
        assert sr.alice.stage == "sifted"
        np.testing.assert_array_equal(sr.alice.basis, sr.bob.basis)

    def test_maximally_mixed_pairs(self):
        src = SourceParams(slow_channel_fraction=1.0)
        _, sr = direct_block(src, CLEAN_CHANNEL, 3_000_000, seed=11)
        q = np.mean(sr.alice.bits != sr.bob.bits)
        assert len(sr.alice) > 20_000
        assert q == pytest.approx(0.5, abs=0.01)

    def test_minimum_qber_configuration(self):
        src = SourceParams(fss_S=0.96, x_lifetime=230.0)
        # a wide window keeps the long-delay tail, which carries most errors
        _, sr = direct_block(src, CLEAN_CHANNEL, 3_000_000, seed=12, window=8000.0)
        est, _, _ = estimate_qber(sr.alice, sr.bob, 1.0)
        assert est.qber == pytest.approx(0.027, abs=0.004)
        assert est.ci_low < est.qber < est.ci_high

    def test_estimate_counts_errors(self):
        rng = np.random.default_rng(13)
        a = rng.integers(0, 2, 10_000, dtype=np.uint8)
        b = a.copy()
        flip = rng.choice(10_000, 842, replace=False)
        b[flip] ^= 1
        ka, kb = KeyMaterial(a, "sifted"), KeyMaterial(b, "sifted")
        est, ra, rb = estimate_qber(ka, kb, 1.0)
        assert est.qber == 0.0842 and est.n_errors == 842 and est.status == "ok"
        assert len(ra) == len(rb) == 0
        same, _, _ = estimate_qber(ka, ka, 1.0)
        assert same.qber == 0.0

    def test_estimate_discloses_and_drops_the_sample(self):
        rng = np.random.default_rng(14)
        a, b = noisy_keys(5000, 0.05, rng)
        est, ra, rb = estimate_qber(KeyMaterial(a, "sifted"), KeyMaterial(b, "sifted"), 0.2, rng)
        assert est.n_sampled == 1000
        assert len(ra) == len(rb) == 4000

    def test_empty_block_is_undefined(self):
        k = KeyMaterial(np.zeros(0, np.uint8), "sifted")
        est, _, _ = estimate_qber(k, k, 0.5)
        assert est.status == "undefined" and np.isnan(est.qber)

    def test_clopper_pearson_edges(self):
        assert clopper_pearson(0, 10)[0] == 0.0
        assert clopper_pearson(10, 10)[1] == 1.0
        lo, hi = clopper_pearson(842, 10_000)
        assert lo < 0.0842 < hi

    def test_key_material_validation(self):
        with pytest.raises(ValueError):
            KeyMaterial(np.array([0, 2]), "sifted")
        with pytest.raises(ValueError):
            KeyMaterial(np.array([0, 1]), "cooked")


class TestCascade:
    def test_large_key_at_five_percent(self):
        rng = np.random.default_rng(15)
        n = 100_000
        a, b = noisy_keys(n, 0.05, rng)
        res = reconcile(a, b, 0.05, seed=1)
        np.testing.assert_array_equal(res.alice, res.bob)
        np.testing.assert_array_equal(res.alice, a)
        assert res.corrected == int(np.sum(a != b))
        assert res.leaked_bits <= 1.25 * binary_entropy(0.05) * n

    def test_zero_error_keys_leak_first_pass_parities(self):
        a = np.random.default_rng(16).integers(0, 2, 10_000, dtype=np.uint8)
        res = reconcile(a, a.copy(), 0.05)
        k = first_block_size(0.05, 10_000)
        assert res.leaked_bits == -(-10_000 // k)
        assert res.passes == 1 and res.corrected == 0
        np.testing.assert_array_equal(res.bob, a)

    def test_high_qber_aborts(self):
        a, b = noisy_keys(5000, 0.12, np.random.default_rng(17))
        with pytest.raises(ReconciliationAborted):
            reconcile(a, b, 0.12)
        with pytest.raises(ReconciliationAborted):
            reconcile(a, b, QBER_LIMIT)

    def test_empty_and_mismatched(self):
        res = reconcile(np.zeros(0), np.zeros(0), 0.05)
        assert res.leaked_bits == 0
        with pytest.raises(ValueError):
            reconcile(np.zeros(3), np.zeros(4), 0.05)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(500, 6000), q=st.floats(0.01, 0.10), seed=st.integers(0, 2**31))
    def test_either_identical_or_aborted(self, n, q, seed):
        rng = np.random.default_rng(seed)
        a, b = noisy_keys(n, q, rng)
        try:
            res = reconcile(a, b, q, seed=seed)
        except ReconciliationAborted:
            return
        np.testing.assert_array_equal(res.alice, res.bob)
        np.testing.assert_array_equal(res.alice, a)


class TestPrivacyAmplification:
    def test_lengths(self):
        assert secure_length(10_000, 0.0, 0) == 10_000 - SECURITY_MARGIN
        assert secure_length(10_000, 0.5, 0) == 0
        assert secure_length(10_000, 0.6, 0) == 0
        assert secure_length(10_000, 0.11, 0) == 0
        assert secure_length(100, 0.05, 90) == 0
        n, q, leak = 10_000, 0.05, 3500
        assert secure_length(n, q, leak) == int(np.floor(n * (1 - binary_entropy(q)) - leak - 64))

    def test_binary_entropy(self):
        assert binary_entropy(0.5) == 1.0
        assert binary_entropy(0.0) == 0.0
        assert binary_entropy(0.11) == pytest.approx(0.4999, abs=1e-3)

    def test_toeplitz_against_explicit_matrix(self):
        rng = np.random.default_rng(18)
        for n, m in ((1, 1), (17, 5), (300, 120), (1000, 999)):
            x = rng.integers(0, 2, n, dtype=np.uint8)
            s = rng.integers(0, 2, n + m - 1, dtype=np.uint8)
            i, j = np.indices((m, n))
            T = s[i - j + n - 1]
            np.testing.assert_array_equal(toeplitz_hash(x, m, s), (T.astype(int) @ x) % 2)

    def test_toeplitz_seed_length_checked(self):
        with pytest.raises(ValueError):
            toeplitz_hash(np.ones(10, np.uint8), 5, np.ones(10, np.uint8))

    def test_amplify_is_shared_function_of_seed(self):
        key = np.random.default_rng(19).integers(0, 2, 5000, dtype=np.uint8)
        out1 = privacy_amplify(key, 0.03, 1000, np.random.default_rng(5))
        out2 = privacy_amplify(key, 0.03, 1000, np.random.default_rng(5))
        np.testing.assert_array_equal(out1, out2)
        assert len(out1) == secure_length(5000, 0.03, 1000)
        assert len(privacy_amplify(key, 0.2, 0, np.random.default_rng(5))) == 0


class TestOtp:
    def test_round_trip(self):
        rng = np.random.default_rng(20)
        msg = rng.bytes(4096)
        key = rng.integers(0, 2, 8 * 4096, dtype=np.uint8)
        assert otp_decrypt(otp_encrypt(msg, key), key) == msg

    def test_wrong_key_differs_in_half_the_bits(self):
        rng = np.random.default_rng(21)
        msg = rng.bytes(50_000)
        key = rng.integers(0, 2, 8 * len(msg), dtype=np.uint8)
        other = rng.integers(0, 2, 8 * len(msg), dtype=np.uint8)
        assert bit_difference(otp_decrypt(otp_encrypt(msg, key), other), msg) == pytest.approx(0.5, abs=0.01)

    def test_short_key_rejected(self):
        with pytest.raises(KeyExhausted):
            otp_encrypt(b"abc", np.zeros(23, np.uint8))

    def test_key_store_never_reuses(self):
        store = KeyStore(np.random.default_rng(22).integers(0, 2, 1000, dtype=np.uint8))
        a = store.take(400)
        b = store.take(400)
        assert store.spent == 800 and store.available == 200
        assert not np.array_equal(a, b)
        with pytest.raises(KeyExhausted):
            store.take(300)
        with pytest.raises(KeyReuseError):
            store.take_range(100, 10)
        store.add(np.ones(500, np.uint8))
        assert store.available == 700

    def test_bitmap_round_trip_and_payload(self, tmp_path):
        rng = np.random.default_rng(23)
        px = rng.integers(0, 256, (150, 144, 3), dtype=np.uint8)
        bmp = Bitmap(144, 150, px)
        assert bmp.payload_bits / 8 == 64_800
        write_bmp(tmp_path / "a.bmp", bmp)
        back = read_bmp(tmp_path / "a.bmp")
        assert (back.width, back.height) == (144, 150)
        np.testing.assert_array_equal(back.pixels, px)

    def test_bitmap_odd_width_padding(self, tmp_path):
        px = np.random.default_rng(24).integers(0, 256, (7, 5, 3), dtype=np.uint8)
        write_bmp(tmp_path / "odd.bmp", Bitmap(5, 7, px))
        np.testing.assert_array_equal(read_bmp(tmp_path / "odd.bmp").pixels, px)

    def test_bitmap_encrypt_decrypt(self):
        rng = np.random.default_rng(25)
        bmp = Bitmap(16, 8, rng.integers(0, 256, (8, 16, 3), dtype=np.uint8))
        key = rng.integers(0, 2, bmp.payload_bits * 2, dtype=np.uint8)
        store = KeyStore(key)
        enc = encrypt_bitmap(bmp, store)
        assert store.spent == bmp.payload_bits
        np.testing.assert_array_equal(decrypt_bitmap(enc, key[:bmp.payload_bits]).pixels, bmp.pixels)
        assert not np.array_equal(enc.pixels, bmp.pixels)

    def test_bmp_errors(self, tmp_path):
        (tmp_path / "x.bmp").write_bytes(b"PK" + bytes(60))
        with pytest.raises(ValueError, match="magic"):
            read_bmp(tmp_path / "x.bmp")
        (tmp_path / "y.bmp").write_bytes(b"BM")
        with pytest.raises(ValueError, match="short"):
            read_bmp(tmp_path / "y.bmp")


class TestKeyFile:
    def test_round_trip(self, tmp_path):
        bits = np.random.default_rng(26).integers(0, 2, 1001, dtype=np.uint8)
        sid = uuid.UUID(int=42)
        write_key(tmp_path / "k.qkey", KeyMaterial(bits, "amplified"), sid)
        key, got = read_key(tmp_path / "k.qkey")
        np.testing.assert_array_equal(key.bits, bits)
        assert key.stage == "amplified" and got == sid.bytes
        assert (tmp_path / "k.qkey").stat().st_size == 32 + 126

    def test_errors(self, tmp_path):
        p = tmp_path / "k.qkey"
        write_key(p, KeyMaterial(np.ones(16, np.uint8), "raw"), bytes(16))
        data = p.read_bytes()
        p.write_bytes(b"QKEY2" + data[5:])
        with pytest.raises(ValueError, match="byte 0"):
            read_key(p)
        p.write_bytes(data[:5] + b"\x09" + data[6:])
        with pytest.raises(ValueError, match="byte 5"):
            read_key(p)
        p.write_bytes(data[:-1])
        with pytest.raises(ValueError, match="after byte 32"):
            read_key(p)
        p.write_bytes(data[:10])
        with pytest.raises(ValueError, match="header"):
            read_key(p)
        with pytest.raises(ValueError):
            write_key(p, KeyMaterial(np.ones(4, np.uint8), "raw"), b"short")


@pytest.fixture(scope="module")
def short_session():
    src = SourceParams(slow_channel_fraction=0.09, slow_channel_lifetime=1500.0, fss_drift_rate=0.3)
    ch = ChannelParams(polarization_drift=0.05, efficiency_decay=2.0)
    return run_session(src, ch, DetectorParams(), SessionParams(duration=12 * 60.0), seed=27)


class TestSession:
    def test_params_validation(self):
        with pytest.raises(ValueError):
            SessionParams(pulses_per_block=10)
        with pytest.raises(ValueError):
            SessionParams(sample_fraction=1.0)
        assert SessionParams().n_blocks == 480

    def test_blocks_and_keys(self, short_session):
        rep = short_session.report
        assert len(rep.blocks) == 12
        assert all(b.status == "ok" for b in rep.blocks)
        np.testing.assert_array_equal(short_session.alice_key, short_session.bob_key)
        assert len(short_session.alice_key) == int(rep.column("secure_bits").sum())

    def test_rate_accounting(self, short_session):
        rep = short_session.report
        raw = rep.column("raw_bits")
        sec = rep.column("secure_bits")
        assert np.all(np.diff(np.cumsum(raw)) >= 0) and np.all(np.diff(np.cumsum(sec)) >= 0)
        assert np.all(sec <= raw)
        q = rep.qber
        for b in rep.blocks:
            if b.qber >= QBER_LIMIT:
                assert b.secure_bits == 0
        assert np.all((q > 0) & (q < 0.2))

    def test_csv_and_json(self, short_session):
        rep = short_session.report
        lines = rep.to_csv().splitlines()
        assert lines[0] == "block_start_s,qber,raw_bps,secure_bps"
        assert len(lines) == 13
        doc = json.loads(rep.to_json())
        assert doc["totals"]["blocks"] == 12
        assert len(doc["blocks"]) == 12

    def test_flat_qber_without_drift(self):
        src = SourceParams(fss_S=0.96)
        res = run_session(src, CLEAN_CHANNEL, QUIET_DET, SessionParams(duration=8 * 60.0), seed=28)
        q = res.report.qber
        x = 0.96 * 0.252 / 0.6582119569
        analytic = 0.25 * x * x / (1 + x * x)
        bits = res.report.column("raw_bits")
        assert np.mean(q) == pytest.approx(analytic, abs=3 * np.sqrt(analytic / bits.sum()) + 0.003)
        slope = np.polyfit(np.arange(len(q)), q, 1)[0]
        assert abs(slope) * len(q) < 0.01

    def test_security_gate(self):
        # a 40 degree misalignment pushes every block above the limit
        ch = ChannelParams(polarization_drift=np.radians(40.0) * 3600 / 60.0)
        res = run_session(SourceParams(), ch, DetectorParams(), SessionParams(duration=3 * 60.0), seed=29)
        later = res.report.blocks[1:]
        assert all(b.qber >= QBER_LIMIT and b.secure_bits == 0 and b.status == "aborted" for b in later)

    def test_workers_give_identical_reports(self):
        src = SourceParams(slow_channel_fraction=0.09)
        p1 = SessionParams(duration=4 * 60.0, pulses_per_block=200_000)
        r1 = run_session(src, ChannelParams(), DetectorParams(), p1, seed=30)
        r2 = run_session(src, ChannelParams(), DetectorParams(), dataclasses.replace(p1, workers=3), seed=30)
        assert r1.report.to_json() == r2.report.to_json()
        np.testing.assert_array_equal(r1.alice_key, r2.alice_key)

    def test_wider_window_trade_off(self):
        src = SourceParams(slow_channel_fraction=0.09, slow_channel_lifetime=1500.0)
        p = SessionParams(duration=6 * 60.0)
        narrow = run_session(src, ChannelParams(), DetectorParams(), p, seed=31).report
        wide = run_session(src, ChannelParams(), DetectorParams(), dataclasses.replace(p, window=4000.0),
                           seed=31).report
        assert np.all(wide.column("raw_bits") >= narrow.column("raw_bits"))
        qn = narrow.column("qber") @ narrow.column("raw_bits") / narrow.column("raw_bits").sum()
        qw = wide.column("qber") @ wide.column("raw_bits") / wide.column("raw_bits").sum()
        sigma = np.sqrt(qn * (1 - qn) / narrow.column("raw_bits").sum())
        assert qw >= qn - 3 * sigma
