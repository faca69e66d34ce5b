"""Command-line interface: simulate, analyze, tomography, qkd, otp.

Exit codes:
    0  success
    2  usage error (bad arguments)
    3  configuration error
    4  input/output or file-format error
    5  fit or reconstruction did not converge
    6  security abort (no block below the 11 % QBER limit)
    7  key material error (insufficient key or attempted reuse)
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .qkd import (KeyExhausted, KeyMaterial, KeyReuseError, KeyStore, read_bmp, read_key,
                  run_session, write_bmp, write_key)
from .qkd.otp import Bitmap, otp_encrypt
from .quantum_math import format_density_matrix
from .source_model import simulate_pulses, write_events
from .stream_analysis import (FitError, TimeTagStream, build_histogram, detect, fit_lifetime, g2_zero,
                              g2_zero_error, on_fraction_beta, pair_probability_epsilon, read_ttag,
                              start_stop_histogram, write_ttag)
from .stream_analysis.estimators import format_value_error
from .tomography import TomographyError, mle_reconstruct_full, simulate_tomography_run, window_sensitivity

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_CONVERGENCE = 5
EXIT_SECURITY = 6
EXIT_KEY = 7

# channels of the characterization time-tag file
CH_XX = (0, 1)  # XX line split 50:50
CH_X = (2, 3)  # X line split 50:50


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdqkd", description=__doc__.splitlines()[0],
                                epilog=f"Default config directory: ${cfgmod.CONFIG_DIR_ENV}.")
    p.add_argument("--config", help=f"config file or shipped name (default {cfgmod.DEFAULT_CONFIG})")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--threads", type=_positive_int, default=1, help="maximum worker threads")
    p.add_argument("--window-offset-ps", type=float, help="shift the coincidence window center")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate emission events and characterization time tags")
    s.add_argument("--pulses", type=_positive_int, help="number of excitation pulses")

    a = sub.add_parser("analyze", help="histogram and fit a characterization time-tag file")
    a.add_argument("file", help="TTAG1 file written by 'simulate'")
    a.add_argument("--kind", required=True, choices=("g2", "beta", "epsilon", "lifetime"))
    a.add_argument("--arm", choices=("xx", "x"), default="x")
    a.add_argument("--bin-width", type=_positive_int, help="histogram bin width in ps")
    a.add_argument("--window", type=_positive_int, default=2000, help="peak integration window in ps")
    a.add_argument("--irf-sigma", type=float, help="IRF width for lifetime fits (default from detector)")
    a.add_argument("--model", choices=("single", "double"), default="single",
                   help="lifetime model; 'double' adds the slow decay channel")

    t = sub.add_parser("tomography", help="simulate the 36-basis tomography and reconstruct the state")
    t.add_argument("--scan", action="store_true", help="also scan the window offset from -1 to +1 ns")

    sub.add_parser("qkd", help="run a BBM92 key generation session")

    o = sub.add_parser("otp", help="one-time-pad encrypt or decrypt a file with a key file")
    o.add_argument("mode", choices=("encrypt", "decrypt"))
    o.add_argument("--key", required=True, help="QKEY1 key file")
    o.add_argument("--in", dest="infile", required=True)
    o.add_argument("--output", required=True, help="output file")
    return p


def _load_config(args) -> cfgmod.ExperimentConfig:
    try:
        cfg = cfgmod.load(args.config)
    except FileNotFoundError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    except cfgmod.ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    over = {}
    if args.seed is not None:
        over["run"] = {"seed": args.seed}
    if args.window_offset_ps is not None:
        over["session"] = {"window_offset": args.window_offset_ps}
    if args.threads:
        over.setdefault("session", {})["workers"] = args.threads
    try:
        return cfgmod.with_overrides(cfg, **over)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _outdir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {out}: {exc}") from None
    return out


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from None


# --- simulate -------------------------------------------------------------------

def characterization_tags(stream, det, seed: int) -> TimeTagStream:
    """Both lines, each split 50:50 onto two detectors (channels 0/1 for XX, 2/3 for X)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(30,)))
    _, txx = stream.arm_photons("xx")
    _, tx = stream.arm_photons("x")
    t = np.concatenate([txx, tx])
    ch = np.concatenate([rng.integers(0, 2, len(txx)), 2 + rng.integers(0, 2, len(tx))])
    return detect(t, ch, 4, det, stream.n_pulses * stream.period_ps, rng)


def cmd_simulate(args, cfg) -> int:
    pulses = args.pulses if args.pulses is not None else cfg.run.pulses
    seed = cfg.run.seed
    out = _outdir(args)
    stream = simulate_pulses(cfg.source, pulses, seed, workers=args.threads)
    tags = characterization_tags(stream, cfg.detector, seed)
    ev_path, tt_path = out / "events.qdev", out / "tags.ttag"
    try:
        n_rec = write_events(ev_path, [stream], pulses, cfg.source.rep_rate)
        write_ttag(tt_path, tags)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write simulation output in {out}: {exc}") from None
    pairs = int(np.count_nonzero(stream.is_pair))
    counts = np.bincount(tags.channel, minlength=4)
    print(f"pulses={pulses}")
    print(f"pairs={pairs}")
    print(f"pair_fraction={pairs / pulses:.6f}")
    print(f"on_fraction={stream.on_fraction:.6f}")
    print(f"event_records={n_rec}")
    print("clicks_per_channel=" + ",".join(str(int(c)) for c in counts))
    print(f"wrote {ev_path} and {tt_path}")
    return EXIT_OK


# --- analyze --------------------------------------------------------------------

def cmd_analyze(args, cfg) -> int:
    try:
        tags = read_ttag(args.file)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {args.file}: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_IO, f"{args.file}: {exc}") from None
    out = _outdir(args)
    period = int(round(cfg.source.period_ps))
    chans = CH_XX if args.arm == "xx" else CH_X
    name = f"{args.kind}_{args.arm}" if args.kind in ("g2", "beta", "lifetime") else args.kind
    try:
        if args.kind == "g2":
            bw = args.bin_width or 50
            h = build_histogram(tags.channel_times(chans[0]), tags.channel_times(chans[1]), bw,
                                2 * (12 * period + bw))
            g, ge = g2_zero(h, args.window, period), g2_zero_error(h, args.window, period)
            report = f"g2_zero={g:.6f}\ng2_zero_err={ge:.6f}\nreport={format_value_error(g, ge)}\n"
        elif args.kind == "beta":
            bw = args.bin_width or 200_000
            h = build_histogram(tags.channel_times(chans[0]), tags.channel_times(chans[1]), bw, 600 * bw)
            fit = on_fraction_beta(h)
            report = (f"beta={fit.beta:.6f}\nbeta_err={fit.beta_err:.6f}\ng2_plateau={fit.g2_zero:.6f}\n"
                      f"correlation_time_ps={fit.correlation_time:.6g}\nreport={fit.report()}\n")
        elif args.kind == "epsilon":
            bw = args.bin_width or 50
            h = build_histogram(tags.channel_times(*CH_XX), tags.channel_times(*CH_X), bw, 2 * (12 * period + bw))
            eps, err = pair_probability_epsilon(h, args.window, period)
            report = f"epsilon={eps:.6f}\nepsilon_err={err:.6f}\nreport={format_value_error(eps, err)}\n"
        else:
            bw = args.bin_width or 8
            jitter = cfg.detector.jitter_sigma
            if args.arm == "xx":
                h = start_stop_histogram(tags.channel_times(*CH_XX), period, bw, -50 * bw, 500 * bw)
                irf = jitter if args.irf_sigma is None else args.irf_sigma
            else:
                # X decay is measured from the XX photon (start) to the X photon (stop)
                h = build_histogram(tags.channel_times(*CH_XX), tags.channel_times(*CH_X), bw, 1100 * bw,
                                    center_offset=500 * bw)
                irf = jitter * np.sqrt(2) if args.irf_sigma is None else args.irf_sigma
            hi = 500 * bw
            if args.model == "double":
                # the slow tail needs the whole period, short of the next pulse's peak
                hi = (period - 2000) // bw * bw
                if args.arm == "x":
                    h = build_histogram(tags.channel_times(*CH_XX), tags.channel_times(*CH_X), bw,
                                        hi + 50 * bw, center_offset=(hi - 50 * bw) // 2)
            fit = fit_lifetime(h, args.model, irf_sigma=irf, fit_range=(-50 * bw, hi))
            report = fit.report()
    except FitError as exc:
        raise CliError(EXIT_CONVERGENCE, f"{args.kind}: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_IO, f"{args.kind} analysis of {args.file}: {exc}") from None
    try:
        h.to_csv(out / f"{name}.csv")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out / name}.csv: {exc}") from None
    _write_text(out / f"{name}.txt", report)
    sys.stdout.write(report)
    return EXIT_OK


# --- tomography -----------------------------------------------------------------

def cmd_tomography(args, cfg) -> int:
    out = _outdir(args)
    run = simulate_tomography_run(cfg.source, cfg.detector, cfg.tomography, cfg.run.seed, workers=args.threads)
    counts = run.counts(cfg.session.window_offset)
    try:
        rec = mle_reconstruct_full(counts)
    except TomographyError as exc:
        raise CliError(EXIT_CONVERGENCE, str(exc)) from None
    _write_text(out / "counts.csv", counts.to_csv())
    _write_text(out / "rho.txt", format_density_matrix(rec.rho) + "\n")
    _write_text(out / "tomography_report.txt", rec.report())
    sys.stdout.write("\n".join(rec.report().splitlines()[:3]) + "\n")
    if args.scan:
        try:
            curve = window_sensitivity(run)
        except TomographyError as exc:
            raise CliError(EXIT_CONVERGENCE, str(exc)) from None
        _write_text(out / "window_scan.csv",
                    "window_offset_ps,qber\n" + "".join(f"{o:g},{q:.6f}\n" for o, q in curve))
    return EXIT_OK


# --- qkd ------------------------------------------------------------------------

_GNUPLOT = """# plot the key generation time series: gnuplot -p session.gp
set datafile separator ','
set multiplot layout 2,1
set ylabel 'QBER'
plot 'session.csv' using ($1/3600):2 skip 1 with lines title 'QBER'
set xlabel 'time (h)'
set ylabel 'rate (bits/s)'
plot 'session.csv' using ($1/3600):3 skip 1 with lines title 'raw', \\
     '' using ($1/3600):4 skip 1 with lines title 'secure'
unset multiplot
"""


def cmd_qkd(args, cfg) -> int:
    import uuid

    out = _outdir(args)
    res = run_session(cfg.source, cfg.channel, cfg.detector, cfg.session, cfg.run.seed)
    rep = res.report
    sid = uuid.UUID(int=cfg.run.seed % (1 << 128))
    _write_text(out / "session.csv", rep.to_csv())
    _write_text(out / "session.json", rep.to_json())
    _write_text(out / "session.gp", _GNUPLOT)
    try:
        write_key(out / "alice.qkey", KeyMaterial(res.alice_key, "amplified"), sid)
        write_key(out / "bob.qkey", KeyMaterial(res.bob_key, "amplified"), sid)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write key files in {out}: {exc}") from None
    tot = rep.totals()
    for k in ("blocks", "blocks_ok", "mean_qber", "min_qber", "mean_raw_rate", "mean_secure_rate",
              "secure_over_raw", "secure_bits"):
        print(f"{k}={tot[k]:.6g}" if isinstance(tot[k], float) else f"{k}={tot[k]}")
    statuses = [b.status for b in rep.blocks]
    if statuses and "ok" not in statuses and "aborted" in statuses:
        print("security abort: no block below the QBER limit", file=sys.stderr)
        return EXIT_SECURITY
    return EXIT_OK


# --- otp ------------------------------------------------------------------------

def _spent_path(key_path: Path) -> Path:
    return key_path.with_name(key_path.name + ".spent")


def _load_store(key_path: Path) -> KeyStore:
    key, _ = read_key(key_path)
    store = KeyStore(key.bits)
    sp = _spent_path(key_path)
    if sp.exists():
        for start, n in json.loads(sp.read_text())["ranges"]:
            store.take_range(start, n)
    return store


def _record_spent(key_path: Path, start: int, n: int) -> None:
    sp = _spent_path(key_path)
    ranges = json.loads(sp.read_text())["ranges"] if sp.exists() else []
    ranges.append([start, n])
    sp.write_text(json.dumps({"ranges": ranges}))


def cmd_otp(args, cfg) -> int:
    key_path, in_path, out_path = Path(args.key), Path(args.infile), Path(args.output)
    meta_path = out_path.with_name(out_path.name + ".otp.json")
    try:
        store = _load_store(key_path)
        raw = in_path.read_bytes()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read input: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    is_bmp = raw[:2] == b"BM"
    try:
        bmp = read_bmp(in_path) if is_bmp else None
    except ValueError as exc:
        raise CliError(EXIT_IO, f"{in_path}: {exc}") from None
    payload = bmp.pixels.tobytes() if is_bmp else raw
    nbits = 8 * len(payload)
    try:
        if args.mode == "encrypt":
            start = store.cursor
            key = store.take(nbits)
        else:
            src_meta = in_path.with_name(in_path.name + ".otp.json")
            if not src_meta.exists():
                raise CliError(EXIT_IO, f"missing {src_meta} (key offset of the ciphertext)")
            start = json.loads(src_meta.read_text())["key_offset"]
            key = store.take_range(start, nbits)
    except (KeyExhausted, KeyReuseError) as exc:
        raise CliError(EXIT_KEY, str(exc)) from None
    data = otp_encrypt(payload, key)
    try:
        if is_bmp:
            write_bmp(out_path, Bitmap(bmp.width, bmp.height,
                                       np.frombuffer(data, np.uint8).reshape(bmp.pixels.shape)))
        else:
            out_path.write_bytes(data)
        if args.mode == "encrypt":
            meta_path.write_text(json.dumps({"key_offset": start, "key_bits": nbits}))
        _record_spent(key_path, start, nbits)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out_path}: {exc}") from None
    print(f"{args.mode}ed {len(payload)} bytes with key bits [{start}, {start + nbits})")
    return EXIT_OK


_COMMANDS = {"simulate": cmd_simulate, "analyze": cmd_analyze, "tomography": cmd_tomography,
             "qkd": cmd_qkd, "otp": cmd_otp}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_config(args)
        return _COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
