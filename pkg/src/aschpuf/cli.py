"""Command-line experiment driver.

Every subcommand writes CSV (header first) to ``--out`` or stdout and is
deterministic under ``--seed``. Exit codes: 0 success, 2 bad configuration,
3 verification failure, 4 calibration target missed.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import experiments as ex
from ._rng import derive_rng
from .asch import run_d_asch_powerup, run_s_asch
from .cell import CellConfig, ConfigError, Environment, ModelConfig, dump_config, load_config
from .keygen import Key, generate_key, golden_plane
from .metrics import reports_to_csv
from .protocol import DeviceClient, EnrollmentDB, EnrollmentRecord, ProtocolError, VerificationServer, local_pair

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_TARGET = 4

MODE_CHOICES = ("s-asch", "d-asch", "asc")

CALIBRATE_COLUMNS = ["name", "value", "target", "low", "high", "ok"]
SWEEP_COLUMNS = ["mode", "skew_mV", "vdd", "temperature", "masking_ratio", "n_errors", "n_evals", "ber",
                 "pessimistic_ber"]
ENV_COLUMNS = ["sweep"] + SWEEP_COLUMNS
AGING_COLUMNS = ["mode", "enrolled_at", "hours", "skew_mV", "masking_ratio"]
CLIENT_COLUMNS = ["chip_id", "mode", "session", "vdd", "temperature", "key_bits", "masking_ratio", "accepted",
                  "reason"]


def _floats(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated number list: {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _positive(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _seed(text: str) -> int:
    try:
        n = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= n < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return n


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, chips: int = 10, evals: int = 2000) -> None:
    p.add_argument("--config", help="model config file (key = value lines); default: shipped silicon model")
    p.add_argument("--seed", type=_seed, help="experiment seed (default: the config's seed)")
    p.add_argument("--chips", type=_positive, default=chips)
    p.add_argument("--rows", type=_positive, default=32)
    p.add_argument("--cols", type=_positive, default=128)
    p.add_argument("--temps", type=_floats, default=list(ex.TEMP_GRID), help="temperatures in degC, comma separated")
    p.add_argument("--vdds", type=_floats, default=list(ex.VDD_GRID), help="supply voltages in V, comma separated")
    p.add_argument("--evals", type=_positive, default=evals, help="evaluations per environment point")
    p.add_argument("--out", help="CSV output path (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aschpuf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", help="raw-stability statistics against the calibration targets")
    _common(p)
    p.add_argument("--search", action="store_true",
                   help="fit sigma_noise, sigma_voltco and sigma_tempco to the targets before reporting")
    p.add_argument("--temperature-target", type=float, default=0.036,
                   help="raw BER over temperature that --search aims for")
    p.add_argument("--write-config", help="save the (possibly fitted) config here")

    p = sub.add_parser("sweep-skew", help="masking ratio and BER versus skew at the worst corner")
    _common(p)
    p.add_argument("--skews", type=_floats, default=[0.0, 2.6, 5.2, 7.8, 10.4, 13.0, 15.6, 18.2, 20.8, 23.4, 26.0])
    p.add_argument("--mode", choices=MODE_CHOICES, action="append",
                   help="flow to run (repeatable; default asc and s-asch)")
    p.add_argument("--corner", type=_floats, default=[ex.WORST_CORNER.vdd, ex.WORST_CORNER.temperature],
                   help="evaluation corner as VDD,TEMP")

    p = sub.add_parser("sweep-env", help="BER versus temperature and versus supply, raw and stabilized")
    _common(p)
    p.add_argument("--skews", type=_floats, default=[5.2, 10.4, 15.6, 20.8])
    p.add_argument("--mode", choices=MODE_CHOICES, action="append",
                   help="flow to run (repeatable; default s-asch and d-asch)")

    p = sub.add_parser("aging", help="masking ratio needed for zero errors versus stress time")
    _common(p, chips=2)
    p.add_argument("--hours", type=_floats, default=list(ex.AGING_HOURS))
    p.add_argument("--enroll-hours", type=_floats, default=[0.0, 24.0, 48.0])
    p.add_argument("--skews", type=_floats, help="candidate skews for the zero-error search")

    p = sub.add_parser("serve", help="run the verification server on a TCP port")
    p.add_argument("--db", required=True, help="enrollment database file")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7410)

    p = sub.add_parser("client", help="enroll simulated chips and verify power-up sessions")
    _common(p, chips=1)
    p.add_argument("--mode", choices=("s-asch", "d-asch"), default="d-asch")
    p.add_argument("--sessions", type=_positive, default=1, help="verification sessions per chip")
    p.add_argument("--key-bits", type=_positive, default=128)
    p.add_argument("--skews", type=_floats, default=[24.0], help="self-check skew in mV (first value is used)")
    p.add_argument("--db", help="enrollment database for the in-process server (default: in memory)")
    p.add_argument("--host", help="connect to a running server instead of an in-process one")
    p.add_argument("--port", type=int, default=7410)
    p.add_argument("--tamper", action="store_true", help="flip one key bit before sending the proof")
    return parser


def _model(args) -> ModelConfig:
    cfg = load_config(args.config) if args.config else ModelConfig()
    return cfg


def _seed_of(args, cfg: ModelConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


def _emit(args, text: str) -> None:
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _chips(args, cfg: ModelConfig, seed: int):
    # a seed other than the config's also draws a fresh chip population
    return ex.make_chips(replace(cfg, seed=seed), args.chips, args.rows, args.cols)


def cmd_calibrate(args) -> int:
    cfg = _model(args)
    if args.search:
        sn = ex.fit_noise(cfg.sigma_process)
        cfg = replace(cfg, sigma_noise=sn, sigma_voltco=ex.fit_voltco(cfg.sigma_process, sn, vdds=args.vdds),
                      sigma_tempco=ex.fit_tempco(cfg.sigma_process, sn, args.temperature_target, temps=args.temps))
    seed = _seed_of(args, cfg)
    targets = ex.calibration_report(replace(cfg, seed=seed), args.chips, args.evals, seed, args.temps, args.vdds,
                                    rows=args.rows, cols=args.cols)
    rows = [dict(name=t.name, value=t.value, target=t.target, low=t.low, high=t.high, ok=int(t.ok)) for t in targets]
    _emit(args, reports_to_csv(rows, CALIBRATE_COLUMNS))
    if args.write_config:
        with open(args.write_config, "w") as fh:
            fh.write(dump_config(cfg))
    return EXIT_OK if all(t.ok for t in targets) else EXIT_TARGET


def cmd_sweep_skew(args) -> int:
    cfg = _model(args)
    seed = _seed_of(args, cfg)
    if len(args.corner) != 2:
        raise ConfigError("--corner takes VDD,TEMP")
    corner = Environment(*args.corner)
    modes = tuple(args.mode or ("asc", "s-asch"))
    chips = _chips(args, cfg, seed)
    rows = ex.sweep_skew_chips(chips, sorted(args.skews), args.evals, seed, corner, modes)
    _emit(args, reports_to_csv(rows, SWEEP_COLUMNS))
    return EXIT_OK


def cmd_sweep_env(args) -> int:
    cfg = _model(args)
    seed = _seed_of(args, cfg)
    modes = tuple(args.mode or ("s-asch", "d-asch"))
    chips = _chips(args, cfg, seed)
    rows = ex.sweep_env_chips(chips, sorted(args.skews), args.evals, seed, args.temps, args.vdds, modes)
    _emit(args, reports_to_csv(rows, ENV_COLUMNS))
    return EXIT_OK


def cmd_aging(args) -> int:
    cfg = _model(args)
    seed = _seed_of(args, cfg)
    hours = sorted(args.hours)
    rows = ex.aging_experiment(replace(cfg, seed=seed), args.chips, args.evals, seed, hours,
                               tuple(args.enroll_hours), skews=args.skews, rows=args.rows, cols=args.cols)
    _emit(args, reports_to_csv(rows, AGING_COLUMNS))
    return EXIT_OK


def cmd_serve(args) -> int:
    db = EnrollmentDB(args.db)
    with VerificationServer((args.host, args.port), db) as server:
        print(f"serving {len(db)} enrolled chip(s) on {args.host}:{server.server_address[1]}", file=sys.stderr)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    return EXIT_OK


def _session_env(seed: int, chip_id: str, session: int, temps, vdds) -> Environment:
    rng = derive_rng(seed, "client-env", chip_id, session)
    return Environment(float(rng.choice(vdds)), float(rng.choice(temps)))


def run_client(client: DeviceClient, args, cfg: ModelConfig, seed: int) -> list[dict]:
    skew = args.skews[0]
    rows = []
    for chip in _chips(args, cfg, seed):
        nominal = chip.model.nominal_env
        rng = derive_rng(seed, "client-enroll", chip.chip_id)
        if args.mode == "s-asch":
            flow = run_s_asch(chip, nominal, skew, rng, key_length=args.key_bits)
            stored_map = flow.map
            verdict = client.enroll(EnrollmentRecord.static(chip.chip_id, flow.key, flow.map))
        else:
            orig = golden_plane(chip, CellConfig.ORIGINAL, nominal, rng)
            healed = golden_plane(chip, CellConfig.HEALED, nominal, rng)
            verdict = client.enroll(EnrollmentRecord.dynamic(chip.chip_id, orig, healed))
        if not verdict.accepted:
            rows.append(dict(chip_id=chip.chip_id, mode=args.mode, session="enroll", accepted=0,
                             reason=verdict.reason))
            continue
        for s in range(args.sessions):
            env = _session_env(seed, chip.chip_id, s, args.temps, args.vdds)
            rng = derive_rng(seed, "client-session", chip.chip_id, s)
            if args.mode == "s-asch":
                smap = stored_map
                key = generate_key(chip, smap, env, args.key_bits, rng)
                sent_map = None
            else:
                flow = run_d_asch_powerup(chip, env, skew, rng, key_length=args.key_bits)
                smap, key, sent_map = flow.map, flow.key, flow.map
            if args.tamper:
                bits = key.bits.copy()
                bits[0] = ~bits[0]
                key = Key(bits, key.provenance)
            verdict = client.verify(chip.chip_id, key, sent_map)
            rows.append(dict(chip_id=chip.chip_id, mode=args.mode, session=s, vdd=env.vdd,
                             temperature=env.temperature, key_bits=key.length,
                             masking_ratio=smap.masking_ratio, accepted=int(verdict.accepted),
                             reason=verdict.reason))
    return rows


def cmd_client(args) -> int:
    cfg = _model(args)
    seed = _seed_of(args, cfg)
    if args.host:
        client = DeviceClient.connect(args.host, args.port)
    else:
        client, _ = local_pair(EnrollmentDB(args.db))
    with client:
        rows = run_client(client, args, cfg, seed)
    _emit(args, reports_to_csv(rows, CLIENT_COLUMNS))
    return EXIT_OK if rows and all(r["accepted"] for r in rows) else EXIT_VERIFY


COMMANDS = {
    "calibrate": cmd_calibrate,
    "sweep-skew": cmd_sweep_skew,
    "sweep-env": cmd_sweep_env,
    "aging": cmd_aging,
    "serve": cmd_serve,
    "client": cmd_client,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, OSError) as exc:
        print(f"aschpuf: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"aschpuf: protocol error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
