"""``dtnative`` command line.

Exit codes: 0 success, 1 unexpected error or failed self-test, 2 invalid
configuration, 3 bind failure, 4 protocol violation, 5 I/O failure,
6 watchdog timeout.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .errors import (
    BindFailure,
    InvalidConfig,
    IoFailure,
    ProtocolViolation,
    WatchdogTimeout,
)

EXIT_CODES = ((InvalidConfig, 2), (BindFailure, 3), (ProtocolViolation, 4),
              (IoFailure, 5), (WatchdogTimeout, 6))


def _int_list(text):
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _combos(text):
    out = []
    for part in text.split(","):
        try:
            a, c = part.split(":")
            out.append((float(a), float(c)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"combo must be ACTOR:CRITIC, got {part!r}")
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="dtnative", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="global JSON config file")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="one experiment run")
    r.add_argument("--sensors", type=int)
    r.add_argument("--mode", choices=("dt-native", "traditional"))
    r.add_argument("--duration", type=float, help="sim seconds")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="directory for metrics CSV and twins/")

    c = sub.add_parser("compare", help="DT-native vs Traditional over several seeds")
    c.add_argument("--sensors", type=_int_list, default=[5, 20, 90])
    c.add_argument("--runs", type=int, default=10)
    c.add_argument("--duration", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", help="directory for compare.csv (and per-run outputs)")

    s = sub.add_parser("sweep", help="learning-rate sweep")
    s.add_argument("--episodes", type=int, default=135)
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--sensors", type=int, default=20)
    s.add_argument("--combos", type=_combos, default=None,
                   help="e.g. 0.001:0.002,0.01:0.02,0.1:0.2")
    s.add_argument("--out", help="directory for per-curve CSVs and sweep_summary.csv")

    t = sub.add_parser("selftest", help="run the property suites")
    t.add_argument("--quick", action="store_true")

    v = sub.add_parser("serve", help="serve one sim session over TCP")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8813)
    v.add_argument("--sensors", type=int)
    v.add_argument("--duration", type=float)
    v.add_argument("--seed", type=int)
    v.add_argument("--time-scale", type=float, default=1.0,
                   help="wall seconds per sim second (0 = as fast as possible)")
    return p


def _cmd_run(args, conf):
    from .bench.config import experiment_config
    from .bench.experiment import run_experiment
    cfg = experiment_config(conf["experiment"], sensors=args.sensors, mode=args.mode,
                            duration=args.duration, seed=args.seed, out_dir=args.out)
    report = run_experiment(cfg, conf["sim"])
    print(report.summary())
    return 0


def _cmd_compare(args, conf):
    from .bench.compare import compare_modes
    from .bench.config import experiment_config
    if args.runs < 1:
        raise InvalidConfig({"runs": "must be >= 1"})
    base = experiment_config(conf["experiment"], duration=args.duration, seed=args.seed,
                             out_dir=args.out)
    report = compare_modes(base, args.sensors, args.runs, conf["sim"],
                           progress=lambda rep: print(rep.summary(), flush=True))
    print(report.text())
    if args.out:
        report.write(Path(args.out) / "compare.csv")
    return 0


def _cmd_sweep(args, conf):
    from .bench.sweep import DEFAULT_COMBOS, sweep_learning_rates
    from .learner.ddpg import DdpgConfig
    if args.episodes < 1 or args.seeds < 1:
        raise InvalidConfig({"episodes/seeds": "must be >= 1"})
    combos = args.combos or DEFAULT_COMBOS
    base = DdpgConfig.from_dict(conf["learner"]) if conf["learner"] else DdpgConfig()
    report = sweep_learning_rates(
        combos, args.episodes, args.seeds, args.sensors, base, conf["sim"],
        progress=lambda c, s, loss: print(f"combo={c} seed={s} final_loss={loss:.6g}",
                                          flush=True))
    print(report.text())
    if args.out:
        report.write(args.out)
    return 0


def _cmd_selftest(args, conf):
    from .selftest import run_all
    return 0 if run_all(quick=args.quick) else 1


def _cmd_serve(args, conf):
    from .bench.config import experiment_config
    from .sim.server import SimServer, listen
    cfg = experiment_config(conf["experiment"], sensors=args.sensors,
                            duration=args.duration, seed=args.seed)
    if args.time_scale < 0:
        raise InvalidConfig({"time_scale": "must be >= 0"})
    server = SimServer(cfg.sim_config(conf["sim"]), cfg.duration, cfg.window,
                       args.time_scale, cfg.max_frame)
    lsock = listen(args.host, args.port)
    print(f"listening on {args.host}:{lsock.getsockname()[1]}", flush=True)
    with lsock:
        conn, peer = lsock.accept()
    with conn:
        log = server.serve(conn)
    print(f"session with {peer[0]}:{peer[1]} ended at sim t={log.sim_t} "
          f"events={len(log.emit_wall)} feedback={len(log.feedback)}")
    if log.error:
        raise ProtocolViolation("server", log.error)
    return 0


COMMANDS = {"run": _cmd_run, "compare": _cmd_compare, "sweep": _cmd_sweep,
            "selftest": _cmd_selftest, "serve": _cmd_serve}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        from .bench.config import load_config
        conf = load_config(args.config)
        return COMMANDS[args.command](args, conf)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
