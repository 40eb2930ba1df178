"""mboxsim command line: run presets, plot their CSVs, poke a running system.

Exit status: 0 success, 1 usage or configuration error, 2 a threshold
check failed, 3 an always-on invariant fired during simulation.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import yaml

from . import core_model as cm
from .sim.config import ConfigError, apply_overrides
from .sim.control import PE_ITEMS, ControlError, HostControl, parse_target
from .sim.events import InvariantViolation
from .sim.experiments import SCHEMAS, load_preset, preset_names, run_experiment
from .sim.runner import run_system
from .sim.metrics import snapshot
from .sim.system import build_system

log = logging.getLogger("mboxsim")

EXIT_OK, EXIT_USAGE, EXIT_THRESHOLD, EXIT_INVARIANT = 0, 1, 2, 3
OUT_ENV = "MBOXSIM_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "results")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# ---------------------------------------------------------------- run

def cmd_run(args) -> int:
    try:
        preset = load_preset(args.preset)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    out = out_root(args.out)
    if preset.kind is None:
        # A base configuration: one simulation, counters snapshot out.
        cfg = apply_overrides(preset.config, args.set) if args.set else preset.config
        if args.seed is not None:
            cfg.run.seed = args.seed
        system = run_system(cfg)
        snap = snapshot(system)
        out.mkdir(parents=True, exist_ok=True)
        path = snap.write_csv(out / f"{preset.name}.snapshot.csv")
        c = system.census()
        print(f"{preset.name}: offered {c.offered}, delivered {c.delivered}, "
              f"drops {c.rx_drops + c.iface_drops + c.pe_drops}")
        print(f"wrote {path}")
        return EXIT_OK
    options = {
        "load": args.load, "rules": args.rules, "packets": args.packets,
        "sizes": args.sizes, "probes": args.probes,
    }
    result = run_experiment(args.preset, args.set, seed=args.seed, jobs=args.jobs,
                            options={k: v for k, v in options.items() if v is not None})
    csv_path, sum_path = result.write(out)
    for check in result.checks:
        print(check.line())
    print(f"wrote {csv_path} and {sum_path}")
    return EXIT_OK if result.passed else EXIT_THRESHOLD


# ---------------------------------------------------------------- plot

def read_result_csv(path: Path) -> tuple[str, list[dict]]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None
    rows = list(csv.DictReader(text.splitlines()))
    if not rows:
        raise UsageError(f"{path}: no data rows")
    schema = rows[0].get("schema")
    kinds = {v[0]: k for k, v in SCHEMAS.items()}
    if schema not in kinds:
        raise UsageError(f"{path}: unknown schema {schema!r}")
    missing = [c for c in SCHEMAS[kinds[schema]][1] if c not in rows[0]]
    if missing:
        raise UsageError(f"{path}: schema {schema} is missing columns {', '.join(missing)}")
    return kinds[schema], rows


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(args.csv)
    kind, rows = read_result_csv(path)
    if kind not in ("throughput", "latency", "loopback"):
        raise UsageError(f"no plot for {SCHEMAS[kind][0]} results")
    if args.preset:
        want = load_preset(args.preset).kind
        if want != kind:
            raise UsageError(f"{path} holds {kind} results, preset {args.preset} expects {want}")
    rows.sort(key=lambda r: int(r["size"]))
    sizes = [int(r["size"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    if kind == "latency":
        ax.plot(sizes, [float(r["rtt_mean_us"]) for r in rows], "o-", label="simulated (mean)")
        grid = range(0, max(sizes) + 1, max(1, max(sizes) // 200))
        ax.plot(list(grid), [cm.analytic_latency_us(s) for s in grid], "k--",
                label="analytic serialization model")
        ax.set_ylabel("round-trip latency (us)")
    else:
        ax.plot(sizes, [float(r["forwarded_pps"]) / 1e6 for r in rows], "o-", label="forwarded")
        ax.plot(sizes, [float(r["offered_pps"]) / 1e6 for r in rows], "k:", label="offered load")
        if kind == "throughput":
            ax.plot(sizes, [float(r["cap_pps"]) / 1e6 for r in rows], "r:",
                    label="processor cap")
        ax.set_ylabel("packet rate (Mpps)")
        ax.set_yscale("log")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("packet size (bytes)")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    ax.set_title(rows[0].get("preset", ""))
    fig.tight_layout()
    out = Path(args.output) if args.output else path.with_suffix(".png")
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- ctl

def run_ctl_command(ctl: HostControl, words: list[str], out_dir: Path) -> str:
    """One control command; returns the printable reply."""
    if not words:
        raise ControlError("empty command")
    op = words[0].lower()
    if op == "run":
        if len(words) != 2:
            raise ControlError("usage: run <microseconds>")
        ctl.advance_us(float(words[1]))
        return f"t={ctl.now} ps"
    if len(words) < 2:
        raise ControlError(f"usage: {op} <target> ...")
    n = ctl.sys.cfg.num_pes
    if op in ("read", "write"):
        if parse_target(words[1], n) != "sched":
            raise ControlError("registers live on the scheduler: use target sched")
        if len(words) < 3:
            raise ControlError(f"usage: {op} sched <register> [value]")
        if op == "read":
            v = ctl.read(words[2])
            return f"{words[2]} = {v} ({v:#x})"
        value = int(words[3], 0) if len(words) > 3 else 0
        ctl.write(words[2], value)
        return f"{words[2]} <- {value:#x}"
    pe = parse_target(words[1], n)
    if pe == "sched":
        raise ControlError(f"scheduler commands are read and write, not {op}")
    if op == "counters":
        c = ctl.counters(pe)
        return " ".join(f"{k}={v}" for k, v in c.items())
    if op == "debug":
        if len(words) > 2:
            ctl.debug_write(pe, int(words[2], 0))
            return f"p{pe} debug <- {words[2]}"
        return f"p{pe} debug = {ctl.debug_read(pe):#x}"
    if op == "dump":
        if len(words) != 3:
            raise ControlError("usage: dump pN <region>")
        bin_path, man_path = ctl.dump(pe, words[2], out_dir)
        return f"wrote {bin_path} and {man_path}"
    if op == "irq":
        if len(words) != 3:
            raise ControlError("usage: irq pN evict|poke|<bits>")
        ctl.interrupt(pe, words[2])
        return f"p{pe} irq {words[2]}"
    if op == "pause":
        ctl.pause(pe)
        return f"p{pe} paused"
    if op == "resume":
        ctl.resume(pe)
        return f"p{pe} resumed"
    raise ControlError(f"unknown command {op!r}; have read, write, run, {', '.join(PE_ITEMS)}")


def cmd_ctl(args) -> int:
    try:
        preset = load_preset(args.preset)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    cfg = apply_overrides(preset.config, args.set) if args.set else preset.config
    system = build_system(cfg, traffic=not args.idle)
    ctl = HostControl(system)
    if args.at_us:
        ctl.advance_us(args.at_us)
    commands = list(args.commands)
    if args.script:
        commands += [ln for ln in Path(args.script).read_text().splitlines()
                     if ln.strip() and not ln.lstrip().startswith("#")]
    out = out_root(args.out)
    for text in commands:
        for part in text.split(";"):
            words = part.split()
            if not words:
                continue
            try:
                reply = run_ctl_command(ctl, words, out)
            except ControlError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_USAGE
            print(f"[{ctl.now / 1e6:.3f} us] {reply}")
    return EXIT_OK


# ---------------------------------------------------------------- config

def cmd_validate(args) -> int:
    try:
        preset = load_preset(args.config)
        cfg = apply_overrides(preset.config, args.set) if args.set else preset.config
    except (ConfigError, KeyError, yaml.YAMLError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.dump:
        print(yaml.safe_dump(cfg.to_dict(), sort_keys=False), end="")
    print(f"ok: {preset.name} ({cfg.num_pes} processors, {cfg.clusters} clusters, "
          f"handler {cfg.handlers.default.name})")
    return EXIT_OK


def cmd_list(args) -> int:
    for name in preset_names():
        p = load_preset(name)
        print(f"{name:<22} {p.kind or 'config':<11} {p.description}")
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mboxsim", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def overrides(p):
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, e.g. --set traffic.size=256 (repeatable)")

    p = sub.add_parser("run", help="run a preset and check its thresholds")
    p.add_argument("preset", help="preset name or YAML file")
    overrides(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep points")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./results)")
    p.add_argument("--load", choices=["low", "high"], help="latency preset load level")
    p.add_argument("--rules", help="blacklist rules file for the firewall preset")
    p.add_argument("--packets", type=int, help="packets per port (or total for firewall)")
    p.add_argument("--probes", type=int, help="matcher probes for the firewall preset")
    p.add_argument("--sizes", type=_int_list, help="comma-separated packet sizes")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("plot", help="plot a throughput or latency CSV")
    p.add_argument("csv")
    p.add_argument("--preset", help="check the CSV against this preset's schema")
    p.add_argument("-o", "--output", help="image path (default: CSV name with .png)")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("ctl", help="host control commands against a scripted run",
                       epilog="commands: read sched REG | write sched REG [VALUE] | run US | "
                              "counters pN | debug pN [VALUE] | dump pN REGION | "
                              "irq pN evict|poke | pause pN | resume pN")
    p.add_argument("commands", nargs="*", help="commands, ';' separated or one per argument")
    p.add_argument("--preset", default="default")
    overrides(p)
    p.add_argument("--at-us", type=float, default=0.0, help="simulated time before the first command")
    p.add_argument("--script", help="file with one command per line")
    p.add_argument("--idle", action="store_true", help="no traffic")
    p.add_argument("--out", help="directory for memory dumps")
    p.set_defaults(fn=cmd_ctl)

    p = sub.add_parser("validate-config", help="load and check a config or preset")
    p.add_argument("config")
    overrides(p)
    p.add_argument("--dump", action="store_true", help="print the merged configuration")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("list-presets", help="shipped presets")
    p.set_defaults(fn=cmd_list)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (UsageError, ConfigError, ControlError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
