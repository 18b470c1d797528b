"""Command-line entry point: ``laminar-sim {run,check-program,fct-study,sweep}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import yaml

from .netsim import ConfigError, InvariantViolation
from .rmt import Manifest, MalformedManifest, check_program
from .scenario import load_config, run_config, run_study, table3_csv

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2
EXIT_VIOLATIONS = 3

log = logging.getLogger("laminar_sim")


def _setup_logging() -> None:
    level = os.environ.get("LAMINAR_SIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _write(out: Path | None, stem: str, suffix: str, text: str) -> Path | None:
    if out is None:
        return None
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{stem}{suffix}"
    path.write_text(text)
    return path


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"1..20"`` (inclusive) or ``"1,4,9"``."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed range {text!r} (expected A..B)") from None


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else None
    seed = args.seed if args.seed is not None else cfg["seed"]
    if cfg.get("study"):
        seeds = [seed] if args.seed is not None else None
        rows = run_study(cfg, seeds, args.workers)
        csv = table3_csv(rows)
        _write(out, cfg["name"], ".csv", csv)
        _write(out, cfg["name"], ".json", json.dumps(rows, sort_keys=True, indent=2) + "\n")
        sys.stdout.write(csv)
        return EXIT_OK
    rep = run_config(cfg, seed, args.duration)
    stem = f"{cfg['name']}-seed{seed}"
    _write(out, stem, ".json", rep.to_json() + "\n")
    _write(out, stem, ".csv", rep.to_csv())
    if out is None:
        sys.stdout.write(rep.to_json() + "\n")
    else:
        m = rep.metrics
        print(f"{cfg['name']} seed={seed}: goodput {m['goodput_bps'] / 1e9:.3f} Gbps, "
              f"reports in {out}")
    return EXIT_OK


def manifest_path(path: str) -> Path:
    """A manifest path, falling back to the shipped manifest of the same name."""
    p = Path(path)
    if p.exists():
        return p
    shipped = Path(str(resources.files("laminar_sim").joinpath("data/manifests"))) / p.name
    if shipped.suffix != ".json":
        shipped = shipped.with_suffix(".json")
    return shipped if shipped.exists() else p


def cmd_check_program(args: argparse.Namespace) -> int:
    manifest = Manifest.load(str(manifest_path(args.manifest)))
    violations = check_program(manifest)
    if not violations:
        print(f"{manifest.name}: OK ({len(manifest.stages)} stages, "
              f"{len(manifest.registers)} registers, {len(manifest.accesses)} accesses)")
        return EXIT_OK
    print(f"{manifest.name}: {len(violations)} violation(s)")
    for v in violations:
        print(f"  {v}")
    return EXIT_VIOLATIONS


def cmd_fct_study(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    rows = run_study(cfg, args.seeds, args.workers)
    csv = table3_csv(rows)
    out = Path(args.out) if args.out else None
    _write(out, cfg["name"], ".csv", csv)
    sys.stdout.write(csv)
    return EXIT_OK


def _sweep_one(job: tuple[dict[str, Any], int, float | None]) -> dict[str, Any]:
    cfg, seed, duration = job
    return run_config(cfg, seed, duration).to_dict()


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    jobs = [(cfg, s, args.duration) for s in args.seeds]
    if args.workers > 1:
        # processes rather than threads: each run is CPU bound pure Python
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            reports = list(pool.map(_sweep_one, jobs))
    else:
        reports = [_sweep_one(j) for j in jobs]
    out = Path(args.out) if args.out else None
    keys = sorted({k for r in reports for k in r["metrics"]})
    lines = [",".join(["seed"] + keys)]
    for r in reports:
        _write(out, f"{cfg['name']}-seed{r['seed']}", ".json", json.dumps(r, sort_keys=True, indent=2) + "\n")
        lines.append(",".join([str(r["seed"])] + [_cell(r["metrics"].get(k)) for k in keys]))
    csv = "\n".join(lines) + "\n"
    _write(out, f"{cfg['name']}-sweep", ".csv", csv)
    sys.stdout.write(csv)
    return EXIT_OK


def _cell(v: Any) -> str:
    if v is None:
        return ""
    return repr(round(v, 9)) if isinstance(v, float) else str(v)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="laminar-sim", description="TCP-on-RMT datapath simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario and write its report")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--duration", type=float, help="simulated milliseconds (overrides the config)")
    r.add_argument("--out", help="directory for the JSON and CSV reports")
    r.add_argument("--workers", type=int, default=1, help="processes for study scenarios")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("check-program", help="check an access manifest against RMT constraints")
    c.add_argument("manifest")
    c.set_defaults(fn=cmd_check_program)

    f = sub.add_parser("fct-study", help="sweep reassembly fidelity and CC, print FCT ratios")
    f.add_argument("config", nargs="?", default="fct_study")
    f.add_argument("--seeds", type=parse_seeds)
    f.add_argument("--workers", type=int, default=1)
    f.add_argument("--out")
    f.set_defaults(fn=cmd_fct_study)

    s = sub.add_parser("sweep", help="run one scenario over a seed range")
    s.add_argument("config")
    s.add_argument("--seeds", type=parse_seeds, required=True)
    s.add_argument("--duration", type=float)
    s.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, MalformedManifest, yaml.YAMLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
