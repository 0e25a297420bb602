"""Command line entry point: ``run``, ``validate``, ``partition-audit``, ``config-template``."""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import write_manifest
from .experiment import (config_template, final_row, load_cells, mean_se, prepare, run_seed,
                         summary_row, write_summary)
from .numerics import ConfigurationError
from .validation import run_validation_suite

log = logging.getLogger("fedsimclr")


def _seed_job(args):
    cfg, seed, out_dir = args
    return run_seed(cfg, seed, out_dir)


def _format_report(cells, finals_per_cell) -> str:
    lines = []
    for cfg, finals in zip(cells, finals_per_cell):
        lines.append(f"cell {cfg.label()}")
        for seed, r in zip(cfg.seeds, finals):
            lines.append(f"  seed {seed:>4}  round {r.round:>5}  lp_test_acc {r.lp_test_acc:.4f}"
                         f"  lp_train_acc {r.lp_train_acc:.4f}")
        m, se = mean_se([r.lp_test_acc for r in finals])
        lines.append(f"  lp_test_acc mean {m:.4f} +- {se:.4f} (standard error, {len(finals)} seeds)")
        lines.append("")
    return "\n".join(lines)


def cmd_run(args) -> int:
    config_path = Path(args.config)
    text = config_path.read_text()
    cells = load_cells(text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(config_path, out / "config.ini")
    dirs = [out] if len(cells) == 1 else [out / f"cell{i:03d}_{c.label()}" for i, c in enumerate(cells)]
    jobs = [(cfg, seed, d) for cfg, d in zip(cells, dirs) for seed in cfg.seeds]
    if args.threads > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(_seed_job, jobs))
    else:
        results = [_seed_job(j) for j in jobs]
    finals, i = [], 0
    for cfg in cells:
        finals.append([final_row(m) for m in results[i:i + len(cfg.seeds)]])
        i += len(cfg.seeds)
    write_summary([summary_row(c, f) for c, f in zip(cells, finals)], out / "summary.csv")
    (out / "report.txt").write_text(_format_report(cells, finals))
    print(f"wrote {len(jobs)} runs over {len(cells)} cell(s) to {out}")
    return 0


def cmd_validate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_validation_suite(out / "validation_report.txt", gradient_seeds=args.gradient_seeds)
    for c in res.failures():
        print(f"FAIL {c.name}: true={c.true_value:.8g} bound={c.bound_value:.8g} slack={c.slack:.3g}")
    print(f"{len(res.checks) - len(res.failures())}/{len(res.checks)} checks passed; "
          f"report in {out / 'validation_report.txt'}")
    return 0 if res.passed else 1


def cmd_partition_audit(args) -> int:
    cells = load_cells(Path(args.config).read_text())
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for i, cfg in enumerate(cells):
        seed = cfg.seeds[0]
        _, _, clients, _ = prepare(cfg, seed)
        print(f"# cell {cfg.label()} seed {seed}")
        print("client,n,labelled,bins," + ",".join(f"y{c}" for c in range(cfg.dataset.num_classes)))
        for c in clients:
            hist = c.label_histogram(cfg.dataset.num_classes)
            bins = ";".join(str(b) for b in sorted(c.rotation_bins)) or "-"
            print(f"{c.client_id},{len(c)},{int(np.sum(c.labelled_mask))},{bins},"
                  + ",".join(str(int(h)) for h in hist))
        if out is not None:
            name = "manifest.csv" if len(cells) == 1 else f"manifest_cell{i:03d}.csv"
            write_manifest(clients, out / name)
    return 0


def cmd_config_template(args) -> int:
    sys.stdout.write(config_template())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsimclr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every grid cell and seed of a config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--threads", type=int, default=1, help="seeds run in this many processes")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="bound and gradient validation suite")
    v.add_argument("--out", required=True)
    v.add_argument("--gradient-seeds", type=int, default=20)
    v.set_defaults(func=cmd_validate)

    a = sub.add_parser("partition-audit", help="label histograms and partition manifest")
    a.add_argument("--config", required=True)
    a.add_argument("--out", help="also write the manifest here")
    a.set_defaults(func=cmd_partition_audit)

    t = sub.add_parser("config-template", help="print every config key with its default")
    t.set_defaults(func=cmd_config_template)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FloatingPointError, RuntimeError) as e:
        print(f"aborted: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
