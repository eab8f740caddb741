"""Command-line driver: ``paul gen-data | train | eval | ablate | report``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .metrics import MetricsReport, reports_to_csv
from .pipeline import (
    OutputExistsError,
    evaluate_models,
    generate,
    load_models,
    median_row,
    prepare_dir,
    read_split,
    run_cell,
    run_training,
    write_report,
)
from .synth import ConfigurationError
from .tensor import DimensionError, NonFiniteError

log = logging.getLogger("paul")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

ABLATION_AXES = {
    "components": ("variant", ("infonce_baseline", "match_only", "edl_only", "paul")),
    "partition": ("partition_strategy", ("gmm", "small_loss_topk", "fixed_threshold")),
    "guidance": ("guidance", ("edl", "infonce", "uncertainty")),
    "fill": ("fill_strategy", ("zero", "gaussian_noise", "mean_value", "magnify")),
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat YAML config file")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g = p.add_argument_group("config overrides (win over the file)")
    for name in cfgmod.field_names():
        g.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, metavar="V", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paul", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train a variant; writes checkpoints and a JSON-lines log")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate trained checkpoints")
    _add_config_flags(p)
    p.add_argument("--checkpoint-dir", help="defaults to <out_dir>/checkpoints")
    p.add_argument("--metrics-dir", help="defaults to <out_dir>/eval")

    p = sub.add_parser("ablate", help="run ablation grids; writes an aggregated CSV")
    _add_config_flags(p)
    p.add_argument("--axes", default=",".join(ABLATION_AXES), help="comma-separated subset of " + ",".join(ABLATION_AXES))
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("report", help="aggregate metrics.json files into one CSV")
    p.add_argument("paths", nargs="+", help="metrics.json files or directories to search")
    p.add_argument("--output", help="CSV path (default: stdout)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfgmod.load(args.config, overrides)


def cmd_gen_data(args) -> int:
    config = resolve_config(args)
    manifest = generate(config, force=args.force)
    log.info("wrote %s: %d train pairs (%d semi-positive)", config.data_dir, manifest["n_train"], manifest["n_train_semi_positive"])
    print(json.dumps(manifest, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    split = read_split(config)
    out = prepare_dir(config.out_dir, args.force)
    state = run_training(config, split, out)
    log.info("trained %s for %d epochs; checkpoints in %s", config.variant, state.epoch, out / "checkpoints")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = resolve_config(args)
    ckpt = Path(args.checkpoint_dir or Path(config.out_dir) / "checkpoints")
    a, b, header = load_models(config, ckpt)
    if header.get("config_hash") not in (None, config.hash()):
        log.warning("checkpoint config hash %s differs from current config %s", header["config_hash"], config.hash())
    split = read_split(config)
    report = evaluate_models(config, split, a, b)
    jpath, _ = write_report(report, args.metrics_dir or Path(config.out_dir) / "eval")
    print(jpath.read_text(), end="")
    return EXIT_OK


def _cell(config: RunConfig) -> str:
    return run_cell(config).to_json()


def ablation_cells(config: RunConfig, axes: Sequence[str]) -> list[tuple[str, str, RunConfig]]:
    cells = []
    for axis in axes:
        if axis not in ABLATION_AXES:
            raise ConfigError(f"unknown ablation axis {axis!r}; expected some of {list(ABLATION_AXES)}")
        key, values = ABLATION_AXES[axis]
        for v in values:
            base = config if axis == "components" else config.replace(variant="paul")
            cells.append((axis, v, base.replace(**{key: v})))
    return cells


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    out = prepare_dir(config.out_dir, args.force)
    cells = ablation_cells(config, [a.strip() for a in args.axes.split(",") if a.strip()])
    # identical configs (the default PAUL cell appears on several axes) run once
    jobs = {}
    for _, _, c in cells:
        for s in c.ablate_seeds:
            sc = c.replace(seed=s)
            jobs.setdefault(sc.hash(), sc)
    log.info("%d cells, %d distinct runs", len(cells), len(jobs))
    if args.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(args.workers) as pool:
            texts = dict(zip(jobs, pool.map(_cell, jobs.values())))
    else:
        texts = {h: _cell(c) for h, c in jobs.items()}
    reports = {h: MetricsReport.from_json(t) for h, t in texts.items()}

    rows = []
    for axis, value, c in cells:
        reps = [reports[c.replace(seed=s).hash()] for s in c.ablate_seeds]
        rows.append(
            {
                "axis": axis,
                "value": value,
                "seeds": " ".join(str(s) for s in c.ablate_seeds),
                "noise_ratio": c.noise_ratio,
                "config_hash": c.hash(),
                **median_row(reps),
            }
        )
    text = reports_to_csv(rows)
    (out / "ablate.csv").write_text(text)
    (out / "ablate_runs.json").write_text(json.dumps({h: json.loads(t) for h, t in sorted(texts.items())}, indent=2))
    print(text, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    files = []
    for p in map(Path, args.paths):
        if p.is_dir():
            files.extend(sorted(p.rglob("metrics.json")))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such file or directory: {p}")
    if not files:
        raise FileNotFoundError("no metrics.json files found")
    rows = []
    for f in files:
        rep = MetricsReport.from_json(f.read_text())
        rows.append({"source": str(f), **rep.extra, **rep.row()})
    text = reports_to_csv(rows)
    if args.output:
        Path(args.output).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ConfigurationError, OutputExistsError) as exc:
        print(f"paul: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"paul: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, DimensionError, ValueError, json.JSONDecodeError) as exc:
        print(f"paul: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
