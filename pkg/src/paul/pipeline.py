"""End-to-end steps shared by the command line and the acceptance suite."""

from __future__ import annotations

import json
import shutil
from pathlib import Path
from typing import Optional

import numpy as np

from . import augment as aug
from .config import RunConfig, serialize
from .cotrain import (
    Division,
    TrainData,
    TrainerState,
    init_state,
    select_inference_model,
    train,
)
from .encoder import EncoderParams, load_checkpoint, save_checkpoint
from .metrics import MetricsReport, evaluate, ground_truth, rank, reports_to_csv
from .synth import TAU_M, TAU_S, Split, Tile, WorldMap, load_split, make_dataset, save_split, split_train_test


class OutputExistsError(FileExistsError):
    """Refusing to write into a non-empty directory without ``--force``."""


def prepare_dir(path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and any(p.iterdir()):
        if not force:
            raise OutputExistsError(f"{p} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(p)
    p.mkdir(parents=True, exist_ok=True)
    return p


def build_split(config: RunConfig) -> Split:
    world = WorldMap(config.seed, size=config.world_size, n_landmarks=config.n_landmarks)
    records = make_dataset(
        world, config.n_pairs, config.noise_ratio, config.seed, extent=config.extent, resolution=config.resolution
    )
    return split_train_test(records, tuple(config.holdout), world)


def dataset_manifest(config: RunConfig) -> dict:
    return {
        "seed": config.seed,
        "noise_ratio": config.noise_ratio,
        "n_pairs": config.n_pairs,
        "world_size": config.world_size,
        "n_landmarks": config.n_landmarks,
        "extent": config.extent,
        "holdout": list(config.holdout),
        "tau_m": TAU_M,
        "tau_s": TAU_S,
        "config_hash": config.hash(),
    }


def generate(config: RunConfig, force: bool = False) -> dict:
    """Write the dataset directory; returns its manifest."""
    out = prepare_dir(config.data_dir, force)
    split = build_split(config)
    save_split(split, out, dataset_manifest(config))
    return json.loads((out / "manifest.json").read_text())


def read_split(config: RunConfig) -> Split:
    split, _ = load_split(config.data_dir)
    return split


def _saliency_dumper(root: Path, config: RunConfig):
    def dump(state: TrainerState, batch: int, name: str, div: Division) -> None:
        if batch != 0:
            return
        a = div.augmented
        for k, row in enumerate(a.source_rows.tolist()):
            tag = f"e{state.epoch:03d}_m{name}_b{batch:03d}_p{row:03d}"
            aug.dump_saliency(root, tag + "_q", a.q_maps[k], a.q_masks[k], config.eta)
            aug.dump_saliency(root, tag + "_r", a.r_maps[k], a.r_masks[k], config.eta)

    return dump


def run_training(
    config: RunConfig,
    split: Split,
    out_dir: Optional[Path] = None,
) -> TrainerState:
    """Train the configured variant; with ``out_dir`` write per-epoch checkpoints and a JSON-lines log."""
    tc = config.train_config()
    data = TrainData.from_records(split.train)
    state = init_state(tc)
    chash = config.hash()
    if out_dir is None:
        return train(tc, data, state)

    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(f"# config_hash: {chash}\n" + serialize(config))
    log_path = out_dir / "train_log.jsonl"
    written = 0

    def on_epoch_end(st: TrainerState) -> None:
        nonlocal written
        with open(log_path, "a") as fh:
            for rec in st.log[written:]:
                fh.write(json.dumps({"config_hash": chash, **rec}, sort_keys=True) + "\n")
        written = len(st.log)
        extra = {"epoch": st.epoch, "step": st.step, "config_hash": chash, "variant": config.variant}
        for name, model in (("a", st.model_a), ("b", st.model_b)):
            save_checkpoint(model, out_dir / "checkpoints" / f"epoch_{st.epoch:03d}_{name}.ckpt", extra)
            save_checkpoint(model, out_dir / "checkpoints" / f"last_{name}.ckpt", extra)

    on_division = _saliency_dumper(Path(config.dump_saliency), config) if config.dump_saliency else None
    return train(tc, data, state, on_epoch_end=on_epoch_end, on_division=on_division)


def load_models(config: RunConfig, ckpt_dir) -> tuple[EncoderParams, EncoderParams, dict]:
    expect = config.train_config().encoder_config()
    ckpt_dir = Path(ckpt_dir)
    paths = [ckpt_dir / f"last_{n}.ckpt" for n in ("a", "b")]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"checkpoint not found: {p}")
    (a, header), (b, _) = (load_checkpoint(p, expect) for p in paths)
    return a, b, header


def eval_tiles(config: RunConfig, split: Split) -> tuple[list[Tile], list[Tile]]:
    if config.eval_split == "test":
        return split.test_queries, split.gallery
    # smoke-test mode: training queries against their own references
    return [p.query for p in split.train], [p.reference for p in split.train]


def evaluate_models(config: RunConfig, split: Split, model_a: EncoderParams, model_b: EncoderParams) -> MetricsReport:
    tc = config.train_config()
    state = TrainerState(model_a, model_b, None, None)
    fn = select_inference_model(state, config.inference_policy)
    queries, gallery = eval_tiles(config, split)
    results = rank(queries, gallery, fn)
    gt = ground_truth(queries, gallery)
    extra = {
        "inference_policy": config.inference_policy,
        "config_hash": config.hash(),
        "variant": tc.variant,
        "seed": tc.seed,
        "noise_ratio": config.noise_ratio,
        "split": config.eval_split,
    }
    return evaluate(results, gt, sdm_scale=config.sdm_scale, extra=extra)


def write_report(report: MetricsReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out / "metrics.json", out / "metrics.csv"
    jpath.write_text(report.to_json())
    cpath.write_text(reports_to_csv([{**report.extra, **report.row()}]))
    return jpath, cpath


def run_cell(config: RunConfig, split: Optional[Split] = None) -> MetricsReport:
    """In-memory generate, train and evaluate for one config."""
    split = split if split is not None else build_split(config)
    state = run_training(config, split)
    return evaluate_models(config, split, state.model_a, state.model_b)


def median_row(reports: list[MetricsReport]) -> dict:
    rows = [r.row() for r in reports]
    return {k: float(np.median([r[k] for r in rows])) for k in rows[0]}
