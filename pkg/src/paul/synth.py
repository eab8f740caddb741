"""Synthetic UAV/satellite tile pairs with controlled footprint overlap.

A :class:`WorldMap` is a 3-channel texture (value noise plus landmarks). Tiles
are square axis-aligned crops of it; query and reference views pass through
different fixed channel transforms. Pair offsets are solved so that the
footprint IoU lands in the clean band (> TAU_M) or the semi-positive band
(TAU_S, TAU_M].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

TAU_M = 0.39
TAU_S = 0.14

QUERY = "query"
REFERENCE = "reference"

_QUERY_MIX = np.array([[0.70, 0.20, 0.10], [0.10, 0.80, 0.10], [0.20, 0.10, 0.70]])
_REF_MIX = np.array([[0.25, 0.50, 0.25], [0.60, 0.20, 0.20], [0.15, 0.25, 0.60]])


class ConfigurationError(ValueError):
    pass


def _pair_rng(seed: int, *counter: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *counter])))


def _value_noise(rng: np.random.Generator, size: int, cell: int) -> np.ndarray:
    n = size // cell + 2
    lattice = rng.random((n, n))
    t = (np.arange(size) + 0.5) / cell
    i0 = np.floor(t).astype(int)
    f = t - i0
    f = f * f * (3.0 - 2.0 * f)
    rows = lattice[i0] * (1 - f)[:, None] + lattice[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


@dataclass
class WorldMap:
    """Immutable multi-channel texture; ``field[c, y, x]`` in [0, 1]."""

    seed: int
    size: int = 1024
    n_landmarks: int = 400
    field: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.size < 16:
            raise ConfigurationError("world size must be at least 16")
        rng = _pair_rng(self.seed, 0xA11)
        channels = []
        for _ in range(3):
            acc = np.zeros((self.size, self.size))
            amp, total = 1.0, 0.0
            for cell in (64, 32, 16, 8, 4):
                if cell < self.size:
                    acc += amp * _value_noise(rng, self.size, cell)
                    total += amp
                amp *= 0.6
            channels.append(acc / max(total, 1e-12))
        img = np.stack(channels)
        for _ in range(self.n_landmarks):
            cx, cy = rng.uniform(0, self.size, 2)
            r = rng.uniform(3.0, 12.0)
            color = rng.random(3)
            disc = rng.random() < 0.5
            xlo, xhi = max(0, int(cx - r)), min(self.size, int(cx + r) + 2)
            ylo, yhi = max(0, int(cy - r)), min(self.size, int(cy + r) + 2)
            yy, xx = np.mgrid[ylo:yhi, xlo:xhi]
            if disc:
                inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
            else:
                inside = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= 0.6 * r)
            patch = img[:, ylo:yhi, xlo:xhi]
            patch[:, inside] = color[:, None]
        lo = img.min(axis=(1, 2), keepdims=True)
        hi = img.max(axis=(1, 2), keepdims=True)
        self.field = (img - lo) / np.maximum(hi - lo, 1e-12)
        self.field.setflags(write=False)

    def sample(self, center: tuple[float, float], extent: float, resolution: int) -> np.ndarray:
        """Bilinear samples of the field over a square footprint, shape C x H x W."""
        cx, cy = center
        offs = (np.arange(resolution) + 0.5) * (extent / resolution) - extent / 2.0
        xs = np.clip(cx + offs - 0.5, 0, self.size - 1)
        ys = np.clip(cy + offs - 0.5, 0, self.size - 1)
        x0 = np.minimum(np.floor(xs).astype(int), self.size - 2)
        y0 = np.minimum(np.floor(ys).astype(int), self.size - 2)
        fx = (xs - x0)[None, None, :]
        fy = (ys - y0)[None, :, None]
        f = self.field
        top = f[:, y0][:, :, x0] * (1 - fx) + f[:, y0][:, :, x0 + 1] * fx
        bot = f[:, y0 + 1][:, :, x0] * (1 - fx) + f[:, y0 + 1][:, :, x0 + 1] * fx
        return top * (1 - fy) + bot * fy


def view_transform(raw: np.ndarray, view: str) -> np.ndarray:
    """Fixed per-view channel transform simulating the cross-view modality gap."""
    if view == QUERY:
        out = np.einsum("ij,jhw->ihw", _QUERY_MIX, raw ** 0.8)
    elif view == REFERENCE:
        curved = 1.0 / (1.0 + np.exp(-6.0 * (raw - 0.5)))
        out = np.einsum("ij,jhw->ihw", _REF_MIX, curved)
    else:
        raise ValueError(f"unknown view {view!r}")
    # float32 storage round-trip keeps in-memory and on-disk datasets identical
    return out.astype(np.float32).astype(np.float64)


@dataclass
class Tile:
    center: tuple[float, float]
    extent: float
    pixels: np.ndarray = field(repr=False)
    view: str = QUERY

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        h = self.extent / 2.0
        return (self.center[0] - h, self.center[1] - h, self.center[0] + h, self.center[1] + h)


def make_tile(world: WorldMap, center, extent: float, resolution: int, view: str) -> Tile:
    center = (float(center[0]), float(center[1]))
    pixels = view_transform(world.sample(center, extent, resolution), view)
    return Tile(center=center, extent=float(extent), pixels=pixels, view=view)


@dataclass
class PairRecord:
    pair_id: int
    query: Tile
    reference: Tile
    iou: float
    y: int
    z: int
    true_offset: tuple[float, float]


def _footprint_iou(ca, ea, cb, eb) -> float:
    if ea <= 0 or eb <= 0:
        raise ValueError("tile extent must be positive")
    ax0, ay0, ax1, ay1 = ca[0] - ea / 2, ca[1] - ea / 2, ca[0] + ea / 2, ca[1] + ea / 2
    bx0, by0, bx1, by1 = cb[0] - eb / 2, cb[1] - eb / 2, cb[0] + eb / 2, cb[1] + eb / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = ea * ea + eb * eb - inter
    return inter / union


def compute_iou(a: Tile, b: Tile) -> float:
    """Intersection over union of two square footprints."""
    return _footprint_iou(a.center, a.extent, b.center, b.extent)


def offset_for_iou(target_iou: float, extent: float = 1.0, axis_ratio: float = 0.0) -> tuple[float, float]:
    """Offset (dx, dy) between two equal squares that yields ``target_iou``.

    ``axis_ratio`` = dy/dx in [0, 1]; 0 offsets along x only.
    """
    if not 0.0 < target_iou <= 1.0:
        raise ValueError(f"target IoU must lie in (0, 1], got {target_iou}")
    if not 0.0 <= axis_ratio <= 1.0:
        raise ValueError("axis_ratio must lie in [0, 1]")
    inter = 2.0 * target_iou / (1.0 + target_iou)
    r = axis_ratio
    # (1 - d)(1 - r d) = inter, smaller root in the cancellation-free form (also exact at r = 0)
    b, c = 1.0 + r, 1.0 - inter
    d = 2.0 * c / (b + math.sqrt(b * b - 4.0 * r * c))
    return (d * extent, r * d * extent)


def make_dataset(
    world: WorldMap,
    n_pairs: int,
    noise_ratio: float,
    seed: int,
    extent: float = 64.0,
    resolution: int = 32,
) -> list[PairRecord]:
    """Generate ``n_pairs`` annotated matches; ``round(n * noise_ratio)`` are semi-positive."""
    if not 0.0 <= noise_ratio <= 1.0:
        raise ValueError("noise_ratio must lie in [0, 1]")
    if world.size < 2 * extent + 2:
        raise ValueError("world too small for tile extent")
    n_noisy = int(math.floor(n_pairs * noise_ratio + 0.5))
    noisy = np.zeros(n_pairs, dtype=bool)
    noisy[_pair_rng(seed, 0xB00).permutation(n_pairs)[:n_noisy]] = True

    records = []
    for i in range(n_pairs):
        rng = _pair_rng(seed, 1, i)
        z = int(noisy[i])
        while True:
            u = rng.random()
            target = TAU_M - u * (TAU_M - TAU_S) if z else 1.0 - u * (1.0 - TAU_M)
            dx, dy = offset_for_iou(target, extent, rng.random())
            if rng.random() < 0.5:
                dx, dy = dy, dx
            dx *= rng.choice((-1.0, 1.0))
            dy *= rng.choice((-1.0, 1.0))
            lo = extent / 2.0
            qx = rng.uniform(lo + max(0.0, -dx), world.size - lo - max(0.0, dx))
            qy = rng.uniform(lo + max(0.0, -dy), world.size - lo - max(0.0, dy))
            iou = _footprint_iou((qx, qy), extent, (qx + dx, qy + dy), extent)
            if (TAU_S < iou <= TAU_M) if z else (iou > TAU_M):
                break
        q = make_tile(world, (qx, qy), extent, resolution, QUERY)
        r = make_tile(world, (qx + dx, qy + dy), extent, resolution, REFERENCE)
        records.append(PairRecord(i, q, r, compute_iou(q, r), 1, z, (float(dx), float(dy))))
    return records


@dataclass
class Split:
    train: list[PairRecord]
    test_queries: list[Tile]
    gallery: list[Tile]


def _inside(t: Tile, region) -> bool:
    x0, y0, x1, y1 = t.bounds
    return x0 >= region[0] and y0 >= region[1] and x1 <= region[2] and y1 <= region[3]


def _disjoint(t: Tile, region) -> bool:
    x0, y0, x1, y1 = t.bounds
    return x1 <= region[0] or x0 >= region[2] or y1 <= region[1] or y0 >= region[3]


def _grid_positions(lo: float, hi: float, extent: float, stride: float) -> list[float]:
    first, last = lo + extent / 2.0, hi - extent / 2.0
    if last < first - 1e-9:
        return []
    n = int(math.floor((last - first) / stride + 1e-9))
    pos = [first + k * stride for k in range(n + 1)]
    if last - pos[-1] > 1e-9:
        pos.append(last)
    return pos


def split_train_test(
    records: Sequence[PairRecord],
    holdout_region: tuple[float, float, float, float],
    world: WorldMap,
    stride: Optional[float] = None,
) -> Split:
    """Cross-area split: train pairs lie fully outside the holdout, test queries fully inside.

    The gallery is a regular grid of reference tiles over the holdout region.
    """
    if not records:
        raise ConfigurationError("no records to split")
    x0, y0, x1, y1 = holdout_region
    if not (0 <= x0 < x1 <= world.size and 0 <= y0 < y1 <= world.size):
        raise ConfigurationError("holdout region must lie inside the world")
    extent = records[0].query.extent
    resolution = records[0].query.pixels.shape[-1]
    stride = extent / 2.0 if stride is None else stride
    train = [r for r in records if _disjoint(r.query, holdout_region) and _disjoint(r.reference, holdout_region)]
    queries = [r.query for r in records if _inside(r.query, holdout_region)]
    gallery = [
        make_tile(world, (gx, gy), extent, resolution, REFERENCE)
        for gy in _grid_positions(y0, y1, extent, stride)
        for gx in _grid_positions(x0, x1, extent, stride)
    ]
    if not train:
        raise ConfigurationError("train split is empty")
    if not queries or not gallery:
        raise ConfigurationError("test split is empty")
    return Split(train, queries, gallery)


# -- on-disk format -------------------------------------------------------------


def _write_tile(path: Path, tile: Tile) -> None:
    path.write_bytes(tile.pixels.astype("<f4").tobytes())


def _read_tile(path: Path, shape, center, extent, view) -> Tile:
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64).reshape(shape)
    return Tile(center=(float(center[0]), float(center[1])), extent=float(extent), pixels=arr, view=view)


def _tile_meta(tile: Tile, name: str) -> dict:
    return {"file": name, "center": list(tile.center), "extent": tile.extent, "view": tile.view}


def save_split(split: Split, out_dir, manifest: dict) -> None:
    """Write a dataset directory: JSON-lines indices plus little-endian float32 tiles."""
    out = Path(out_dir)
    tiles = out / "tiles"
    tiles.mkdir(parents=True, exist_ok=True)
    shape = list(split.gallery[0].pixels.shape)
    with open(out / "train.jsonl", "w") as fh:
        for r in split.train:
            qn, rn = f"pair{r.pair_id:06d}_q.f32", f"pair{r.pair_id:06d}_r.f32"
            _write_tile(tiles / qn, r.query)
            _write_tile(tiles / rn, r.reference)
            rec = {
                "pair_id": r.pair_id,
                "query": _tile_meta(r.query, qn),
                "reference": _tile_meta(r.reference, rn),
                "iou": r.iou,
                "y": r.y,
                "z": r.z,
                "true_offset": list(r.true_offset),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    for kind, items in (("test_queries", split.test_queries), ("gallery", split.gallery)):
        with open(out / f"{kind}.jsonl", "w") as fh:
            for k, t in enumerate(items):
                name = f"{kind}{k:06d}.f32"
                _write_tile(tiles / name, t)
                fh.write(json.dumps({"id": k, **_tile_meta(t, name)}, sort_keys=True) + "\n")
    manifest = dict(manifest)
    manifest.update(
        tile_shape=shape,
        tau_m=TAU_M,
        tau_s=TAU_S,
        n_train=len(split.train),
        n_train_semi_positive=sum(r.z for r in split.train),
        n_test_queries=len(split.test_queries),
        n_gallery=len(split.gallery),
    )
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_split(data_dir) -> tuple[Split, dict]:
    root = Path(data_dir)
    if not (root / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset manifest at {root / 'manifest.json'}")
    manifest = json.loads((root / "manifest.json").read_text())
    shape = tuple(manifest["tile_shape"])
    tiles = root / "tiles"

    def tile(meta):
        return _read_tile(tiles / meta["file"], shape, meta["center"], meta["extent"], meta["view"])

    train = []
    for line in (root / "train.jsonl").read_text().splitlines():
        m = json.loads(line)
        train.append(
            PairRecord(
                m["pair_id"], tile(m["query"]), tile(m["reference"]), m["iou"], m["y"], m["z"], tuple(m["true_offset"])
            )
        )
    queries = [tile(json.loads(x)) for x in (root / "test_queries.jsonl").read_text().splitlines()]
    gallery = [tile(json.loads(x)) for x in (root / "gallery.jsonl").read_text().splitlines()]
    return Split(train, queries, gallery), manifest
