"""Co-augment: input-gradient saliency, largest-region masks, and masked pair synthesis."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .encoder import EncoderParams, embed_batch
from .losses import edl_rows, info_nce_rows
from .tensor import Tensor, no_grad

GUIDANCES = ("edl", "infonce", "uncertainty")
FILLS = ("zero", "gaussian_noise", "mean_value", "magnify")


@dataclass
class SaliencyMap:
    values: np.ndarray
    guidance: str = "edl"
    degenerate: bool = False


@dataclass
class Mask:
    bits: np.ndarray
    kept_fraction: float
    degenerate: bool = False


def frozen(params: EncoderParams) -> EncoderParams:
    """Parameter view that records no gradients (shares the buffers)."""
    return EncoderParams(params.config, params.init_seed, {k: Tensor(v.data) for k, v in params.tensors.items()})


def normalize_map(raw: np.ndarray, guidance: str = "edl") -> SaliencyMap:
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return SaliencyMap(np.zeros_like(raw), guidance, degenerate=True)
    return SaliencyMap((raw - lo) / (hi - lo), guidance)


def pair_guidance_rows(
    params: EncoderParams,
    q_pixels: np.ndarray,
    r_pixels: np.ndarray,
    rows: Sequence[int],
    guidance: str = "edl",
    tau_evidence: float = 1.0,
    lam: float = 0.005,
    tau_infonce: float = 0.07,
    q_input: Optional[Tensor] = None,
    r_input: Optional[Tensor] = None,
) -> Tensor:
    """Per-pair guidance loss for the selected batch rows.

    Row i compares query i against every reference in the batch. Only the
    pair's own query and reference carry gradient, so backpropagating the sum
    gives each tile the gradient of its own pair's loss.
    """
    if guidance not in GUIDANCES:
        raise ValueError(f"unknown guidance {guidance!r}; expected one of {GUIDANCES}")
    rows = np.asarray(rows, dtype=int)
    with no_grad():
        ref_all = embed_batch(params, r_pixels).data
    qn = q_input if q_input is not None else Tensor(q_pixels[rows])
    rn = r_input if r_input is not None else Tensor(r_pixels[rows])
    eq = embed_batch(params, qn)
    er = embed_batch(params, rn)
    ref_rows = Tensor(ref_all[rows])
    onehot = np.zeros((rows.size, ref_all.shape[0]))
    onehot[np.arange(rows.size), rows] = 1.0
    # live diagonal minus its detached copy: zero in value, carries d/d(reference)
    live = (eq * er).sum(axis=1, keepdims=True) - (eq * ref_rows).sum(axis=1, keepdims=True)
    sim = eq @ Tensor(ref_all.T) + live * onehot
    if guidance == "infonce":
        return info_nce_rows(sim, tau_infonce, targets=rows)
    parts = edl_rows(sim, tau_evidence, lam, targets=rows)
    return parts.rows if guidance == "edl" else parts.uncertainty


def saliency(
    params: EncoderParams,
    q_pixels: np.ndarray,
    r_pixels: np.ndarray,
    rows: Sequence[int],
    guidance: str = "edl",
    tau_evidence: float = 1.0,
    lam: float = 0.005,
    tau_infonce: float = 0.07,
    loss_scale: float = 1.0,
) -> tuple[list[SaliencyMap], list[SaliencyMap]]:
    """Channel-mean |d loss / d pixel|, min-max normalized, for each selected pair's two tiles."""
    rows = np.asarray(rows, dtype=int)
    if rows.size == 0:
        return [], []
    p = frozen(params)
    qn = Tensor(q_pixels[rows].copy(), requires_grad=True)
    rn = Tensor(r_pixels[rows].copy(), requires_grad=True)
    loss = pair_guidance_rows(
        p, q_pixels, r_pixels, rows, guidance, tau_evidence, lam, tau_infonce, q_input=qn, r_input=rn
    )
    (loss.sum() * loss_scale).backward()
    gq = np.zeros(qn.shape) if qn.grad is None else qn.grad
    gr = np.zeros(rn.shape) if rn.grad is None else rn.grad
    q_maps = [normalize_map(np.abs(g).mean(axis=0), guidance) for g in gq]
    r_maps = [normalize_map(np.abs(g).mean(axis=0), guidance) for g in gr]
    return q_maps, r_maps


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValueError("connectivity must be 4 or 8")


def mask_from_saliency(smap, eta: float = 0.5, connectivity: int = 4) -> Mask:
    """Threshold at eta and keep only the largest connected region.

    Equal-size regions: the one whose first pixel in raster order comes first wins.
    """
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap)
    bits = values > eta
    if isinstance(smap, SaliencyMap) and smap.degenerate:
        bits = np.zeros_like(bits)
    labels, n = ndimage.label(bits, structure=_structure(connectivity))
    if n == 0:
        return Mask(np.zeros(values.shape, dtype=bool), 0.0, degenerate=True)
    sizes = np.bincount(labels.ravel())[1:]
    # ndimage labels in raster order, so argmax's first-hit rule is the tie-break
    keep = labels == (int(np.argmax(sizes)) + 1)
    return Mask(keep, float(keep.mean()))


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), max(h - 2, 0))
    x0 = np.minimum(np.floor(xs).astype(int), max(w - 2, 0))
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def apply_mask(tile, mask: Mask, fill_strategy: str = "zero", rng: Optional[np.random.Generator] = None):
    """Keep pixels under the mask, replace the rest. Accepts a Tile or a C x H x W array."""
    pixels = tile.pixels if hasattr(tile, "pixels") else np.asarray(tile, dtype=np.float64)
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    if fill_strategy == "zero":
        out = np.where(bits[None], pixels, 0.0)
    elif fill_strategy == "mean_value":
        out = np.where(bits[None], pixels, pixels.mean())
    elif fill_strategy == "gaussian_noise":
        rng = rng if rng is not None else np.random.default_rng(0)
        sigma = float(pixels.std())
        out = np.where(bits[None], pixels, rng.normal(0.0, sigma, size=pixels.shape))
    elif fill_strategy == "magnify":
        if not bits.any():
            out = pixels.copy()
        else:
            rr, cc = np.nonzero(bits)
            crop = pixels[:, rr.min() : rr.max() + 1, cc.min() : cc.max() + 1]
            out = _bilinear_resize(crop, pixels.shape[1], pixels.shape[2])
    else:
        raise ValueError(f"unknown fill strategy {fill_strategy!r}; expected one of {FILLS}")
    if hasattr(tile, "pixels"):
        return replace(tile, pixels=out)
    return out


@dataclass
class AugmentConfig:
    guidance: str = "edl"
    eta: float = 0.5
    connectivity: int = 4
    fill_strategy: str = "zero"
    tau_evidence: float = 1.0
    tau_infonce: float = 0.07
    lam: float = 0.005


@dataclass
class AugmentedSet:
    source_rows: np.ndarray
    q_pixels: np.ndarray
    r_pixels: np.ndarray
    q_masks: list = field(default_factory=list)
    r_masks: list = field(default_factory=list)
    q_maps: list = field(default_factory=list)
    r_maps: list = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.source_rows.size)


def co_augment(
    params: EncoderParams,
    q_pixels: np.ndarray,
    r_pixels: np.ndarray,
    noisy_rows: Sequence[int],
    config: AugmentConfig,
    rng: Optional[np.random.Generator] = None,
) -> AugmentedSet:
    """One masked copy per noisy pair whose two tiles both yield a non-degenerate mask."""
    rows = np.asarray(noisy_rows, dtype=int)
    shape = (0,) + q_pixels.shape[1:]
    if rows.size == 0:
        return AugmentedSet(rows, np.zeros(shape), np.zeros(shape))
    q_maps, r_maps = saliency(
        params, q_pixels, r_pixels, rows, config.guidance, config.tau_evidence, config.lam, config.tau_infonce
    )
    keep, qa, ra, qm, rm, qs, rs = [], [], [], [], [], [], []
    for k, row in enumerate(rows):
        mq = mask_from_saliency(q_maps[k], config.eta, config.connectivity)
        mr = mask_from_saliency(r_maps[k], config.eta, config.connectivity)
        if mq.degenerate or mr.degenerate:
            continue
        keep.append(row)
        qa.append(apply_mask(q_pixels[row], mq, config.fill_strategy, rng))
        ra.append(apply_mask(r_pixels[row], mr, config.fill_strategy, rng))
        qm.append(mq)
        rm.append(mr)
        qs.append(q_maps[k])
        rs.append(r_maps[k])
    if not keep:
        return AugmentedSet(np.zeros(0, dtype=int), np.zeros(shape), np.zeros(shape))
    return AugmentedSet(np.asarray(keep), np.stack(qa), np.stack(ra), qm, rm, qs, rs)


def _write_pgm(path: Path, values: np.ndarray) -> None:
    img = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def dump_saliency(out_dir, tag: str, smap: SaliencyMap, mask: Mask, eta: float) -> None:
    """Write <tag>_saliency.pgm, <tag>_mask.pgm and a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_pgm(out / f"{tag}_saliency.pgm", smap.values)
    _write_pgm(out / f"{tag}_mask.pgm", mask.bits.astype(np.float64))
    meta = {
        "guidance": smap.guidance,
        "eta": eta,
        "kept_fraction": mask.kept_fraction,
        "degenerate": bool(smap.degenerate or mask.degenerate),
    }
    (out / f"{tag}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
