"""Small shared-weight tile encoder producing unit-norm embeddings.

Architecture: two strided local-window linear stages (non-overlapping windows,
weights shared across windows) followed by two dense stages, then L2
normalization. The same encoder embeds both views.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor import DimensionError, Tensor, matmul, no_grad

_MAGIC = b"PAULCKPT"


@dataclass(frozen=True)
class EncoderConfig:
    resolution: int = 32
    channels: int = 3
    window1: int = 4
    window2: int = 2
    width1: int = 16
    width2: int = 32
    hidden: int = 128
    output_dim: int = 64

    def __post_init__(self):
        if self.resolution % (self.window1 * self.window2):
            raise ValueError("resolution must be divisible by window1 * window2")

    def shapes(self) -> dict[str, tuple]:
        g1 = self.resolution // self.window1
        g2 = g1 // self.window2
        return {
            "w1": (self.channels * self.window1**2, self.width1),
            "b1": (self.width1,),
            "w2": (self.width1 * self.window2**2, self.width2),
            "b2": (self.width2,),
            "w3": (self.width2 * g2 * g2, self.hidden),
            "b3": (self.hidden,),
            "w4": (self.hidden, self.output_dim),
            "b4": (self.output_dim,),
        }


@dataclass
class EncoderParams:
    config: EncoderConfig
    init_seed: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].data.reshape(-1) for k in sorted(self.tensors)])

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config,
            self.init_seed,
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
        )


def init_encoder(config: EncoderConfig, seed: int) -> EncoderParams:
    """Uniform fan-in initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in sorted(config.shapes().items()):
        if name.startswith("w"):
            bound = np.sqrt(6.0 / shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return EncoderParams(config, seed, tensors)


def _windows(x: Tensor, w: int) -> Tensor:
    """(B, C, H, W) -> (B, H/w * W/w, C*w*w) of non-overlapping windows."""
    b, c, h, wd = x.shape
    x = x.reshape(b, c, h // w, w, wd // w, w).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // w) * (wd // w), c * w * w)


def embed_batch(params: EncoderParams, pixels) -> Tensor:
    """Embed a (B, C, H, W) batch; differentiable w.r.t. parameters and pixels."""
    cfg = params.config
    x = pixels if isinstance(pixels, Tensor) else Tensor(np.asarray(pixels, dtype=np.float64))
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.resolution, cfg.resolution):
        raise DimensionError(
            f"expected tiles of shape (C={cfg.channels}, {cfg.resolution}, {cfg.resolution}), got {x.shape[1:]}"
        )
    p = params.tensors
    b = x.shape[0]
    g1 = cfg.resolution // cfg.window1
    h = (matmul(_windows(x, cfg.window1), p["w1"]) + p["b1"]).relu()
    # back to (B, width1, g1, g1) for the second windowing stage
    h = h.reshape(b, g1, g1, cfg.width1).permute(0, 3, 1, 2)
    h = (matmul(_windows(h, cfg.window2), p["w2"]) + p["b2"]).relu()
    h = h.reshape(b, -1)
    h = (matmul(h, p["w3"]) + p["b3"]).relu()
    h = matmul(h, p["w4"]) + p["b4"]
    norm = (h.square().sum(axis=1, keepdims=True) + 1e-12).sqrt()
    return h / norm


def embed(params: EncoderParams, tile) -> np.ndarray:
    """Unit-norm embedding of a single tile (no graph recorded)."""
    pixels = tile.pixels if hasattr(tile, "pixels") else tile
    with no_grad():
        return embed_batch(params, pixels).data[0]


def embed_tiles(params: EncoderParams, tiles: Sequence, chunk: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(tiles), chunk):
            px = np.stack([t.pixels for t in tiles[i : i + chunk]])
            out.append(embed_batch(params, px).data)
    return np.concatenate(out) if out else np.zeros((0, params.config.output_dim))


def similarity_matrix(q, r):
    """Cosine similarity S[i, j] = <q_i, r_j> for unit-norm rows. Works on arrays or tensors."""
    qs, rs = q.shape, r.shape
    if len(qs) != 2 or len(rs) != 2 or qs[1] != rs[1]:
        raise DimensionError(f"similarity_matrix: bad shapes {qs}, {rs}")
    if qs[0] != rs[0]:
        raise DimensionError(f"similarity_matrix: batch sizes differ ({qs[0]} vs {rs[0]})")
    if isinstance(q, Tensor) or isinstance(r, Tensor):
        q = q if isinstance(q, Tensor) else Tensor(q)
        r = r if isinstance(r, Tensor) else Tensor(r)
        return matmul(q, r.transpose())
    return np.asarray(q) @ np.asarray(r).T


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(params: EncoderParams, path, extra: Optional[dict] = None) -> None:
    """Magic, little-endian u64 header length, JSON header, then float64 LE parameters."""
    names = sorted(params.tensors)
    header = {
        "config": params.config.__dict__,
        "seed": params.init_seed,
        "manifest": [[n, list(params.tensors[n].shape)] for n in names],
    }
    header.update(extra or {})
    blob = json.dumps(header, sort_keys=True).encode()
    body = params.flat().astype("<f8").tobytes()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_MAGIC + struct.pack("<Q", len(blob)) + blob + body)
    tmp.replace(path)


def load_checkpoint(path, expect: Optional[EncoderConfig] = None) -> tuple[EncoderParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not an encoder checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n])
    config = EncoderConfig(**header["config"])
    if expect is not None and expect != config:
        raise DimensionError(f"{path}: checkpoint encoder config {config} does not match {expect}")
    data = np.frombuffer(raw[16 + n :], dtype="<f8")
    tensors, offset = {}, 0
    for name, shape in header["manifest"]:
        size = int(np.prod(shape))
        tensors[name] = Tensor(data[offset : offset + size].reshape(shape).copy(), requires_grad=True)
        offset += size
    if offset != data.size:
        raise DimensionError(f"{path}: parameter count mismatch")
    return EncoderParams(config, header["seed"], tensors), header


def params_digest(params: EncoderParams) -> str:
    return hashlib.sha256(params.flat().astype("<f8").tobytes()).hexdigest()
