"""Procedural sprites dataset and bit-exact persistence.

The dataset is a desk-scale stand-in for factor-controlled shape corpora:
32x32 binary images of a square / ellipse / triangle placed on a 5-factor
grid (shape, 6 scales, 16 rotations, 16x16 positions; 73728 combinations).
Pixels take values in {-1, +1}.

Binary formats are little-endian throughout and carry CRC32 content
checksums.  Checkpoints restore every parameter bit-exactly because model
parameters are kept on the float32 grid in memory.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IntegrityError, MissingArtifactError, VersionError
from .models import ModelConfig, VaeModel

HEIGHT = 32
WIDTH = 32
SHAPES = ("square", "ellipse", "triangle")
FACTOR_CARDINALITIES = (3, 6, 16, 16, 16)  # shape, scale, rotation, pos_x, pos_y
GRID_SIZE = int(np.prod(FACTOR_CARDINALITIES))

_DATASET_MAGIC = b"VARM"
_DATASET_VERSION = 1
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SpriteFactors:
    """Ground-truth generative factors of one sprite (all index-valued)."""

    shape: int
    scale: int
    rotation: int
    pos_x: int
    pos_y: int

    def __post_init__(self):
        values = (self.shape, self.scale, self.rotation, self.pos_x, self.pos_y)
        for v, card, name in zip(values, FACTOR_CARDINALITIES, ("shape", "scale", "rotation", "pos_x", "pos_y")):
            if not 0 <= v < card:
                raise ValueError(f"{name} index {v} outside 0..{card - 1}")

    @property
    def shape_name(self) -> str:
        return SHAPES[self.shape]


def render_sprite(factors: SpriteFactors) -> np.ndarray:
    """Rasterise one sprite as a (32, 32) float32 image in {-1, +1}.

    Pixel centres are tested for inclusion in the rotated shape; no
    anti-aliasing, so images are exactly binary.
    """
    yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH]
    px = xx + 0.5
    py = yy + 0.5
    # positions keep every shape fully inside the canvas at maximum scale
    cx = 9.0 + factors.pos_x * (14.0 / 15.0)
    cy = 9.0 + factors.pos_y * (14.0 / 15.0)
    theta = 2.0 * np.pi * factors.rotation / FACTOR_CARDINALITIES[2]
    ct, st = np.cos(theta), np.sin(theta)
    u = ct * (px - cx) + st * (py - cy)
    v = -st * (px - cx) + ct * (py - cy)
    if factors.shape == 0:  # square
        s = 2.0 + 0.8 * factors.scale
        inside = (np.abs(u) <= s) & (np.abs(v) <= s)
    elif factors.shape == 1:  # ellipse
        a = 2.4 + 0.96 * factors.scale
        b = 0.6 * a
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    else:  # triangle (equilateral)
        r = 2.6 + 1.0 * factors.scale
        angles = np.pi / 2 + 2.0 * np.pi * np.arange(3) / 3.0
        verts = np.stack([r * np.cos(angles), r * np.sin(angles)], axis=1)
        inside = np.ones_like(u, dtype=bool)
        for i in range(3):
            ax, ay = verts[i]
            bx, by = verts[(i + 1) % 3]
            cross = (bx - ax) * (v - ay) - (by - ay) * (u - ax)
            inside &= cross >= 0.0
    return np.where(inside, 1.0, -1.0).astype(np.float32)


@dataclass
class SpriteDataset:
    """Images plus their factor indices."""

    images: np.ndarray  # (n, HEIGHT*WIDTH) float32 in {-1, +1}
    factors: np.ndarray  # (n, 5) int32

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.factors = np.asarray(self.factors, dtype=np.int32)
        if self.images.ndim != 2 or self.images.shape[1] != HEIGHT * WIDTH:
            raise ValueError(f"images must be (n, {HEIGHT * WIDTH})")
        if self.factors.shape != (len(self.images), len(FACTOR_CARDINALITIES)):
            raise ValueError("factors must be (n, 5)")

    def __len__(self) -> int:
        return len(self.images)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = _DATASET_MAGIC + struct.pack(
            "<5I", _DATASET_VERSION, len(self.images), HEIGHT, WIDTH, len(FACTOR_CARDINALITIES)
        )
        header += struct.pack(f"<{len(FACTOR_CARDINALITIES)}I", *FACTOR_CARDINALITIES)
        body = self.factors.astype("<i4").tobytes() + self.images.astype("<f4").tobytes()
        payload = header + body
        crc = zlib.crc32(payload) & 0xFFFFFFFF
        path.write_bytes(payload + struct.pack("<I", crc))

    @classmethod
    def load(cls, path) -> "SpriteDataset":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"dataset file {path} does not exist")
        raw = path.read_bytes()
        if len(raw) < 4 + 5 * 4 + len(FACTOR_CARDINALITIES) * 4 + 4:
            raise IntegrityError("dataset file truncated")
        payload, crc_bytes = raw[:-4], raw[-4:]
        (stored_crc,) = struct.unpack("<I", crc_bytes)
        if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
            raise IntegrityError("dataset checksum mismatch")
        if payload[:4] != _DATASET_MAGIC:
            raise IntegrityError("bad magic bytes")
        version, count, h, w, n_factors = struct.unpack("<5I", payload[4:24])
        if version != _DATASET_VERSION:
            raise VersionError(f"unsupported dataset version {version}")
        cards = struct.unpack(f"<{n_factors}I", payload[24 : 24 + 4 * n_factors])
        if (h, w) != (HEIGHT, WIDTH) or cards != FACTOR_CARDINALITIES:
            raise IntegrityError("dataset header does not match this build")
        offset = 24 + 4 * n_factors
        fac_bytes = count * n_factors * 4
        img_bytes = count * h * w * 4
        if len(payload) != offset + fac_bytes + img_bytes:
            raise IntegrityError("dataset payload length mismatch")
        factors = np.frombuffer(payload[offset : offset + fac_bytes], dtype="<i4").reshape(count, n_factors)
        images = np.frombuffer(payload[offset + fac_bytes :], dtype="<f4").reshape(count, h * w)
        return cls(images=images.copy(), factors=factors.copy())


def gen_sprites(count: int, seed: int) -> SpriteDataset:
    """Deterministically rasterise ``count`` distinct factor combinations."""
    if count < 1:
        raise ConfigError("count must be positive")
    if count > GRID_SIZE:
        raise ConfigError(f"count {count} exceeds the factor grid size {GRID_SIZE}")
    rng = np.random.Generator(np.random.PCG64(seed))
    flat = rng.choice(GRID_SIZE, size=count, replace=False)
    factors = np.stack(np.unravel_index(flat, FACTOR_CARDINALITIES), axis=1).astype(np.int32)
    images = np.empty((count, HEIGHT * WIDTH), dtype=np.float32)
    for i, rec in enumerate(factors):
        images[i] = render_sprite(SpriteFactors(*map(int, rec))).ravel()
    return SpriteDataset(images=images, factors=factors)


def split(dataset: SpriteDataset, fractions: tuple[float, float], seed: int) -> tuple[SpriteDataset, SpriteDataset]:
    """Disjoint, covering, seed-deterministic train/eval split."""
    f_train, f_eval = fractions
    if f_train < 0 or f_eval < 0 or abs(f_train + f_eval - 1.0) > 1e-9:
        raise ConfigError("fractions must be non-negative and sum to 1")
    n = len(dataset)
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(n)
    n_train = int(round(f_train * n))
    idx_train, idx_eval = perm[:n_train], perm[n_train:]
    make = lambda idx: SpriteDataset(images=dataset.images[idx], factors=dataset.factors[idx])
    return make(idx_train), make(idx_eval)


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

def _objective_hash(training: dict) -> str:
    canon = json.dumps(training, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def save_checkpoint(model: VaeModel, path, training: dict | None = None) -> Path:
    """Persist a model into a directory (manifest.json + params.bin)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = model.store.flat_f32().tobytes()
    training = dict(training or {})
    manifest = {
        "format_version": _CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "params": [
            {"name": n, "shape": list(s)} for n, s in model.store.shapes().items()
        ],
        "training": training,
        "objective_hash": _objective_hash(training),
        "blob_len": len(blob),
        "blob_crc32": zlib.crc32(blob) & 0xFFFFFFFF,
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    (path / "params.bin").write_bytes(blob)
    return path


def load_checkpoint(path) -> tuple[VaeModel, dict]:
    """Rebuild a model bit-exactly from a checkpoint directory."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise MissingArtifactError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != _CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version!r}")
    blob = (path / "params.bin").read_bytes()
    if len(blob) != manifest["blob_len"]:
        raise IntegrityError(
            f"parameter blob has {len(blob)} bytes, manifest says {manifest['blob_len']}"
        )
    if zlib.crc32(blob) & 0xFFFFFFFF != manifest["blob_crc32"]:
        raise IntegrityError("parameter blob checksum mismatch")
    config = ModelConfig.from_dict(manifest["config"])
    model = VaeModel(config, seed=manifest["seed"])
    expected = [(p["name"], tuple(p["shape"])) for p in manifest["params"]]
    actual = [(n, s) for n, s in model.store.shapes().items()]
    if expected != actual:
        raise IntegrityError("parameter layout does not match the manifest")
    model.store.load_flat_f32(np.frombuffer(blob, dtype="<f4"))
    return model, manifest
