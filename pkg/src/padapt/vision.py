"""Toy patch encoder standing in for a pretrained vision transformer.

Images are patchified, linearly projected, given learned 2-D positions, and
run through a small pre-norm transformer stack.  The declared final block is
structural only: encode emits the representation *before* it, and the class
token never exists in this pipeline, so the feature grid is pure patch
features.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .nnblocks import glorot_uniform, init_block_params, transformer_block
from .rng import substream


@dataclass(frozen=True)
class VisionConfig:
    patch_size: int = 8
    channels: int = 32
    blocks: int = 2
    heads: int = 2
    mlp_hidden: int = 128
    # grid extents (rows, cols) that get a learned position table
    grids: tuple[tuple[int, int], ...] = ((4, 4), (8, 8))


@dataclass
class FeatureGrid:
    """Patch features only ``[rows x cols x channels]``; no class-token slot."""

    rows: int
    cols: int
    channels: int
    values: Tensor

    def flat(self) -> Tensor:
        return ad.reshape(self.values, (self.rows * self.cols, self.channels))


def init_vision_params(cfg: VisionConfig, root_seed: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    patch_dim = cfg.patch_size * cfg.patch_size * 3

    def rng_for(name: str) -> np.random.Generator:
        return substream(root_seed, "init", name)

    params["vision.patch_proj.w"] = Tensor(
        glorot_uniform(rng_for("vision.patch_proj.w"), (patch_dim, cfg.channels)),
        requires_grad=True,
    )
    params["vision.patch_proj.b"] = Tensor(np.zeros(cfg.channels), requires_grad=True)
    for rows, cols in cfg.grids:
        name = f"vision.pos_{rows}x{cols}"
        params[name] = Tensor(
            rng_for(name).normal(scale=0.02, size=(rows * cols, cfg.channels)),
            requires_grad=True,
        )
    for i in range(cfg.blocks):
        params.update(
            init_block_params(rng_for, f"vision.block{i}", cfg.channels, cfg.mlp_hidden)
        )
    return params


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Rearrange ``[H x W x 3]`` pixels into ``[rows*cols x patch_size^2*3]`` rows."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ad.ShapeError(f"expected an HxWx3 image, got {image.shape}")
    height, width, _ = image.shape
    if height % patch_size or width % patch_size:
        raise ad.ShapeError(
            f"image {height}x{width} not divisible by patch size {patch_size}"
        )
    rows, cols = height // patch_size, width // patch_size
    blocks = image.reshape(rows, patch_size, cols, patch_size, 3)
    return blocks.transpose(0, 2, 1, 3, 4).reshape(rows * cols, patch_size * patch_size * 3)


def encode(image: np.ndarray, params: dict[str, Tensor], cfg: VisionConfig) -> FeatureGrid:
    """Patchify, project, and run all but the declared final block."""
    image = np.asarray(image, dtype=np.float64)
    patches = Tensor(patchify(image, cfg.patch_size))
    rows = image.shape[0] // cfg.patch_size
    cols = image.shape[1] // cfg.patch_size
    x = ad.bias_add(
        ad.matmul(patches, params["vision.patch_proj.w"]), params["vision.patch_proj.b"]
    )
    if cfg.blocks > 0:
        pos_name = f"vision.pos_{rows}x{cols}"
        if pos_name not in params:
            raise ConfigError(
                f"no position table for a {rows}x{cols} grid; declare it in VisionConfig.grids"
            )
        x = ad.add(x, ad.embedding_lookup(params[pos_name], np.arange(rows * cols)))
        for i in range(cfg.blocks - 1):  # final declared block is dropped
            x = transformer_block(x, params, f"vision.block{i}", cfg.heads)
    values = ad.reshape(x, (rows, cols, cfg.channels))
    return FeatureGrid(rows=rows, cols=cols, channels=cfg.channels, values=values)


def variable_resolution_grids(
    images: list[np.ndarray], params: dict[str, Tensor], cfg: VisionConfig
) -> list[FeatureGrid]:
    return [encode(img, params, cfg) for img in images]


# ---------------------------------------------------------------------------
# PPM (P6) image files and integer-factor resizing
# ---------------------------------------------------------------------------


def save_ppm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ad.ShapeError(f"expected an HxWx3 image, got {image.shape}")
    height, width, _ = image.shape
    raw = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(raw.tobytes())


def load_ppm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval; '#' starts a comment line
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a P6 PPM file")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    raw = np.frombuffer(blob, dtype=np.uint8, count=width * height * 3, offset=pos)
    if raw.size != width * height * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return raw.reshape(height, width, 3).astype(np.float64) / 255.0


def downscale(image: np.ndarray, factor: int) -> np.ndarray:
    """Exact block-average downscaling by an integer factor."""
    if factor == 1:
        return np.asarray(image, dtype=np.float64)
    height, width, _ = image.shape
    if height % factor or width % factor:
        raise ad.ShapeError(f"image {height}x{width} not divisible by factor {factor}")
    blocks = image.reshape(height // factor, factor, width // factor, factor, 3)
    return blocks.mean(axis=(1, 3))
