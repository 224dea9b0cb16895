"""Random projection sampling and grid mini-patch sampling.

Viewpoints are drawn without replacement, uniformly over all subsets of the
6 cube faces, and only the drawn viewpoints are ever rendered.  Each cropped
projection is then partitioned into a uniform grid; one small patch per cell
is copied (never resampled) into a fixed-size canvas, preserving local pixel
statistics that a plain resize would smear.

All randomness flows through a single Rng per pipeline run: the viewpoint
draw first, then patch offsets in row-major cell order, projection by
projection, which makes every output bit-reproducible from one 64-bit seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import SamplingError
from .projection import (
    ProjectionImage,
    RenderConfig,
    ViewpointId,
    VIEWPOINTS,
    render_selected,
)

_SEED_MASK = (1 << 64) - 1


class Rng:
    """Deterministic pseudorandom stream seeded by a 64-bit value.

    Single-owner: share the seed, not the instance.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _SEED_MASK
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @classmethod
    def spawn(cls, seed: int, index: int) -> "Rng":
        """Independent child stream for item `index` of a run seeded by `seed`."""
        child = np.random.SeedSequence(int(seed) & _SEED_MASK, spawn_key=(int(index),))
        return cls(int(child.generate_state(1, np.uint64)[0]))

    def integers(self, low: int, high: int) -> int:
        """One draw uniform over [low, high)."""
        return int(self._gen.integers(low, high))

    def choice_without_replacement(self, count: int, size: int) -> np.ndarray:
        return self._gen.choice(count, size=size, replace=False)

    def normal(self, scale: float, shape) -> np.ndarray:
        return self._gen.normal(0.0, scale, shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid layout: output canvas is (rows*patch) x (cols*patch) pixels."""

    rows: int = 7
    cols: int = 7
    patch: int = 32

    def __post_init__(self):
        for name in ("rows", "cols", "patch"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise SamplingError(f"grid {name} must be a positive integer, got {v}")

    @property
    def canvas_shape(self) -> tuple[int, int]:
        return self.rows * self.patch, self.cols * self.patch

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "patch": self.patch}


DEFAULT_GRID = GridSpec(7, 7, 32)


def sample_viewpoints(n: int, rng: Rng) -> list[ViewpointId]:
    """Draw n distinct viewpoints, uniform over all C(6,n) subsets."""
    if not 1 <= n <= 6:
        raise SamplingError(f"viewpoint count must be in 1..6, got {n}")
    picks = rng.choice_without_replacement(len(VIEWPOINTS), n)
    return [VIEWPOINTS[i] for i in picks]


def _cell_edges(total: int, cells: int) -> list[int]:
    return [(i * total) // cells for i in range(cells + 1)]


def grid_mini_patch(
    img: np.ndarray,
    grid: GridSpec,
    rng: Rng,
    return_offsets: bool = False,
):
    """Copy one random patch per grid cell into a spliced canvas.

    Every output pixel is copied verbatim from the input; the window inside
    each cell is chosen uniformly among positions that fit entirely in the
    cell.  With `return_offsets` the (row, col) source corner of each patch
    is returned alongside the canvas, in row-major cell order.
    """
    h, w = img.shape[:2]
    out_h, out_w = grid.canvas_shape
    if h < out_h or w < out_w:
        raise SamplingError(
            f"image too small for grid: {h}x{w} input, {out_h}x{out_w} canvas minimum"
        )
    rows_e = _cell_edges(h, grid.rows)
    cols_e = _cell_edges(w, grid.cols)
    out = np.empty((out_h, out_w, 3), dtype=img.dtype)
    offsets: list[tuple[int, int]] = []
    p = grid.patch
    for r in range(grid.rows):
        r0, r1 = rows_e[r], rows_e[r + 1]
        for c in range(grid.cols):
            c0, c1 = cols_e[c], cols_e[c + 1]
            dy = rng.integers(0, (r1 - r0) - p + 1)
            dx = rng.integers(0, (c1 - c0) - p + 1)
            sr, sc = r0 + dy, c0 + dx
            out[r * p:(r + 1) * p, c * p:(c + 1) * p] = img[sr:sr + p, sc:sc + p]
            offsets.append((sr, sc))
    if return_offsets:
        return out, offsets
    return out


def nearest_upscale(img: np.ndarray, min_h: int, min_w: int) -> np.ndarray:
    """Upscale (per axis, independently) to at least the given size.

    Nearest-neighbor only: output pixels are copies of input pixels, so no
    colors are invented.
    """
    h, w = img.shape[:2]
    out_h, out_w = max(h, min_h), max(w, min_w)
    if (out_h, out_w) == (h, w):
        return img
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return img[rows][:, cols]


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resize; the fallback when grid sampling is disabled."""
    pil = Image.fromarray(img, mode="RGB")
    return np.asarray(pil.resize((out_w, out_h), Image.BILINEAR), dtype=np.uint8)


@dataclass
class SampledProjectionSet:
    """N sampled canvases with the provenance needed to reproduce them."""

    canvases: list[np.ndarray]
    viewpoints: list[ViewpointId]
    seed: int
    grid: GridSpec
    model_id: str = "model"

    def __post_init__(self):
        if len(self.canvases) != len(self.viewpoints):
            raise SamplingError("canvases and viewpoints must be congruent in length")
        if not self.canvases:
            raise SamplingError("sampled projection set is empty")
        shape = self.grid.canvas_shape + (3,)
        for canvas in self.canvases:
            if canvas.shape != shape:
                raise SamplingError(
                    f"canvas shape {canvas.shape} does not match grid product {shape}"
                )

    def __len__(self) -> int:
        return len(self.canvases)


def apply_grid_sampling(
    projections: list[ProjectionImage],
    grid: GridSpec,
    rng: Rng,
    enabled: bool = True,
) -> list[np.ndarray]:
    """Grid-sample each cropped projection (or bilinear-resize when disabled).

    Projections smaller than the canvas are nearest-neighbor upscaled to the
    minimal sufficient size first.  Patch offsets are consumed from `rng` in
    projection order, row-major within each projection.
    """
    min_h, min_w = grid.canvas_shape
    canvases = []
    for proj in projections:
        if enabled:
            img = nearest_upscale(proj.pixels, min_h, min_w)
            canvases.append(grid_mini_patch(img, grid, rng))
        else:
            canvases.append(bilinear_resize(proj.pixels, min_h, min_w))
    return canvases


def sample_projection_set(
    model,
    n: int,
    grid: GridSpec,
    cfg: RenderConfig,
    rng: Rng,
    fixed_viewpoints: list[ViewpointId] | None = None,
    gms_enabled: bool = True,
    model_id: str = "model",
) -> SampledProjectionSet:
    """Draw viewpoints, render only those, crop, and grid-sample each projection.

    `fixed_viewpoints` bypasses the random viewpoint draw (the fixed-viewpoint
    ablation); `gms_enabled=False` swaps grid sampling for a bilinear resize.
    """
    if fixed_viewpoints is not None:
        viewpoints = list(fixed_viewpoints)
        if not viewpoints or len(set(viewpoints)) != len(viewpoints):
            raise SamplingError("fixed viewpoints must be non-empty and distinct")
    else:
        viewpoints = sample_viewpoints(n, rng)
    projections = render_selected(model, viewpoints, cfg)
    canvases = apply_grid_sampling(projections, grid, rng, gms_enabled)
    return SampledProjectionSet(canvases, viewpoints, rng.seed, grid, model_id)
