"""Orthographic cube-face projection rendering with white-background cropping.

A model is viewed from any of the 6 perpendicular cube-face viewpoints.
Point clouds are splatted as constant-depth discs, meshes are rasterized
with barycentric texture lookup; both resolve visibility with a z-buffer.
Untouched pixels keep the background color and are flagged in a mask so the
background can be cropped away afterwards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import RenderError
from .model_io import AABB, PointCloud, TexturedMesh, bounding_box


class ViewpointId(Enum):
    """The 6 perpendicular viewpoints, one per cube face."""

    POS_X = "+X"
    NEG_X = "-X"
    POS_Y = "+Y"
    NEG_Y = "-Y"
    POS_Z = "+Z"
    NEG_Z = "-Z"

    @property
    def axis(self) -> int:
        return "XYZ".index(self.value[1])

    @property
    def sign(self) -> int:
        return 1 if self.value[0] == "+" else -1

    @classmethod
    def from_string(cls, text: str) -> "ViewpointId":
        norm = text.strip().replace("−", "-").upper()
        for vp in cls:
            if vp.value == norm:
                return vp
        raise RenderError(f"unknown viewpoint '{text}' (expected one of +X,-X,+Y,-Y,+Z,-Z)")

    def __str__(self) -> str:
        return self.value


VIEWPOINTS: tuple[ViewpointId, ...] = tuple(ViewpointId)

# Up-vectors: +Y for the four side views, +Z when looking along Y.
_UP = {
    ViewpointId.POS_X: np.array([0.0, 1.0, 0.0]),
    ViewpointId.NEG_X: np.array([0.0, 1.0, 0.0]),
    ViewpointId.POS_Y: np.array([0.0, 0.0, 1.0]),
    ViewpointId.NEG_Y: np.array([0.0, 0.0, 1.0]),
    ViewpointId.POS_Z: np.array([0.0, 1.0, 0.0]),
    ViewpointId.NEG_Z: np.array([0.0, 1.0, 0.0]),
}


@dataclass(frozen=True)
class RenderConfig:
    """Rendering knobs; defaults target hole-free renders of dense clouds."""

    viewport: int = 1024
    padding: float = 1.1
    splat_radius: int = 2
    background: tuple[int, int, int] = (255, 255, 255)
    texture_filter: str = "nearest"   # or "bilinear"

    def __post_init__(self):
        if int(self.viewport) != self.viewport or self.viewport < 64:
            raise RenderError(f"viewport must be an integer >= 64, got {self.viewport}")
        if self.padding < 1.0:
            raise RenderError(f"padding must be >= 1, got {self.padding}")
        if int(self.splat_radius) != self.splat_radius or self.splat_radius < 0:
            raise RenderError(f"splat_radius must be an integer >= 0, got {self.splat_radius}")
        if self.texture_filter not in ("nearest", "bilinear"):
            raise RenderError(f"unknown texture filter '{self.texture_filter}'")
        bg = tuple(int(c) for c in self.background)
        if len(bg) != 3 or any(not 0 <= c <= 255 for c in bg):
            raise RenderError(f"background must be an 8-bit RGB triple, got {self.background}")
        object.__setattr__(self, "background", bg)

    def to_dict(self) -> dict:
        return {
            "viewport": self.viewport,
            "padding": self.padding,
            "splat_radius": self.splat_radius,
            "background": list(self.background),
            "texture_filter": self.texture_filter,
        }


@dataclass(frozen=True)
class Camera:
    """Orthographic view of a square frame centered on the model box."""

    viewpoint: ViewpointId
    center: np.ndarray
    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray
    extent: float
    viewport: int

    def project(self, points: np.ndarray):
        """Map world points to (tx, ty, depth); tx/ty in [0, viewport] units."""
        d = points - self.center
        sx = d @ self.right
        sy = d @ self.up
        depth = d @ self.forward
        tx = (sx / self.extent + 0.5) * self.viewport
        ty = (0.5 - sy / self.extent) * self.viewport
        return tx, ty, depth


def viewpoint_camera(vp: ViewpointId, box: AABB, cfg: RenderConfig) -> Camera:
    """Camera looking down the viewpoint axis toward the box center.

    The framed square spans padding x the larger of the two in-plane box
    extents.  Raises for boxes that are degenerate in the viewing plane.
    """
    forward = np.zeros(3)
    forward[vp.axis] = -float(vp.sign)   # camera sits on the vp side, looks inward
    up = _UP[vp]
    right = np.cross(forward, up)
    inplane = [box.extent[a] for a in range(3) if a != vp.axis]
    frame = cfg.padding * max(inplane)
    if frame <= 0.0:
        raise RenderError(
            f"degenerate framing for viewpoint {vp}: model has no extent in the view plane"
        )
    return Camera(vp, box.center, right, up, forward, frame, cfg.viewport)


@dataclass
class ProjectionImage:
    """RGB raster of one viewpoint plus a mask of untouched (background) pixels."""

    pixels: np.ndarray            # (H,W,3) uint8
    background_mask: np.ndarray   # (H,W) bool, True where no geometry was drawn
    viewpoint: ViewpointId
    background: tuple[int, int, int] = (255, 255, 255)
    depth: np.ndarray | None = None            # (H,W) float64 view-axis depth
    crop_offset: tuple[int, int] | None = None  # (row, col) into the pre-crop raster
    original_size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise RenderError("projection pixels must be an RGB raster")
        h, w = self.pixels.shape[:2]
        if h < 1 or w < 1:
            raise RenderError("projection raster must be at least 1x1")
        if self.background_mask.shape != (h, w):
            raise RenderError("background mask does not match raster dimensions")
        bg = np.asarray(self.background, dtype=np.uint8)
        if self.background_mask.any() and not (
            self.pixels[self.background_mask] == bg
        ).all():
            raise RenderError("mask-true pixels must equal the background color exactly")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@lru_cache(maxsize=None)
def _disc_offsets(radius: int) -> tuple[np.ndarray, np.ndarray]:
    span = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    keep = dy * dy + dx * dx <= radius * radius
    return dy[keep], dx[keep]


def render_point_cloud(cloud: PointCloud, vp: ViewpointId, cfg: RenderConfig) -> ProjectionImage:
    """Splat every point as a constant-depth disc; the nearest point wins per pixel."""
    cam = viewpoint_camera(vp, bounding_box(cloud), cfg)
    v = cfg.viewport
    tx, ty, depth = cam.project(cloud.positions)
    cols = np.clip(np.floor(tx).astype(np.int64), 0, v - 1)
    rows = np.clip(np.floor(ty).astype(np.int64), 0, v - 1)

    # Nearest-last ordering makes plain scatter writes a z-buffer within a pass.
    order = np.argsort(-depth, kind="stable")
    rows, cols, depth = rows[order], cols[order], depth[order]
    colors8 = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)[order]

    img = np.empty((v, v, 3), dtype=np.uint8)
    img[:] = cfg.background
    zbuf = np.full((v, v), np.inf)
    dys, dxs = _disc_offsets(cfg.splat_radius)
    for dy, dx in zip(dys, dxs):
        rr = rows + dy
        cc = cols + dx
        ok = (rr >= 0) & (rr < v) & (cc >= 0) & (cc < v)
        cand_depth = np.full((v, v), np.inf)
        cand_depth[rr[ok], cc[ok]] = depth[ok]
        cand_color = np.zeros((v, v, 3), dtype=np.uint8)
        cand_color[rr[ok], cc[ok]] = colors8[ok]
        nearer = cand_depth < zbuf
        zbuf[nearer] = cand_depth[nearer]
        img[nearer] = cand_color[nearer]
    mask = ~np.isfinite(zbuf)
    return ProjectionImage(img, mask, vp, cfg.background, depth=zbuf)


def render_mesh(mesh: TexturedMesh, vp: ViewpointId, cfg: RenderConfig) -> ProjectionImage:
    """Rasterize triangles with a z-buffer and unlit per-pixel texture lookup."""
    cam = viewpoint_camera(vp, bounding_box(mesh), cfg)
    v = cfg.viewport
    tx, ty, depth = cam.project(mesh.vertices)

    img = np.empty((v, v, 3), dtype=np.uint8)
    img[:] = cfg.background
    zbuf = np.full((v, v), np.inf)
    tex = mesh.texture

    for fv, ft in zip(mesh.faces_v, mesh.faces_vt):
        x0, x1, x2 = tx[fv]
        y0, y1, y2 = ty[fv]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:   # edge-on or degenerate
            continue
        c_lo = max(0, int(np.ceil(min(x0, x1, x2) - 0.5)))
        c_hi = min(v - 1, int(np.floor(max(x0, x1, x2) - 0.5)))
        r_lo = max(0, int(np.ceil(min(y0, y1, y2) - 0.5)))
        r_hi = min(v - 1, int(np.floor(max(y0, y1, y2) - 0.5)))
        if c_lo > c_hi or r_lo > r_hi:
            continue
        px = np.arange(c_lo, c_hi + 1) + 0.5
        py = (np.arange(r_lo, r_hi + 1) + 0.5)[:, None]
        w0 = ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) / area
        w1 = ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        d0, d1, d2 = depth[fv]
        pix_depth = w0 * d0 + w1 * d1 + w2 * d2
        block = zbuf[r_lo:r_hi + 1, c_lo:c_hi + 1]
        win = inside & (pix_depth < block)
        if not win.any():
            continue
        (u0, v0_), (u1, v1_), (u2, v2_) = mesh.uvs[ft]
        u = w0[win] * u0 + w1[win] * u1 + w2[win] * u2
        w = w0[win] * v0_ + w1[win] * v1_ + w2[win] * v2_
        colors = _sample_texture(tex, u, w, cfg.texture_filter)
        block[win] = pix_depth[win]
        img[r_lo:r_hi + 1, c_lo:c_hi + 1][win] = colors
    mask = ~np.isfinite(zbuf)
    return ProjectionImage(img, mask, vp, cfg.background, depth=zbuf)


def _sample_texture(tex: np.ndarray, u: np.ndarray, v: np.ndarray, mode: str) -> np.ndarray:
    """Sample the texture with repeat wrapping; v=0 is the bottom texture row."""
    th, tw = tex.shape[:2]
    uu = u - np.floor(u)
    vv = v - np.floor(v)
    if mode == "nearest":
        cols = np.minimum((uu * tw).astype(np.int64), tw - 1)
        rows = np.minimum(((1.0 - vv) * th).astype(np.int64), th - 1)
        return tex[rows, cols]
    # bilinear
    fx = uu * tw - 0.5
    fy = (1.0 - vv) * th - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    ax = (fx - x0)[:, None]
    ay = (fy - y0)[:, None]
    x0m, x1m = x0 % tw, (x0 + 1) % tw
    y0m, y1m = np.clip(y0, 0, th - 1), np.clip(y0 + 1, 0, th - 1)
    top = tex[y0m, x0m] * (1 - ax) + tex[y0m, x1m] * ax
    bot = tex[y1m, x0m] * (1 - ax) + tex[y1m, x1m] * ax
    return np.clip(np.round(top * (1 - ay) + bot * ay), 0, 255).astype(np.uint8)


def render_model(model, vp: ViewpointId, cfg: RenderConfig) -> ProjectionImage:
    """Dispatch to the point-cloud or mesh renderer."""
    if isinstance(model, PointCloud):
        return render_point_cloud(model, vp, cfg)
    if isinstance(model, TexturedMesh):
        return render_mesh(model, vp, cfg)
    raise RenderError(f"cannot render {type(model).__name__}")


def crop_background(img: ProjectionImage) -> ProjectionImage:
    """Crop to the minimal rectangle containing every non-background pixel."""
    content = ~img.background_mask
    row_hit = np.flatnonzero(content.any(axis=1))
    if row_hit.size == 0:
        raise RenderError("empty projection: image contains only background")
    col_hit = np.flatnonzero(content.any(axis=0))
    r0, r1 = int(row_hit[0]), int(row_hit[-1]) + 1
    c0, c1 = int(col_hit[0]), int(col_hit[-1]) + 1
    return ProjectionImage(
        img.pixels[r0:r1, c0:c1],
        img.background_mask[r0:r1, c0:c1],
        img.viewpoint,
        img.background,
        depth=None if img.depth is None else img.depth[r0:r1, c0:c1],
        crop_offset=(r0, c0),
        original_size=img.size,
    )


def render_selected(model, viewpoints, cfg: RenderConfig) -> list[ProjectionImage]:
    """Render and crop exactly the listed viewpoints; unlisted ones are never touched."""
    viewpoints = list(viewpoints)
    if not viewpoints:
        raise RenderError("render_selected requires at least one viewpoint")
    if len(set(viewpoints)) != len(viewpoints):
        raise RenderError("render_selected viewpoints must be distinct")
    return [crop_background(render_model(model, vp, cfg)) for vp in viewpoints]


def export_projection(img: ProjectionImage, path, cfg: RenderConfig | None = None) -> Path:
    """Write the raster as 8-bit RGB PNG plus a sidecar JSON with provenance."""
    path = Path(path)
    Image.fromarray(img.pixels, mode="RGB").save(path, format="PNG")
    sidecar = {
        "viewpoint": str(img.viewpoint),
        "crop_offset": list(img.crop_offset) if img.crop_offset else None,
        "original_size": list(img.original_size) if img.original_size else list(img.size),
        "render_config": cfg.to_dict() if cfg is not None else None,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2), encoding="utf-8"
    )
    return path
