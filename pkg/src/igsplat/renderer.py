"""Differentiable pinhole splatting of colors and instance features.

Splats are projected to the image plane, rasterized as isotropic Gaussians
(pixel-space std = pixel_radius / 3, hard cutoff at 3 sigma), and composited
front to back:

    value(p) = sum_i alpha_i(p) * T_i(p) * x_i,   T_i = prod_{j<i} (1 - alpha_j)

with alpha_i(p) = min(0.99, opacity_i * exp(-|p - center_i|^2 / (2 sigma_px^2))).
The identical operator renders color (x = c) and the 6-dim feature (x = f);
background is zero for both. Depth ordering is ascending with ties broken by
splat index, and is treated as constant in the backward pass.

Pixel (row, col) samples the continuous image plane at (x=col, y=row);
per-pixel contributions are accumulated in pixel-major order so forward and
backward results are reproducible bit for bit.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from .binio import write_atomic
from .errors import DataError, UsageError
from .scene_model import SplatSet

NEAR_PLANE = 0.01
ALPHA_MAX = 0.99
CUTOFF_SIGMAS = 3.0


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise DataError("image size must be at least 1x1")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-5:
            raise DataError(f"camera rotation is not orthonormal (max error {err:.2e})")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def to_json_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "R": [float(v) for v in self.rotation.reshape(-1)],
            "t": [float(v) for v in self.translation],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            rotation=np.array(d["R"], dtype=np.float64).reshape(3, 3),
            translation=np.array(d["t"], dtype=np.float64),
        )


def save_camera(path: str, camera: Camera) -> None:
    write_atomic(path, (json.dumps(camera.to_json_dict(), indent=2, sort_keys=True) + "\n").encode())


def load_camera(path: str) -> Camera:
    with open(path) as fh:
        return Camera.from_json_dict(json.load(fh))


@dataclass
class ProjectedSplats:
    """Visible splats in ascending depth order (ties: ascending splat index)."""

    indices: np.ndarray  # (k,) original splat indices
    u: np.ndarray  # (k,) pixel x of the projected center
    v: np.ndarray  # (k,) pixel y
    depth: np.ndarray  # (k,)
    radius_px: np.ndarray  # (k,) cutoff radius = 3 * scale * fx / depth
    sigma_px: np.ndarray  # (k,) Gaussian std in pixels
    cam_points: np.ndarray  # (k, 3) camera-space centers

    @property
    def count(self) -> int:
        return self.indices.shape[0]


def project_splats(splats: SplatSet, camera: Camera) -> ProjectedSplats:
    """Project to the image plane, cull splats at depth <= the near plane."""
    cam = camera.world_to_camera(splats.centers)
    z = cam[:, 2]
    keep = np.flatnonzero(z > NEAR_PLANE)
    cam = cam[keep]
    z = z[keep]
    u = camera.fx * cam[:, 0] / z + camera.cx
    v = camera.fy * cam[:, 1] / z + camera.cy
    sigma_px = splats.scales[keep] * camera.fx / z
    order = np.argsort(z, kind="stable")  # stable: equal depths stay in index order
    return ProjectedSplats(
        indices=keep[order],
        u=u[order],
        v=v[order],
        depth=z[order],
        radius_px=CUTOFF_SIGMAS * sigma_px[order],
        sigma_px=sigma_px[order],
        cam_points=cam[order],
    )


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    feature: np.ndarray  # (H, W, 6)
    alpha: np.ndarray  # (H, W)
    # Flat per-contribution arrays, sorted by (pixel, depth order); these are
    # the per-pixel contributor lists retained for the backward pass.
    pix: np.ndarray  # (q,) flat pixel index
    splat: np.ndarray  # (q,) original splat index
    alpha_i: np.ndarray  # (q,) clamped alpha
    trans: np.ndarray  # (q,) transmittance before this contribution
    clamped: np.ndarray  # (q,) bool, alpha hit the 0.99 clamp
    seg_start: np.ndarray  # (#pixels with contributions,) segment starts into the flat arrays
    seg_pix: np.ndarray  # (#pixels,) flat pixel index per segment
    projected: ProjectedSplats | None
    splats: SplatSet | None
    camera: Camera | None

    def contributors(self, row: int, col: int):
        """(splat index, alpha, T) triples for one pixel, front to back."""
        flat = row * self.color.shape[1] + col
        pos = np.searchsorted(self.seg_pix, flat)
        if pos == len(self.seg_pix) or self.seg_pix[pos] != flat:
            return []
        lo = self.seg_start[pos]
        hi = self.seg_start[pos + 1] if pos + 1 < len(self.seg_start) else len(self.pix)
        return list(zip(self.splat[lo:hi], self.alpha_i[lo:hi], self.trans[lo:hi]))


@dataclass
class SplatGrads:
    colors: np.ndarray
    features: np.ndarray
    opacities: np.ndarray
    scales: np.ndarray
    centers: np.ndarray


def _empty_output(splats, camera, proj) -> RenderOutput:
    h, w = camera.height, camera.width
    zero = np.zeros(0)
    return RenderOutput(
        color=np.zeros((h, w, 3)),
        feature=np.zeros((h, w, 6)),
        alpha=np.zeros((h, w)),
        pix=np.zeros(0, dtype=np.int64),
        splat=np.zeros(0, dtype=np.int64),
        alpha_i=zero,
        trans=np.zeros(0),
        clamped=np.zeros(0, dtype=bool),
        seg_start=np.zeros(0, dtype=np.int64),
        seg_pix=np.zeros(0, dtype=np.int64),
        projected=proj,
        splats=splats,
        camera=camera,
    )


def _build_contributions(proj: ProjectedSplats, camera: Camera):
    """Enumerate (splat, pixel) pairs inside each splat's cutoff disk.

    Returns flat arrays sorted by (pixel, depth order). Entirely vectorized:
    per-splat bounding boxes are expanded with a ragged-range construction.
    """
    w, h = camera.width, camera.height
    x0 = np.maximum(np.ceil(proj.u - proj.radius_px), 0).astype(np.int64)
    x1 = np.minimum(np.floor(proj.u + proj.radius_px), w - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(proj.v - proj.radius_px), 0).astype(np.int64)
    y1 = np.minimum(np.floor(proj.v + proj.radius_px), h - 1).astype(np.int64)
    widths = x1 - x0 + 1
    heights = y1 - y0 + 1
    valid = (widths > 0) & (heights > 0)
    counts = np.where(valid, widths * heights, 0)
    total = int(counts.sum())
    if total == 0:
        return None

    order_pos = np.repeat(np.arange(proj.count, dtype=np.int64), counts)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    within = np.arange(total, dtype=np.int64) - offsets
    w_rep = np.repeat(widths, counts)
    col = np.repeat(x0, counts) + within % w_rep
    row = np.repeat(y0, counts) + within // w_rep

    du = col - proj.u[order_pos]
    dv = row - proj.v[order_pos]
    d2 = du * du + dv * dv
    r_rep = proj.radius_px[order_pos]
    inside = d2 <= r_rep * r_rep
    if not inside.any():
        return None
    order_pos = order_pos[inside]
    col = col[inside]
    row = row[inside]
    d2 = d2[inside]

    pixflat = row * w + col
    sort_idx = np.argsort(pixflat, kind="stable")  # preserves depth order per pixel
    return pixflat[sort_idx], order_pos[sort_idx], d2[sort_idx]


def render(splats: SplatSet, camera: Camera) -> RenderOutput:
    """Rasterize color, feature, and alpha images with contributor retention."""
    proj = project_splats(splats, camera)
    if proj.count == 0:
        return _empty_output(splats, camera, proj)
    built = _build_contributions(proj, camera)
    if built is None:
        return _empty_output(splats, camera, proj)
    pixflat, order_pos, d2 = built

    sigma = proj.sigma_px[order_pos]
    opac = splats.opacities[proj.indices[order_pos]]
    alpha_raw = opac * np.exp(-d2 / (2.0 * sigma * sigma))
    clamped = alpha_raw > ALPHA_MAX
    alpha = np.where(clamped, ALPHA_MAX, alpha_raw)

    # Exclusive per-pixel product of (1 - alpha) via a segmented log cumsum.
    boundaries = np.empty(len(pixflat), dtype=bool)
    boundaries[0] = True
    boundaries[1:] = pixflat[1:] != pixflat[:-1]
    seg_start = np.flatnonzero(boundaries)
    seg_id = np.cumsum(boundaries) - 1
    logs = np.log1p(-alpha)
    csum = np.cumsum(logs)
    excl = csum - logs
    trans = np.exp(excl - excl[seg_start[seg_id]])

    weight = alpha * trans
    splat_orig = proj.indices[order_pos]
    h, w = camera.height, camera.width
    seg_pix = pixflat[seg_start]

    color = np.zeros((h * w, 3))
    feature = np.zeros((h * w, 6))
    for ch in range(3):
        color[seg_pix, ch] = np.add.reduceat(weight * splats.colors[splat_orig, ch], seg_start)
    for ch in range(6):
        feature[seg_pix, ch] = np.add.reduceat(weight * splats.features[splat_orig, ch], seg_start)
    alpha_img = np.zeros(h * w)
    alpha_img[seg_pix] = np.minimum(np.add.reduceat(weight, seg_start), 1.0)

    return RenderOutput(
        color=color.reshape(h, w, 3),
        feature=feature.reshape(h, w, 6),
        alpha=alpha_img.reshape(h, w),
        pix=pixflat,
        splat=splat_orig,
        alpha_i=alpha,
        trans=trans,
        clamped=clamped,
        seg_start=seg_start,
        seg_pix=seg_pix,
        projected=proj,
        splats=splats,
        camera=camera,
    )


def render_backward(
    output: RenderOutput,
    grad_color: np.ndarray | None = None,
    grad_feature: np.ndarray | None = None,
    geometry: bool = True,
) -> SplatGrads:
    """Analytic gradients w.r.t. splat colors, features, opacities, scales,
    and centers, holding the depth ordering and footprints constant.

    ``geometry=False`` skips the alpha-chain entirely and propagates only the
    direct weight * grad terms into colors/features; this is the severed path
    used when feature losses may touch features but not geometry.
    """
    if output.splats is None or output.projected is None:
        raise UsageError("render output does not retain contributor lists")
    splats = output.splats
    camera = output.camera
    n = splats.count
    grads = SplatGrads(
        colors=np.zeros((n, 3)),
        features=np.zeros((n, 6)),
        opacities=np.zeros(n),
        scales=np.zeros(n),
        centers=np.zeros((n, 3)),
    )
    if grad_color is None and grad_feature is None:
        return grads
    if output.pix.size == 0:
        return grads

    pix = output.pix
    splat = output.splat
    alpha = output.alpha_i
    trans = output.trans
    weight = alpha * trans

    q = np.zeros(len(pix))
    if grad_color is not None:
        gc = grad_color.reshape(-1, 3)[pix]
        for ch in range(3):
            grads.colors[:, ch] = np.bincount(splat, weights=weight * gc[:, ch], minlength=n)
        q += np.einsum("ij,ij->i", gc, splats.colors[splat])
    if grad_feature is not None:
        gf = grad_feature.reshape(-1, 6)[pix]
        for ch in range(6):
            grads.features[:, ch] = np.bincount(splat, weights=weight * gf[:, ch], minlength=n)
        q += np.einsum("ij,ij->i", gf, splats.features[splat])
    if not geometry:
        return grads

    # d(pixel)/d(alpha_i) = T_i x_i - sum_{j>i} alpha_j T_j x_j / (1 - alpha_i)
    seg_start = output.seg_start
    seg_id = np.zeros(len(pix), dtype=np.int64)
    seg_id[seg_start] = 1
    seg_id = np.cumsum(seg_id) - 1
    v = weight * q
    csum = np.cumsum(v)
    incl = csum - (csum[seg_start] - v[seg_start])[seg_id]
    seg_total = np.add.reduceat(v, seg_start)
    suffix = seg_total[seg_id] - incl
    d_alpha = q * trans - suffix / (1.0 - alpha)
    d_alpha = np.where(output.clamped, 0.0, d_alpha)

    proj = output.projected
    # Map each contribution back to its projected-splat slot for geometry.
    # Rebuild per-entry pixel offsets from the flat pixel index.
    w_img = camera.width
    col = pix % w_img
    row = pix // w_img
    # position of each entry's splat inside the projected (sorted) arrays
    pos_of_orig = np.full(n, -1, dtype=np.int64)
    pos_of_orig[proj.indices] = np.arange(proj.count)
    entry_pos = pos_of_orig[splat]
    u = proj.u[entry_pos]
    vv = proj.v[entry_pos]
    sig = proj.sigma_px[entry_pos]

    d2 = (col - u) ** 2 + (row - vv) ** 2
    inv_sig2 = 1.0 / (sig * sig)
    gauss = np.exp(-d2 * inv_sig2 / 2.0)
    d_opac = np.where(output.clamped, 0.0, d_alpha * gauss)
    grads.opacities = np.bincount(splat, weights=d_opac, minlength=n)

    common = np.where(output.clamped, 0.0, d_alpha * alpha)
    du = common * (col - u) * inv_sig2
    dv = common * (row - vv) * inv_sig2
    dsig = common * d2 * inv_sig2 / sig

    du_s = np.bincount(splat, weights=du, minlength=n)[proj.indices]
    dv_s = np.bincount(splat, weights=dv, minlength=n)[proj.indices]
    dsig_s = np.bincount(splat, weights=dsig, minlength=n)[proj.indices]

    x, y, z = proj.cam_points[:, 0], proj.cam_points[:, 1], proj.cam_points[:, 2]
    fx, fy = camera.fx, camera.fy
    scale_kept = splats.scales[proj.indices]
    dx = du_s * fx / z
    dy = dv_s * fy / z
    dz = -(du_s * fx * x + dv_s * fy * y + dsig_s * scale_kept * fx) / (z * z)
    grads.scales[proj.indices] = dsig_s * fx / z
    grads.centers[proj.indices] = np.stack([dx, dy, dz], axis=1) @ camera.rotation
    return grads


def save_png(path: str, image: np.ndarray) -> None:
    """8-bit PNG export of an (H, W, 3) image in [0, 1] (deterministic bytes)."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.ndim != 3 or data.shape[2] != 3:
        raise UsageError("save_png expects an (H, W, 3) image")
    h, w = data.shape[:2]
    raw = b"".join(b"\x00" + data[r].tobytes() for r in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        body = tag + payload
        return len(payload).to_bytes(4, "big") + body + zlib.crc32(body).to_bytes(4, "big")

    header = w.to_bytes(4, "big") + h.to_bytes(4, "big") + bytes([8, 2, 0, 0, 0])
    png = b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header)
    png += chunk(b"IDAT", zlib.compress(raw, 6)) + chunk(b"IEND", b"")
    write_atomic(path, png)


def write_raw_f32(path: str, image: np.ndarray) -> None:
    """Header-less planar little-endian f32 dump: (C, H, W) for 3-D images,
    (H, W) as-is for single planes. Shape travels out of band (camera file)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.transpose(2, 0, 1)
    write_atomic(path, np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_raw_f32(path: str, height: int, width: int, channels: int = 0) -> np.ndarray:
    with open(path, "rb") as fh:
        flat = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    if channels:
        expected = channels * height * width
        if flat.size != expected:
            raise DataError(f"{path}: expected {expected} floats, found {flat.size}")
        return flat.reshape(channels, height, width).transpose(1, 2, 0)
    if flat.size != height * width:
        raise DataError(f"{path}: expected {height * width} floats, found {flat.size}")
    return flat.reshape(height, width)
