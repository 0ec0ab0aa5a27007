"""Image buffers, bilinear resampling, augmentations and PNM I/O."""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import Xoshiro256pp

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class ImageBuffer:
    """H x W x C float image. ``native_shortest_side`` records the resolution before any resize."""

    pixels: np.ndarray
    native_shortest_side: int | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"image must be H x W x C with C in (1, 3), got shape {px.shape}")
        if not np.issubdtype(px.dtype, np.floating):
            px = px.astype(np.float32)
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shortest_side(self) -> int:
        return min(self.height, self.width)

    def with_pixels(self, pixels: np.ndarray) -> "ImageBuffer":
        return replace(self, pixels=pixels)

    def to_chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1))


# resampling ------------------------------------------------------------------

def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    return i0, i1, w


def bilinear_resize(img: ImageBuffer, out_h: int, out_w: int) -> ImageBuffer:
    """Half-pixel-centre bilinear resize with edge clamping."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"cannot resize to {out_h}x{out_w}")
    px = img.pixels
    H, W, _ = px.shape
    if (H, W) == (out_h, out_w):
        return img.with_pixels(px.copy())
    y0, y1, wy = _axis_weights(H, out_h)
    x0, x1, wx = _axis_weights(W, out_w)
    wy = wy.astype(px.dtype)[:, None, None]
    wx = wx.astype(px.dtype)[None, :, None]
    rows = px[y0] * (1 - wy) + px[y1] * wy
    out = rows[:, x0] * (1 - wx) + rows[:, x1] * wx
    return img.with_pixels(out)


def resize_shortest_side(img: ImageBuffer, side: int) -> ImageBuffer:
    """Resize so that min(H, W) == side, keeping the aspect ratio."""
    H, W = img.height, img.width
    if H <= W:
        return bilinear_resize(img, side, max(1, round(W * side / H)))
    return bilinear_resize(img, max(1, round(H * side / W)), side)


# colour ----------------------------------------------------------------------

def horizontal_flip(img: ImageBuffer) -> ImageBuffer:
    return img.with_pixels(img.pixels[:, ::-1].copy())


def _luma(px: np.ndarray) -> np.ndarray:
    if px.shape[2] == 1:
        return px[:, :, 0]
    return px[:, :, 0] * LUMA[0] + px[:, :, 1] * LUMA[1] + px[:, :, 2] * LUMA[2]


def to_grayscale(img: ImageBuffer) -> ImageBuffer:
    if img.channels != 3:
        raise ValueError("to_grayscale needs a 3-channel image")
    y = _luma(img.pixels).astype(img.pixels.dtype)
    return img.with_pixels(np.repeat(y[:, :, None], 3, axis=2))


def to_channels(img: ImageBuffer, channels: int) -> ImageBuffer:
    if img.channels == channels:
        return img
    if img.channels == 1 and channels == 3:
        return img.with_pixels(np.repeat(img.pixels, 3, axis=2))
    if img.channels == 3 and channels == 1:
        return img.with_pixels(_luma(img.pixels)[:, :, None].astype(img.pixels.dtype))
    raise ValueError(f"cannot convert {img.channels} channels to {channels}")


def color_jitter(img: ImageBuffer, brightness: float, contrast: float, saturation: float) -> ImageBuffer:
    """Brightness, then contrast around the luma mean, then saturation; clamped after each stage."""
    if min(brightness, contrast, saturation) < 0:
        raise ValueError("jitter factors must be non-negative")
    px = np.clip(img.pixels * brightness, 0, 1)
    mean = _luma(px).mean()
    px = np.clip(mean + contrast * (px - mean), 0, 1)
    if px.shape[2] == 3:
        gray = _luma(px)[:, :, None]
        px = np.clip(gray + saturation * (px - gray), 0, 1)
    return img.with_pixels(px.astype(img.pixels.dtype))


def normalize(img: ImageBuffer, mean, std) -> ImageBuffer:
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (img.channels,))
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), (img.channels,))
    if np.any(std <= 0):
        raise ValueError("normalisation std must be > 0 for every channel")
    return img.with_pixels(((img.pixels - mean) / std).astype(img.pixels.dtype))


# perspective -------------------------------------------------------------------

def solve_linear(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting."""
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    n = len(b)
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[piv, col]) < 1e-12:
            raise np.linalg.LinAlgError("singular system: degenerate quadrilateral")
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            b[[col, piv]] = b[[piv, col]]
        f = a[col + 1:, col] / a[col, col]
        a[col + 1:, col:] -= f[:, None] * a[col, col:]
        b[col + 1:] -= f * b[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1:] @ x[row + 1:]) / a[row, row]
    return x


def solve_homography(src, dst) -> np.ndarray:
    """3x3 projective map (h33 = 1) sending the four ``src`` points onto ``dst``."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rhs.append(u)
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.append(v)
    h = solve_linear(np.array(rows), np.array(rhs))
    return np.append(h, 1.0).reshape(3, 3)


def _is_convex(quad) -> bool:
    q = np.asarray(quad, dtype=np.float64)
    cross = []
    for i in range(4):
        a, b, c = q[i], q[(i + 1) % 4], q[(i + 2) % 4]
        cross.append((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]))
    cross = np.array(cross)
    return bool(np.all(cross > 0) or np.all(cross < 0))


def image_corners(h: int, w: int) -> np.ndarray:
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def sample_bilinear_zero(px: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup at float coordinates; taps outside the image read as 0."""
    H, W, C = px.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    out = np.zeros(xs.shape + (C,), dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            vals = px[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
            out += np.where(ok[..., None], vals, 0.0) * wx * wy
    return out


def random_perspective(img: ImageBuffer, displacements) -> ImageBuffer:
    """Warp so the image corners (TL, TR, BR, BL) land at corners + ``displacements`` (4 x 2, pixels)."""
    H, W = img.height, img.width
    src = image_corners(H, W)
    dst = src + np.asarray(displacements, dtype=np.float64).reshape(4, 2)
    if not _is_convex(dst):
        raise ValueError("displaced corners do not form a convex quadrilateral")
    if np.allclose(dst, src, atol=0, rtol=0):
        return img.with_pixels(img.pixels.copy())
    back = solve_homography(dst, src)  # destination pixel -> source pixel
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    den = back[2, 0] * xs + back[2, 1] * ys + back[2, 2]
    sx = (back[0, 0] * xs + back[0, 1] * ys + back[0, 2]) / den
    sy = (back[1, 0] * xs + back[1, 1] * ys + back[1, 2]) / den
    out = sample_bilinear_zero(img.pixels, sx, sy)
    return img.with_pixels(out.astype(img.pixels.dtype))


# pipeline --------------------------------------------------------------------

@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    grayscale_prob: float = 0.2
    jitter_prob: float = 0.5
    jitter_strength: float = 0.2
    perspective_prob: float = 0.5
    perspective_distortion: float = 0.2
    normalize_mean: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    normalize_std: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])

    def __post_init__(self):
        for name in ("flip_prob", "grayscale_prob", "jitter_prob", "perspective_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")
        if any(s <= 0 for s in self.normalize_std):
            raise ValueError("normalize_std components must be > 0")

    @classmethod
    def disabled(cls, **kw) -> "AugmentConfig":
        return cls(flip_prob=0.0, grayscale_prob=0.0, jitter_prob=0.0, perspective_prob=0.0, **kw)


def prepare_input(img: ImageBuffer, size: int, channels: int) -> ImageBuffer:
    """Resize to size x size and match the network's channel count."""
    return to_channels(bilinear_resize(img, size, size), channels)


def apply_augmentations(img: ImageBuffer, cfg: AugmentConfig, rng: Xoshiro256pp,
                        size: int | None = None, channels: int = 3) -> ImageBuffer:
    """resize -> flip? -> grayscale? -> jitter? -> perspective? -> normalize.

    The same 15 draws are taken on every call, whatever stages fire.
    """
    size = size or img.height
    u_flip, u_gray, u_jit = rng.random(), rng.random(), rng.random()
    s = cfg.jitter_strength
    b, c, sat = (rng.uniform(1 - s, 1 + s) for _ in range(3))
    u_persp = rng.random()
    disp_frac = [rng.random() for _ in range(8)]

    img = prepare_input(img, size, channels)
    if u_flip < cfg.flip_prob:
        img = horizontal_flip(img)
    if u_gray < cfg.grayscale_prob and img.channels == 3:
        img = to_grayscale(img)
    if u_jit < cfg.jitter_prob:
        img = color_jitter(img, b, c, sat)
    if u_persp < cfg.perspective_prob and cfg.perspective_distortion > 0:
        d = cfg.perspective_distortion * min(img.height, img.width)
        inward = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float64)
        img = random_perspective(img, inward * np.array(disp_frac).reshape(4, 2) * d)
    return normalize(img, cfg.normalize_mean[: img.channels], cfg.normalize_std[: img.channels])


# PNM I/O -----------------------------------------------------------------------

_PNM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def read_pnm(path) -> ImageBuffer:
    """Read a binary P5 (gray) or P6 (RGB) pixmap with maxval 255."""
    path = Path(path)
    try:
        blob = path.read_bytes()
        pos = 0
        tokens = []
        while len(tokens) < 4:
            m = _PNM_TOKEN.match(blob, pos)
            if m is None:
                raise ValueError("truncated header")
            tokens.append(m.group(1))
            pos = m.end()
        magic = tokens[0]
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"unsupported magic {magic!r}")
        w, h, maxval = (int(t) for t in tokens[1:])
        if maxval != 255:
            raise ValueError(f"only maxval 255 is supported, got {maxval}")
        c = 1 if magic == b"P5" else 3
        data = blob[pos + 1: pos + 1 + w * h * c]
        if len(data) != w * h * c:
            raise ValueError("pixel data truncated")
    except (OSError, ValueError) as exc:
        raise ValueError(f"unreadable pixmap {path}: {exc}") from None
    px = np.frombuffer(data, dtype=np.uint8).reshape(h, w, c).astype(np.float32) / 255.0
    return ImageBuffer(px, native_shortest_side=min(h, w))


def encode_pnm(img: ImageBuffer) -> bytes:
    px = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if img.channels == 1 else b"P6"
    return magic + f"\n{img.width} {img.height}\n255\n".encode() + px.tobytes()


def write_pnm(img: ImageBuffer, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_pnm(img))
    return path
