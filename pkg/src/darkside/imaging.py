"""Photometric normalization and geometric augmentation on raw image arrays.

Images are plain ``float`` numpy arrays of shape ``(H, W, C)`` with
``C in {1, 3}``.  Storage range is [0, 1]; networks see [-1, 1]
(see :func:`to_model_range`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

__all__ = [
    "ClaheConfig",
    "clahe",
    "clahe_gray",
    "rgb_to_lab",
    "lab_to_rgb",
    "lab_intensity_invert",
    "luminance",
    "random_scale_crop",
    "to_model_range",
    "from_model_range",
]

# D65 reference white, 2 degree observer
_WHITE = np.array([0.95047, 1.0, 1.08883])
_RGB_TO_XYZ = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_EPS = 216 / 24389
_KAPPA = 24389 / 27


@dataclass(frozen=True)
class ClaheConfig:
    grid: tuple[int, int] = (8, 8)
    clip_limit: float = 1.0
    bins: int = 256

    def __post_init__(self):
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ValueError(f"CLAHE grid must be two positive ints, got {self.grid}")
        if not self.clip_limit > 0:
            raise ValueError(f"clip_limit must be positive, got {self.clip_limit}")


def _as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3) or min(img.shape[:2]) < 1:
        raise ValueError(f"expected an HxWxC image with C in (1, 3), got shape {img.shape}")
    return img


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.array([(i * n) // tiles for i in range(tiles + 1)])


def _tile_luts(q: np.ndarray, rows: np.ndarray, cols: np.ndarray, cfg: ClaheConfig) -> np.ndarray:
    """Clipped, equalized mapping per tile, shape ``(R, C, bins)`` in [0, 1]."""
    R, C = len(rows) - 1, len(cols) - 1
    luts = np.empty((R, C, cfg.bins))
    for r in range(R):
        for c in range(C):
            tile = q[rows[r] : rows[r + 1], cols[c] : cols[c + 1]]
            npix = tile.size
            hist = np.bincount(tile.ravel(), minlength=cfg.bins).astype(np.float64)
            limit = cfg.clip_limit * npix / cfg.bins
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / cfg.bins
            luts[r, c] = np.cumsum(hist) / npix
    return np.clip(luts, 0.0, 1.0)


def _interp_axis(coords: np.ndarray, centers: np.ndarray):
    """Lower/upper tile index and upper weight for each pixel coordinate."""
    n = len(centers)
    hi = np.searchsorted(centers, coords, side="right")
    lo = np.clip(hi - 1, 0, n - 1)
    hi = np.clip(hi, 0, n - 1)
    span = centers[hi] - centers[lo]
    w = np.where(span > 0, (coords - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, w


def clahe_gray(gray: np.ndarray, cfg: ClaheConfig = ClaheConfig()) -> np.ndarray:
    """CLAHE on a single ``(H, W)`` channel in [0, 1].

    Each tile gets a histogram with ``cfg.bins`` bins, clipped at
    ``clip_limit * tile_pixels / bins`` with the excess spread evenly over
    all bins.  Pixels blend the mappings of the four nearest tile centers
    bilinearly; pixels outside the outermost centers clamp to the border
    tiles.
    """
    gray = np.asarray(gray, dtype=np.float64)
    H, W = gray.shape
    R, C = cfg.grid
    if H < R or W < C:
        raise ValueError(f"image {H}x{W} is smaller than the {R}x{C} CLAHE grid")
    q = np.clip(np.rint(gray * (cfg.bins - 1)), 0, cfg.bins - 1).astype(np.intp)
    rows, cols = _tile_edges(H, R), _tile_edges(W, C)
    luts = _tile_luts(q, rows, cols, cfg)

    cy = (rows[:-1] + rows[1:] - 1) / 2.0
    cx = (cols[:-1] + cols[1:] - 1) / 2.0
    y0, y1, wy = _interp_axis(np.arange(H, dtype=np.float64), cy)
    x0, x1, wx = _interp_axis(np.arange(W, dtype=np.float64), cx)

    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    WY, WX = wy[:, None], wx[None, :]
    top = (1 - WX) * luts[Y0, X0, q] + WX * luts[Y0, X1, q]
    bot = (1 - WX) * luts[Y1, X0, q] + WX * luts[Y1, X1, q]
    return (1 - WY) * top + WY * bot


def clahe(img, cfg: ClaheConfig = ClaheConfig()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Color images are equalized on the LAB lightness channel only; chroma
    is carried through unchanged.
    """
    img = _as_image(img)
    if img.shape[2] == 1:
        return clahe_gray(np.clip(img[..., 0], 0, 1), cfg)[..., None]
    lab = rgb_to_lab(np.clip(img, 0, 1))
    lab[..., 0] = 100.0 * clahe_gray(lab[..., 0] / 100.0, cfg)
    return np.clip(lab_to_rgb(lab), 0.0, 1.0)


def _srgb_to_linear(c):
    return np.where(c > 0.04045, (np.abs(c + 0.055) / 1.055) ** 2.4, c / 12.92)


def _linear_to_srgb(c):
    return np.where(c > 0.0031308, 1.055 * np.abs(c) ** (1 / 2.4) - 0.055, 12.92 * c)


def _f(t):
    return np.where(t > _EPS, np.cbrt(t), (_KAPPA * t + 16) / 116)


def _finv(t):
    return np.where(t**3 > _EPS, t**3, (116 * t - 16) / _KAPPA)


def rgb_to_lab(rgb) -> np.ndarray:
    """sRGB (D65) to CIELAB, L on a 0-100 scale.  No clipping."""
    rgb = np.asarray(rgb, dtype=np.float64)
    xyz = _srgb_to_linear(rgb) @ _RGB_TO_XYZ.T / _WHITE
    fx, fy, fz = (_f(xyz[..., i]) for i in range(3))
    return np.stack([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)], axis=-1)


def lab_to_rgb(lab) -> np.ndarray:
    """CIELAB to sRGB (D65).  Out-of-gamut values are *not* clipped."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16) / 116
    fx = fy + lab[..., 1] / 500
    fz = fy - lab[..., 2] / 200
    xyz = np.stack([_finv(fx), _finv(fy), _finv(fz)], axis=-1) * _WHITE
    return _linear_to_srgb(xyz @ _XYZ_TO_RGB.T)


def lab_intensity_invert(img, clip: bool = True) -> np.ndarray:
    """Replace LAB lightness L by ``100 - L``, keep a and b.

    With ``clip=False`` out-of-gamut results are returned unclipped, which
    makes the operation an exact involution up to float rounding.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"LAB inversion needs an RGB image, got shape {img.shape}")
    lab = rgb_to_lab(img)
    lab[..., 0] = 100.0 - lab[..., 0]
    out = lab_to_rgb(lab)
    return np.clip(out, 0.0, 1.0) if clip else out


def luminance(img) -> np.ndarray:
    """Rec. 709 luma of an RGB image in [0, 1]; gray images pass through."""
    img = _as_image(img)
    if img.shape[2] == 1:
        return img[..., 0]
    return img @ np.array([0.2126, 0.7152, 0.0722])


def random_scale_crop(img, rng: np.random.Generator, scale_range=(0.8, 1.0), crop=(256, 256)) -> np.ndarray:
    """Random downscale followed by a uniformly placed crop.

    Exactly three draws from ``rng``: scale, row offset, column offset.  A
    sampled scale that would leave the image smaller than ``crop`` is
    clamped upward to the smallest feasible scale.
    """
    img = _as_image(img)
    lo, hi = scale_range
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {scale_range}")
    ch, cw = crop
    H, W = img.shape[:2]
    if H * hi < ch or W * hi < cw:
        need = (math.ceil(ch / hi), math.ceil(cw / hi))
        raise ValueError(f"image {H}x{W} too small for crop {ch}x{cw} at scale {hi}; needs at least {need[0]}x{need[1]}")

    s = max(float(rng.uniform(lo, hi)), ch / H, cw / W)
    nh, nw = max(ch, round(H * s)), max(cw, round(W * s))
    if (nh, nw) != (H, W):
        out = cv2.resize(img, (nw, nh), interpolation=cv2.INTER_AREA)
        img = out.reshape(nh, nw, img.shape[2])
    y = int(rng.integers(0, nh - ch + 1))
    x = int(rng.integers(0, nw - cw + 1))
    return img[y : y + ch, x : x + cw].copy()


def to_model_range(img):
    return img * 2.0 - 1.0


def from_model_range(img):
    return (img + 1.0) / 2.0
