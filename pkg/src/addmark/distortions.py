"""Parameterized distortion operators applied to (watermarked) images.

Every operator preserves the image shape; crop resizes back to the
original resolution.  No operator clips to the declared value range --
clipping is applied only when writing displayable files.
"""

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from addmark.tensor import ImageTensor, value_range_max

KINDS = (
    "identity",
    "gaussian_blur",
    "jpeg_like",
    "brightness",
    "contrast",
    "gaussian_noise",
    "rotation",
    "center_crop",
    "random_erase",
)

# Baseline JPEG luminance quantization table (8x8), applied per channel.
_JPEG_QTABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

_DEFAULT_PARAMS = {
    "identity": {},
    "gaussian_blur": {"sigma": 1.0, "radius": 3},
    "jpeg_like": {"quality": 50},
    "brightness": {"scale": 1.3},
    "contrast": {"scale": 1.3},
    "gaussian_noise": {"sigma": 0.05},
    "rotation": {"angle": 9.0},
    "center_crop": {"fraction": 0.7},
    "random_erase": {"fraction": 0.1, "count": 1},
}


class DistortionSpec:
    def __init__(self, kind, params=None, weight=1.0):
        if kind not in KINDS:
            raise ValueError(f"unknown distortion kind {kind!r}")
        if weight < 0:
            raise ValueError("weight must be nonnegative")
        merged = dict(_DEFAULT_PARAMS[kind])
        merged.update(params or {})
        unknown = set(merged) - set(_DEFAULT_PARAMS[kind])
        if unknown:
            raise ValueError(f"unknown params for {kind}: {sorted(unknown)}")
        _validate_params(kind, merged)
        self.kind = kind
        self.params = merged
        self.weight = float(weight)

    def to_dict(self):
        return {"kind": self.kind, "params": dict(self.params), "weight": self.weight}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("params"), d.get("weight", 1.0))

    def __repr__(self):
        return f"DistortionSpec({self.kind!r}, {self.params!r}, weight={self.weight})"


def _validate_params(kind, p):
    if kind == "gaussian_blur" and (p["sigma"] < 0 or p["radius"] < 1):
        raise ValueError("blur requires sigma >= 0 and radius >= 1")
    if kind == "jpeg_like" and not 1 <= p["quality"] <= 100:
        raise ValueError("jpeg quality must be in [1, 100]")
    if kind in ("brightness", "contrast") and p["scale"] <= 0:
        raise ValueError("scale must be positive")
    if kind == "gaussian_noise" and p["sigma"] < 0:
        raise ValueError("noise sigma must be nonnegative")
    if kind == "center_crop" and not 0 < p["fraction"] <= 1:
        raise ValueError("crop fraction must be in (0, 1]")
    if kind == "random_erase" and (
        not 0 <= p["fraction"] < 1 or p["count"] < 1
    ):
        raise ValueError("erase requires fraction in [0, 1) and count >= 1")


def default_pool(value_range="unit", include=KINDS):
    """Equal-weight pool over the requested kinds with default parameters."""
    return [DistortionSpec(k, weight=1.0 / len(include)) for k in include]


def sample_channel(pool, rng):
    """Categorical draw from the pool by (normalized) weights."""
    if not pool:
        raise ValueError("distortion pool is empty")
    weights = np.array([s.weight for s in pool], dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ValueError("pool weights sum to zero")
    idx = rng.generator.choice(len(pool), p=weights / total)
    return pool[idx]


def apply(spec, img, rng=None):
    """Apply one distortion.  Randomized kinds (noise, erase) draw from rng."""
    arr = img.as_array()
    kind = spec.kind
    p = spec.params
    if kind == "identity":
        return img
    if kind == "gaussian_blur":
        out = _blur(arr, p["sigma"], p["radius"])
    elif kind == "jpeg_like":
        out = _jpeg_like(arr, p["quality"], value_range_max(img.value_range))
    elif kind == "brightness":
        out = p["scale"] * arr
    elif kind == "contrast":
        pivot = 0.5 * value_range_max(img.value_range)
        out = pivot + p["scale"] * (arr - pivot)
    elif kind == "gaussian_noise":
        if rng is None:
            raise ValueError("gaussian_noise requires an rng")
        scale = value_range_max(img.value_range)
        out = arr + p["sigma"] * scale * rng.generator.standard_normal(arr.shape)
    elif kind == "rotation":
        out = np.stack(
            [
                ndimage.rotate(
                    ch, p["angle"], reshape=False, order=1, mode="reflect"
                )
                for ch in arr
            ]
        )
    elif kind == "center_crop":
        out = _center_crop(arr, p["fraction"])
    elif kind == "random_erase":
        if rng is None:
            raise ValueError("random_erase requires an rng")
        out = _random_erase(arr, p["fraction"], p["count"], rng)
    else:  # pragma: no cover
        raise ValueError(kind)
    return ImageTensor(*img.shape, out, value_range="unbounded")


def linear_gain(spec):
    """Multiplicative gain the distortion applies to an additive perturbation,
    used by straight-through gradient estimates.  Exact for brightness and
    contrast; 1.0 (pass-through) for everything else."""
    if spec.kind in ("brightness", "contrast"):
        return spec.params["scale"]
    return 1.0


def _blur(arr, sigma, radius):
    if sigma == 0:
        return arr.copy()
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (k / sigma) ** 2)
    kernel /= kernel.sum()
    out = arr
    for axis in (1, 2):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="reflect")
    return out


def _jpeg_quant_table(quality):
    if quality < 50:
        scale = 5000.0 / quality
    else:
        scale = 200.0 - 2.0 * quality
    return np.clip(np.floor((_JPEG_QTABLE * scale + 50.0) / 100.0), 1.0, 255.0)


def _jpeg_like(arr, quality, peak):
    """Blockwise 8x8 DCT, quantize with the quality-scaled table, invert.

    Operates on a byte-scale copy (peak mapped to 255) padded with edge
    replication to a multiple of 8.
    """
    q = _jpeg_quant_table(quality)
    c, h, w = arr.shape
    scaled = arr * (255.0 / peak) - 128.0
    ph, pw = (-h) % 8, (-w) % 8
    padded = np.pad(scaled, ((0, 0), (0, ph), (0, pw)), mode="edge")
    H, W = padded.shape[1:]
    blocks = padded.reshape(c, H // 8, 8, W // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / q) * q
    rec = idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(c, H, W)[:, :h, :w]
    return (rec + 128.0) * (peak / 255.0)


def _center_crop(arr, fraction):
    c, h, w = arr.shape
    ch = max(1, int(round(h * fraction)))
    cw = max(1, int(round(w * fraction)))
    top = (h - ch) // 2
    left = (w - cw) // 2
    cropped = arr[:, top : top + ch, left : left + cw]
    if (ch, cw) == (h, w):
        return cropped.copy()
    return np.stack(
        [ndimage.zoom(ci, (h / ch, w / cw), order=1, mode="reflect", grid_mode=True)
         for ci in cropped]
    )


def _random_erase(arr, fraction, count, rng):
    c, h, w = arr.shape
    out = arr.copy()
    g = rng.generator
    side = np.sqrt(fraction / count)
    eh = max(1, int(round(h * side)))
    ew = max(1, int(round(w * side)))
    for _ in range(count):
        top = int(g.integers(0, h - eh + 1))
        left = int(g.integers(0, w - ew + 1))
        out[:, top : top + eh, left : left + ew] = 0.0
    return out
