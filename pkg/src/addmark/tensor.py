"""Image containers, flattening, seeded RNG streams, PSNR and image file I/O.

Images live in C x H x W layout and are flattened row-major (c, h, w) into
vectors of length D = C*H*W.  All statistics are computed in float64.
"""

import json
import struct

import numpy as np

VALUE_RANGES = ("unit", "byte", "unbounded")

_RANGE_BOUNDS = {"unit": (0.0, 1.0), "byte": (0.0, 255.0)}
_RANGE_CODE = {"unit": 0, "byte": 1, "unbounded": 2}
_CODE_RANGE = {v: k for k, v in _RANGE_CODE.items()}

ADDT_MAGIC = b"ADDT"


class SeededRng:
    """Deterministic RNG keyed by (seed, stream_id).

    Distinct stream_ids give statistically independent streams; identical
    (seed, stream_id) pairs replay the same draw sequence.  Not thread-safe:
    each worker should own its own stream via ``spawn``.
    """

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.generator = np.random.default_rng([self.seed, self.stream_id])

    def spawn(self, stream_id):
        return SeededRng(self.seed, stream_id)


class ImageTensor:
    """A C x H x W real image with a declared value range.

    ``data`` is stored as a flat float array of length C*H*W in (c, h, w)
    row-major order.
    """

    def __init__(self, channels, height, width, data, value_range="unit"):
        if channels < 1 or height < 1 or width < 1:
            raise ValueError("image dimensions must be positive")
        if value_range not in VALUE_RANGES:
            raise ValueError(f"unknown value_range {value_range!r}")
        data = np.asarray(data, dtype=np.float64).ravel()
        if data.size != channels * height * width:
            raise ValueError(
                f"data length {data.size} != {channels}*{height}*{width}"
            )
        if value_range in _RANGE_BOUNDS:
            lo, hi = _RANGE_BOUNDS[value_range]
            if data.size and (data.min() < lo or data.max() > hi):
                raise ValueError(
                    f"data outside declared {value_range} range [{lo}, {hi}]"
                )
        self.channels = int(channels)
        self.height = int(height)
        self.width = int(width)
        self.data = data
        self.data.flags.writeable = False
        self.value_range = value_range

    @property
    def shape(self):
        return (self.channels, self.height, self.width)

    @property
    def D(self):
        return self.channels * self.height * self.width

    def as_array(self):
        """View as a (C, H, W) ndarray."""
        return self.data.reshape(self.shape)

    @classmethod
    def from_array(cls, arr, value_range="unit"):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError("expected a (C, H, W) array")
        c, h, w = arr.shape
        return cls(c, h, w, arr, value_range=value_range)

    @classmethod
    def from_vector(cls, vec, shape=None, value_range="unbounded"):
        """Wrap a flat vector; defaults to a 1 x 1 x D image."""
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if shape is None:
            shape = (1, 1, vec.size)
        c, h, w = shape
        return cls(c, h, w, vec, value_range=value_range)

    def clipped(self):
        """Clamp to the declared range (no-op for unbounded)."""
        if self.value_range not in _RANGE_BOUNDS:
            return self
        lo, hi = _RANGE_BOUNDS[self.value_range]
        return ImageTensor(
            *self.shape, np.clip(self.data, lo, hi), value_range=self.value_range
        )

    def to_unit(self):
        """Rescale a byte-range image to the unit range (no-op if already unit)."""
        if self.value_range == "unit":
            return self
        if self.value_range != "byte":
            raise ValueError(f"cannot normalize {self.value_range!r} data")
        return ImageTensor(*self.shape, self.data / 255.0, value_range="unit")

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.value_range == other.value_range
            and np.array_equal(self.data, other.data)
        )


class Message:
    """A K-bit message with entries in {-1, +1}."""

    def __init__(self, bits):
        bits = np.asarray(bits, dtype=np.int64).ravel()
        if bits.size < 1:
            raise ValueError("message must have at least one bit")
        if not np.all(np.abs(bits) == 1):
            raise ValueError("message bits must be -1 or +1")
        self.bits = bits
        self.bits.flags.writeable = False

    @property
    def K(self):
        return self.bits.size

    @classmethod
    def from_string(cls, s):
        """Parse '+'/'-' or '1'/'0' strings (1 maps to +1, 0 to -1)."""
        table = {"+": 1, "1": 1, "-": -1, "0": -1}
        try:
            bits = [table[ch] for ch in s.strip()]
        except KeyError as exc:
            raise ValueError(f"bad message character {exc.args[0]!r}") from exc
        return cls(bits)

    def to_string(self):
        return "".join("+" if b > 0 else "-" for b in self.bits)

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __neg__(self):
        return Message(-self.bits)

    def __repr__(self):
        return f"Message({self.to_string()!r})"


def flatten(img):
    """Flatten to a length-D vector in (c, h, w) row-major order."""
    return np.array(img.data, dtype=np.float64)


def unflatten(vec, shape, value_range="unbounded"):
    """Inverse of flatten for the given (C, H, W) shape."""
    c, h, w = shape
    vec = np.asarray(vec, dtype=np.float64).ravel()
    if vec.size != c * h * w:
        raise ValueError(f"vector length {vec.size} != {c}*{h}*{w}")
    return ImageTensor(c, h, w, vec, value_range=value_range)


def psnr(x, y, max_value):
    """PSNR in dB: 10*log10(max_value^2 / MSE).  Returns inf when x == y."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    mse = np.mean((x.data - y.data) ** 2)
    if mse == 0.0:
        return np.inf
    return 10.0 * np.log10(max_value**2 / mse)


def sample_uniform_message(K, rng):
    """K i.i.d. uniform bits on {-1, +1}."""
    if K < 1:
        raise ValueError("K must be >= 1")
    bits = rng.generator.integers(0, 2, size=K) * 2 - 1
    return Message(bits)


# ---------------------------------------------------------------------------
# File I/O: PNG / PPM (byte range) and the ADDT raw tensor format.
# ---------------------------------------------------------------------------


def write_raw_tensor(path, img):
    """ADDT format: magic, u32 C/H/W, u8 range code, little-endian f32 data."""
    with open(path, "wb") as fh:
        fh.write(ADDT_MAGIC)
        fh.write(struct.pack("<IIIB", *img.shape, _RANGE_CODE[img.value_range]))
        fh.write(img.data.astype("<f4").tobytes())


def read_raw_tensor(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != ADDT_MAGIC:
            raise ValueError(f"{path}: not an ADDT tensor file")
        c, h, w, code = struct.unpack("<IIIB", fh.read(13))
        data = np.frombuffer(fh.read(4 * c * h * w), dtype="<f4")
        if data.size != c * h * w:
            raise ValueError(f"{path}: truncated tensor data")
    return ImageTensor(c, h, w, data.astype(np.float64), _CODE_RANGE[code])


def _to_byte_array(img):
    """Quantize to uint8, scaling unit-range data up to 0..255."""
    arr = img.as_array()
    if img.value_range == "unit":
        arr = arr * 255.0
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def write_ppm(path, img):
    """Binary PPM (P6).  Requires a 3-channel image."""
    if img.channels != 3:
        raise ValueError("PPM requires 3 channels")
    arr = _to_byte_array(img)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode())
        fh.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    arr = np.frombuffer(raw[pos : pos + 3 * w * h], dtype=np.uint8)
    arr = arr.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64)
    return ImageTensor(3, h, w, arr, value_range="byte")


def write_png(path, img):
    from PIL import Image

    arr = _to_byte_array(img)
    if img.channels == 1:
        pil = Image.fromarray(arr[0], mode="L")
    elif img.channels == 3:
        pil = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    else:
        raise ValueError("PNG output supports 1 or 3 channels")
    pil.save(path, format="PNG")


def read_png(path):
    from PIL import Image

    with Image.open(path) as pil:
        pil = pil.convert("RGB") if pil.mode not in ("L", "RGB") else pil
        arr = np.asarray(pil, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return ImageTensor(*arr.shape, arr, value_range="byte")


def read_image(path):
    """Dispatch on file extension: .png, .ppm, or .addt raw tensor."""
    s = str(path).lower()
    if s.endswith(".png"):
        return read_png(path)
    if s.endswith(".ppm"):
        return read_ppm(path)
    if s.endswith(".addt"):
        return read_raw_tensor(path)
    raise ValueError(f"unsupported image format: {path}")


def write_image(path, img, clip=True):
    """Write by extension.  Displayable formats are clipped; ADDT is not."""
    s = str(path).lower()
    if s.endswith(".addt"):
        write_raw_tensor(path, img)
        return
    out = img.clipped() if clip else img
    if s.endswith(".png"):
        write_png(path, out)
    elif s.endswith(".ppm"):
        write_ppm(path, out)
    else:
        raise ValueError(f"unsupported image format: {path}")


def value_range_max(value_range):
    """Peak value used for PSNR: 1.0 for unit, 255.0 for byte."""
    if value_range in _RANGE_BOUNDS:
        return _RANGE_BOUNDS[value_range][1]
    return 1.0
