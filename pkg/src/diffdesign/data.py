"""Training data: Gaussian mixture sampling, IDX image files, preprocessing.

The image pipeline mirrors the grayscale treatment used for the diffusion
corpora: perturb with small Gaussian noise, smooth with a Gaussian filter,
clip to [0, 1], rescale to [-1, 1], and bilinearly resize to the model
resolution. All arrays are float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

IDX_MAGIC_UBYTE = 0x00000803   # canonical IDX3 image magic (unsigned byte)
IDX_MAGIC_FLOAT64 = 0x00000E03


@dataclass
class GmmSpec:
    """Two-component 1D Gaussian mixture used by the scalar demos."""
    weights: tuple = (0.5, 0.5)
    means: tuple = (-2.5, 2.5)
    stds: tuple = (0.5, 0.5)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.min() <= 0 or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.asarray(self.stds, dtype=np.float64).min() <= 0:
            raise ValueError("mixture stds must be positive")


def gmm_sample(spec: GmmSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n samples, shape (n,)."""
    w = np.asarray(spec.weights)
    comp = rng.choice(len(w), size=n, p=w)
    mu = np.asarray(spec.means)[comp]
    sd = np.asarray(spec.stds)[comp]
    return mu + sd * rng.standard_normal(n)


def gmm_pdf(spec: GmmSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for w, mu, sd in zip(spec.weights, spec.means, spec.stds):
        out += w * np.exp(-0.5 * ((x - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
    return out


# ------------------------------------------------------------------ IDX I/O


def load_idx_images(path) -> np.ndarray:
    """Read an IDX3 image file; returns (N, H, W) float64.

    Unsigned-byte payloads (magic 0x00000803) are scaled to [0, 1]; float64
    payloads (magic 0x00000E03) are returned as stored. Dimensions are
    big-endian u32 per the format.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated IDX header")
    magic, n, h, w = struct.unpack(">iiii", raw[:16])
    if magic == IDX_MAGIC_UBYTE:
        dtype, item = np.uint8, 1
    elif magic == IDX_MAGIC_FLOAT64:
        dtype, item = ">f8", 8
    else:
        raise ValueError(
            f"{path}: bad IDX magic 0x{magic:08X}, expected 0x{IDX_MAGIC_UBYTE:08X} "
            f"(ubyte) or 0x{IDX_MAGIC_FLOAT64:08X} (float64)")
    need = 16 + n * h * w * item
    if len(raw) < need:
        raise ValueError(f"{path}: payload shorter than header promises "
                         f"({len(raw)} < {need} bytes)")
    data = np.frombuffer(raw[16:need], dtype=dtype).reshape(n, h, w)
    if magic == IDX_MAGIC_UBYTE:
        return data.astype(np.float64) / 255.0
    return data.astype(np.float64)


def save_idx_images(path, images: np.ndarray) -> None:
    """Write (N, H, W) images as IDX3 plus a sidecar text manifest.

    uint8 arrays are stored byte-exact under the ubyte magic; everything else
    is stored as big-endian float64 so a write-then-read round trip is
    bitwise exact.
    """
    images = np.ascontiguousarray(images)
    if images.ndim != 3:
        raise ValueError("expected (N, H, W) images")
    n, h, w = images.shape
    path = Path(path)
    if images.dtype == np.uint8:
        magic, payload = IDX_MAGIC_UBYTE, images.tobytes()
    else:
        magic = IDX_MAGIC_FLOAT64
        payload = images.astype(np.float64).astype(">f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", magic, n, h, w))
        fh.write(payload)
    manifest = (f"count={n}\nheight={h}\nwidth={w}\n"
                f"magic=0x{magic:08X}\nmin={images.min()}\nmax={images.max()}\n")
    path.with_suffix(path.suffix + ".manifest").write_text(manifest)


# ------------------------------------------------------------- preprocessing


def grayscale_preprocess(images: np.ndarray, noise_std: float = 0.01,
                         blur_std: float = 1.2, rng: np.random.Generator | None = None,
                         ) -> np.ndarray:
    """Noise-perturb, blur, clip to [0,1], rescale to [-1,1].

    The blur truncates at 4 standard deviations and uses reflective boundary
    handling. Input images are expected in [0, 1].
    """
    images = np.asarray(images, dtype=np.float64)
    if rng is not None and noise_std > 0:
        images = images + noise_std * rng.standard_normal(images.shape)
    if blur_std > 0:
        images = np.stack([gaussian_filter(im, blur_std, truncate=4.0, mode="reflect")
                           for im in images])
    images = np.clip(images, 0.0, 1.0)
    return 2.0 * images - 1.0


def bilinear_resize(images: np.ndarray, out_hw: tuple) -> np.ndarray:
    """Align-corners bilinear resize of (..., H, W) images.

    Linear ramps stay linear and constants stay constant, so upsampling a
    known profile is exact.
    """
    images = np.asarray(images, dtype=np.float64)
    h, w = images.shape[-2:]
    ho, wo = out_hw
    ys = np.linspace(0.0, h - 1.0, ho) if ho > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, wo) if wo > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2) if h > 1 else np.zeros(ho, int)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2) if w > 1 else np.zeros(wo, int)
    fy = (ys - y0) if h > 1 else np.zeros(ho)
    fx = (xs - x0) if w > 1 else np.zeros(wo)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    a = images[..., y0[:, None], x0[None, :]]
    b = images[..., y0[:, None], x1[None, :]]
    c = images[..., y1[:, None], x0[None, :]]
    d = images[..., y1[:, None], x1[None, :]]
    fy = fy[:, None]
    fx = fx[None, :]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


# -------------------------------------------------------------- toy corpus


def synth_toy_dataset(n: int, hw: int = 16, rng: np.random.Generator | None = None,
                      kinds=("bars", "crosses", "rings")) -> np.ndarray:
    """Binary structural motifs (bars, crosses, rings) in [0, 1], shape (n, hw, hw).

    Small and regular enough that a desk-scale diffusion model learns them in
    a few hundred steps, while still giving nontrivial homogenized stiffness.
    """
    rng = rng or np.random.default_rng(0)
    yy, xx = np.mgrid[0:hw, 0:hw]
    out = np.zeros((n, hw, hw))
    for i in range(n):
        kind = kinds[rng.integers(len(kinds))]
        im = np.zeros((hw, hw))
        if kind == "bars":
            horizontal = rng.integers(2) == 0
            k = rng.integers(2, 4)  # number of bars
            width = rng.integers(2, 4)
            gap = hw // k
            off = rng.integers(gap)
            for j in range(k):
                lo = (off + j * gap) % hw
                sl = (slice(lo, min(lo + width, hw)))
                if horizontal:
                    im[sl, :] = 1.0
                else:
                    im[:, sl] = 1.0
        elif kind == "crosses":
            cy, cx = rng.integers(hw // 4, 3 * hw // 4, size=2)
            width = rng.integers(1, 3)
            im[max(cy - width, 0):cy + width + 1, :] = 1.0
            im[:, max(cx - width, 0):cx + width + 1] = 1.0
        else:  # rings
            cy, cx = rng.integers(hw // 3, 2 * hw // 3, size=2)
            r = rng.integers(hw // 4, hw // 2)
            thick = rng.integers(1, 3)
            d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            im[(d >= r - thick) & (d <= r)] = 1.0
        out[i] = im
    return out
