"""Noise-prediction networks built on the autodiff tape.

Two families: a small fully connected net for scalar data and a compact
U-Net for images. Both take the timestep through sinusoidal embeddings;
the MLP adds per-layer linear projections of the raw embedding, the U-Net
pushes the embedding through a two-layer GELU net and injects it into every
residual block. Output heads are zero-initialized so training starts from
the identity denoiser.

Parameters live in flat name->array dicts; names ending in "/w" are weight
matrices (the only entries AdamW decays).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Value

CHECKPOINT_MAGIC = b"DNCK"
CHECKPOINT_VERSION = 1


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """(B, dim) positional embedding: frequencies 10000^(-2i/dim), sin block
    then cos block; t = 0 maps to [0,...,0,1,...,1]."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------------- MLP


@dataclass
class MlpArch:
    in_dim: int = 1
    hidden: int = 64
    time_dim: int = 64

    kind = "mlp"


def init_mlp(arch: MlpArch, rng: np.random.Generator) -> dict:
    def w(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    h, td = arch.hidden, arch.time_dim
    return {
        "fc1/w": w(arch.in_dim, h), "fc1/b": np.zeros(h),
        "te1/w": w(td, h),
        "fc2/w": w(h, h), "fc2/b": np.zeros(h),
        "te2/w": w(td, h),
        "fc3/w": np.zeros((h, arch.in_dim)), "fc3/b": np.zeros(arch.in_dim),
    }


def apply_mlp(arch: MlpArch, p: dict, x: Value, t) -> Value:
    emb = ad.constant(sinusoidal_embedding(t, arch.time_dim))
    h = ad.swish(x @ p["fc1/w"] + emb @ p["te1/w"] + p["fc1/b"])
    h = ad.swish(h @ p["fc2/w"] + emb @ p["te2/w"] + p["fc2/b"])
    return h @ p["fc3/w"] + p["fc3/b"]


# -------------------------------------------------------------------- U-Net


@dataclass
class UnetArch:
    image_hw: int = 16
    in_channels: int = 1
    base: int = 8
    mults: tuple = (1, 2, 4)
    blocks: int = 1            # residual blocks per level
    attn_levels: tuple = (1,)  # level indices that get self-attention
    heads: int = 1
    groups: int = 8            # group-norm group cap
    time_dim: int = 32
    emb_hidden: int = 64

    kind = "unet"

    @property
    def channels(self):
        return tuple(self.base * m for m in self.mults)


def _conv_w(rng, c_out, c_in, k):
    return rng.standard_normal((c_out, c_in, k, k)) / np.sqrt(c_in * k * k)


def _lin_w(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)


def init_unet(arch: UnetArch, rng: np.random.Generator) -> dict:
    p = {}
    eh = arch.emb_hidden

    def resblock(prefix, c_in, c_out):
        p[f"{prefix}/gn1/g"] = np.ones(c_in)
        p[f"{prefix}/gn1/b"] = np.zeros(c_in)
        p[f"{prefix}/conv1/w"] = _conv_w(rng, c_out, c_in, 3)
        p[f"{prefix}/conv1/b"] = np.zeros(c_out)
        p[f"{prefix}/emb/w"] = _lin_w(rng, eh, c_out)
        p[f"{prefix}/emb/b"] = np.zeros(c_out)
        p[f"{prefix}/gn2/g"] = np.ones(c_out)
        p[f"{prefix}/gn2/b"] = np.zeros(c_out)
        p[f"{prefix}/conv2/w"] = _conv_w(rng, c_out, c_out, 3)
        p[f"{prefix}/conv2/b"] = np.zeros(c_out)
        if c_in != c_out:
            p[f"{prefix}/skip/w"] = _conv_w(rng, c_out, c_in, 1)

    def attn(prefix, c):
        p[f"{prefix}/gn/g"] = np.ones(c)
        p[f"{prefix}/gn/b"] = np.zeros(c)
        for nm in ("q", "k", "v", "o"):
            p[f"{prefix}/{nm}/w"] = _lin_w(rng, c, c).T  # (C_out, C_in) for C@x

    ch = arch.channels
    p["temb/l1/w"] = _lin_w(rng, arch.time_dim, eh)
    p["temb/l1/b"] = np.zeros(eh)
    p["temb/l2/w"] = _lin_w(rng, eh, eh)
    p["temb/l2/b"] = np.zeros(eh)
    p["stem/w"] = _conv_w(rng, ch[0], arch.in_channels, 3)
    p["stem/b"] = np.zeros(ch[0])
    for lvl, c in enumerate(ch):
        # stem and the stride-2 downsample convs already set each level's width
        for blk in range(arch.blocks):
            resblock(f"d{lvl}/r{blk}", c, c)
        if lvl in arch.attn_levels:
            attn(f"d{lvl}/attn", c)
        if lvl < len(ch) - 1:
            p[f"d{lvl}/down/w"] = _conv_w(rng, ch[lvl + 1], c, 3)
            p[f"d{lvl}/down/b"] = np.zeros(ch[lvl + 1])
    resblock("mid/r0", ch[-1], ch[-1])
    attn("mid/attn", ch[-1])
    resblock("mid/r1", ch[-1], ch[-1])
    for lvl in range(len(ch) - 1, -1, -1):
        c = ch[lvl]
        for blk in range(arch.blocks):
            resblock(f"u{lvl}/r{blk}", 2 * c if blk == 0 else c, c)
        if lvl in arch.attn_levels:
            attn(f"u{lvl}/attn", c)
        if lvl > 0:
            p[f"u{lvl}/up/w"] = _conv_w(rng, ch[lvl - 1], c, 3)
            p[f"u{lvl}/up/b"] = np.zeros(ch[lvl - 1])
    p["head/gn/g"] = np.ones(ch[0])
    p["head/gn/b"] = np.zeros(ch[0])
    p["head/w"] = np.zeros((arch.in_channels, ch[0], 3, 3))  # zero-init output
    p["head/b"] = np.zeros(arch.in_channels)
    return p


def group_norm(x: Value, gamma: Value, beta: Value, groups: int, eps: float = 1e-5) -> Value:
    b, c, h, w = x.data.shape
    g = min(groups, c)
    if c % g:
        raise ValueError(f"channels {c} not divisible by {g} groups")
    xr = ad.reshape(x, (b, g, (c // g) * h * w))
    mu = ad.vmean(xr, axis=2, keepdims=True)
    d = xr - mu
    var = ad.vmean(d * d, axis=2, keepdims=True)
    xn = d * (var + eps) ** -0.5
    xn = ad.reshape(xn, (b, c, h, w))
    return xn * ad.reshape(gamma, (1, c, 1, 1)) + ad.reshape(beta, (1, c, 1, 1))


def _resblock(p, prefix, x: Value, emb: Value, groups: int) -> Value:
    c_in = x.data.shape[1]
    h = group_norm(x, p[f"{prefix}/gn1/g"], p[f"{prefix}/gn1/b"], groups)
    h = ad.conv2d(ad.swish(h), p[f"{prefix}/conv1/w"])
    h = h + ad.reshape(p[f"{prefix}/conv1/b"], (1, -1, 1, 1))
    e = emb @ p[f"{prefix}/emb/w"] + p[f"{prefix}/emb/b"]
    h = h + ad.reshape(e, e.data.shape + (1, 1))
    h = group_norm(h, p[f"{prefix}/gn2/g"], p[f"{prefix}/gn2/b"], groups)
    h = ad.conv2d(ad.swish(h), p[f"{prefix}/conv2/w"])
    h = h + ad.reshape(p[f"{prefix}/conv2/b"], (1, -1, 1, 1))
    skip = x
    if f"{prefix}/skip/w" in p:
        skip = ad.conv2d(x, p[f"{prefix}/skip/w"])
    elif c_in != h.data.shape[1]:
        raise ValueError(f"{prefix}: channel mismatch without a skip projection")
    return h + skip


def _attention(p, prefix, x: Value, groups: int, heads: int) -> Value:
    b, c, hh, ww = x.data.shape
    n = hh * ww
    ch = c // heads
    xn = group_norm(x, p[f"{prefix}/gn/g"], p[f"{prefix}/gn/b"], groups)
    flat = ad.reshape(xn, (b, c, n))

    def split(v):
        return ad.reshape(v, (b, heads, ch, n))

    q = split(p[f"{prefix}/q/w"] @ flat)
    k = split(p[f"{prefix}/k/w"] @ flat)
    v = split(p[f"{prefix}/v/w"] @ flat)
    scores = ad.transpose(q, (0, 1, 3, 2)) @ k * (1.0 / np.sqrt(ch))
    att = ad.softmax(scores, axis=-1)
    out = v @ ad.transpose(att, (0, 1, 3, 2))
    out = p[f"{prefix}/o/w"] @ ad.reshape(out, (b, c, n))
    return ad.reshape(out, (b, c, hh, ww)) + x


def apply_unet(arch: UnetArch, p: dict, x: Value, t) -> Value:
    emb = ad.constant(sinusoidal_embedding(t, arch.time_dim))
    emb = ad.gelu(emb @ p["temb/l1/w"] + p["temb/l1/b"])
    emb = emb @ p["temb/l2/w"] + p["temb/l2/b"]
    ch = arch.channels
    h = ad.conv2d(x, p["stem/w"]) + ad.reshape(p["stem/b"], (1, -1, 1, 1))
    skips = []
    for lvl in range(len(ch)):
        for blk in range(arch.blocks):
            h = _resblock(p, f"d{lvl}/r{blk}", h, emb, arch.groups)
        if lvl in arch.attn_levels:
            h = _attention(p, f"d{lvl}/attn", h, arch.groups, arch.heads)
        skips.append(h)
        if lvl < len(ch) - 1:
            h = ad.conv2d(h, p[f"d{lvl}/down/w"], stride=2)
            h = h + ad.reshape(p[f"d{lvl}/down/b"], (1, -1, 1, 1))
    h = _resblock(p, "mid/r0", h, emb, arch.groups)
    h = _attention(p, "mid/attn", h, arch.groups, arch.heads)
    h = _resblock(p, "mid/r1", h, emb, arch.groups)
    for lvl in range(len(ch) - 1, -1, -1):
        h = ad.concat([h, skips[lvl]], axis=1)
        for blk in range(arch.blocks):
            h = _resblock(p, f"u{lvl}/r{blk}", h, emb, arch.groups)
        if lvl in arch.attn_levels:
            h = _attention(p, f"u{lvl}/attn", h, arch.groups, arch.heads)
        if lvl > 0:
            h = ad.conv2d(ad.upsample2x(h), p[f"u{lvl}/up/w"])
            h = h + ad.reshape(p[f"u{lvl}/up/b"], (1, -1, 1, 1))
    h = group_norm(h, p["head/gn/g"], p["head/gn/b"], arch.groups)
    h = ad.conv2d(ad.swish(h), p["head/w"]) + ad.reshape(p["head/b"], (1, -1, 1, 1))
    return h


# ---------------------------------------------------------------- dispatch


def init_params(arch, rng: np.random.Generator) -> dict:
    if arch.kind == "mlp":
        return init_mlp(arch, rng)
    return init_unet(arch, rng)


def apply_denoiser(arch, params: dict, x: Value, t) -> Value:
    if arch.kind == "mlp":
        return apply_mlp(arch, params, x, t)
    return apply_unet(arch, params, x, t)


def make_eps_fn(arch, params: dict):
    """Array-in, array-out denoiser with frozen parameters."""
    pv = {k: ad.constant(v) for k, v in params.items()}

    def fn(x, t):
        return apply_denoiser(arch, pv, ad.constant(x), t).data

    return fn


def make_eps_tape_fn(arch, params: dict):
    """Value-in, Value-out denoiser; parameters enter as constants."""
    pv = {k: ad.constant(v) for k, v in params.items()}

    def fn(x: Value, t) -> Value:
        return apply_denoiser(arch, pv, x, t)

    return fn


def wrap_leaves(params: dict) -> dict:
    return {k: ad.leaf(v) for k, v in params.items()}


# -------------------------------------------------------------- checkpoints


def _arch_descriptor(arch) -> dict:
    d = {"kind": arch.kind}
    for k, v in asdict(arch).items():
        d[k] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
    return d


def arch_from_descriptor(d: dict):
    kind = d["kind"]

    def tup(s):
        return tuple(int(x) for x in s.split(",")) if s else ()

    if kind == "mlp":
        return MlpArch(in_dim=int(d["in_dim"]), hidden=int(d["hidden"]),
                       time_dim=int(d["time_dim"]))
    if kind == "unet":
        return UnetArch(image_hw=int(d["image_hw"]), in_channels=int(d["in_channels"]),
                        base=int(d["base"]), mults=tup(d["mults"]),
                        blocks=int(d["blocks"]), attn_levels=tup(d["attn_levels"]),
                        heads=int(d["heads"]), groups=int(d["groups"]),
                        time_dim=int(d["time_dim"]), emb_hidden=int(d["emb_hidden"]))
    raise ValueError(f"unknown architecture kind {kind!r}")


def save_checkpoint(path, arch, params: dict) -> None:
    """Self-describing binary: magic, version, text descriptor, named arrays."""
    desc = "\n".join(f"{k}={v}" for k, v in _arch_descriptor(arch).items()).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            nb = name.encode()
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (arch, params); validates magic and version."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}, "
                         f"expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (dlen,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    desc = {}
    for line in raw[pos:pos + dlen].decode().splitlines():
        k, _, v = line.partition("=")
        desc[k] = v
    pos += dlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(raw, dtype="<f8", count=size,
                                     offset=pos).reshape(shape).copy()
        pos += 8 * size
    return arch_from_descriptor(desc), params
