"""Layers, toy slice encoders, and the CLWT parameter checkpoint format."""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "Module",
    "LinearLayer",
    "LayerNorm",
    "GatedConvBlock",
    "SelfAttentionBlock",
    "EncoderConfig",
    "Encoder",
    "init_params",
    "encode_slice",
    "encode",
    "layer_norm",
    "glorot_uniform",
    "CheckpointError",
    "write_checkpoint",
    "read_checkpoint",
    "save_encoder",
    "load_encoder",
    "encoder_to_arrays",
    "encoder_from_arrays",
]


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Container with named, ordered parameters and child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class LinearLayer(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = Tensor(glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.scale = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.scale, self.shift, self._eps)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    return T.layer_norm(x, scale, shift, eps)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        fan_in, fan_out = kernel * kernel * cin, kernel * kernel * cout
        self.weight = Tensor(glorot_uniform(rng, (kernel, kernel, cin, cout), fan_in, fan_out), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self._stride = stride
        self._padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)


class GatedConvBlock(Module):
    """Residual gated convolution: ``x + main(n(x)) * sigmoid(gate(n(x)))``.

    ``n`` normalises each pixel over channels before the per-channel scale
    and shift; both convolutions are 3x3 with zero "same" padding.
    """

    def __init__(self, channels: int, rng: np.random.Generator, kernel: int = 3):
        self.norm = LayerNorm(channels)
        self.conv_main = Conv2d(channels, channels, kernel, rng, padding=kernel // 2)
        self.conv_gate = Conv2d(channels, channels, kernel, rng, padding=kernel // 2)

    def branch(self, x: Tensor) -> Tensor:
        y = self.norm(x)
        return T.mul(self.conv_main(y), T.sigmoid(self.conv_gate(y)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, self.branch(x))


class SelfAttentionBlock(Module):
    """Pre-norm single-head self-attention followed by a SiLU MLP."""

    def __init__(self, dim: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.norm1 = LayerNorm(dim)
        self.q = LinearLayer(dim, dim, rng)
        self.k = LinearLayer(dim, dim, rng)
        self.v = LinearLayer(dim, dim, rng)
        self.out = LinearLayer(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp1 = LinearLayer(dim, mlp_ratio * dim, rng)
        self.mlp2 = LinearLayer(mlp_ratio * dim, dim, rng)
        self._scale = 1.0 / np.sqrt(dim)

    def __call__(self, x: Tensor) -> Tensor:
        # x: (N, tokens, dim)
        y = self.norm1(x)
        q, k, v = self.q(y), self.k(y), self.v(y)
        scores = T.mul(T.bmm(q, T.transpose(k, (0, 2, 1))), self._scale)
        attn = T.softmax(scores, axis=-1)
        x = T.add(x, self.out(T.bmm(attn, v)))
        return T.add(x, self.mlp2(T.silu(self.mlp1(self.norm2(x)))))


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "gated-conv"
    input_size: tuple = (64, 64)
    embed_dim: int = 64
    depth: int = 2
    patch_size: int = 8
    channels: int = 32
    projection_hidden: int = 128
    stem_stride: int = 4
    mlp_ratio: int = 2
    pool: str = "avgmax"

    def validate(self) -> "EncoderConfig":
        problems = []
        if self.kind not in ("patch-attn", "gated-conv"):
            problems.append(f"kind must be 'patch-attn' or 'gated-conv', got {self.kind!r}")
        h, w = self.input_size
        if h < 1 or w < 1:
            problems.append(f"input_size must be positive, got {self.input_size}")
        if self.embed_dim < 8:
            problems.append(f"embed_dim must be >= 8, got {self.embed_dim}")
        for name in ("depth", "patch_size", "channels", "projection_hidden", "stem_stride", "mlp_ratio"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.kind == "patch-attn" and self.patch_size >= 1 and (h % self.patch_size or w % self.patch_size):
            problems.append(f"input_size {self.input_size} not divisible by patch_size {self.patch_size}")
        if self.kind == "gated-conv" and self.stem_stride >= 1 and (h % self.stem_stride or w % self.stem_stride):
            problems.append(f"input_size {self.input_size} not divisible by stem_stride {self.stem_stride}")
        if self.pool not in ("avg", "avgmax"):
            problems.append(f"pool must be 'avg' or 'avgmax', got {self.pool!r}")
        if problems:
            raise ValueError("invalid EncoderConfig: " + "; ".join(problems))
        return self


class Encoder(Module):
    """Slice encoder: backbone, pooled features, SiLU projection head to ``embed_dim``."""

    def __init__(self, config: EncoderConfig, seed: int):
        config.validate()
        self._config = config
        rng = np.random.default_rng(seed)
        h, w = config.input_size
        if config.kind == "patch-attn":
            p, d = config.patch_size, config.embed_dim
            self.patch_embed = LinearLayer(p * p, d, rng)
            n_tokens = (h // p) * (w // p)
            self.pos_embed = Tensor(glorot_uniform(rng, (n_tokens, d), n_tokens, d), requires_grad=True)
            self.blocks = [SelfAttentionBlock(d, rng, config.mlp_ratio) for _ in range(config.depth)]
            width = d
        else:
            c, s = config.channels, config.stem_stride
            self.stem = Conv2d(1, c, s, rng, stride=s)
            self.blocks = [GatedConvBlock(c, rng) for _ in range(config.depth)]
            width = c
        pooled = 2 * width if config.pool == "avgmax" else width
        self.norm = LayerNorm(pooled)
        self.proj1 = LinearLayer(pooled, config.projection_hidden, rng)
        self.proj2 = LinearLayer(config.projection_hidden, config.embed_dim, rng)

    @property
    def config(self) -> EncoderConfig:
        return self._config

    def _backbone(self, x: Tensor) -> Tensor:
        cfg = self._config
        n = x.shape[0]
        h, w = cfg.input_size
        if cfg.kind == "patch-attn":
            p = cfg.patch_size
            patches = T.reshape(T.transpose(T.reshape(x, (n, h // p, p, w // p, p)), (0, 1, 3, 2, 4)),
                                (n, (h // p) * (w // p), p * p))
            tok = self.patch_embed(patches)
            tok = T.add(tok, T.expand(self.pos_embed, tok.shape))
            for blk in self.blocks:
                tok = blk(tok)
            feats = tok  # (N, tokens, d)
            axis = 1
        else:
            # the activation keeps patch intensity visible to the per-pixel norms downstream
            feats = T.silu(self.stem(T.reshape(x, (n, h, w, 1))))
            for blk in self.blocks:
                feats = blk(feats)
            feats = T.reshape(feats, (n, -1, cfg.channels))
            axis = 1
        pooled = T.mean(feats, axis=axis)
        if cfg.pool == "avgmax":
            pooled = T.concat([pooled, T.amax(feats, axis=axis)], axis=-1)
        return pooled

    def __call__(self, x: Tensor) -> Tensor:
        """Embed a batch of slices (N, H, W) into (N, embed_dim)."""
        feats = self.norm(self._backbone(x))
        return self.proj2(T.silu(self.proj1(feats)))


def init_params(config: EncoderConfig, seed: int) -> Encoder:
    return Encoder(config, seed)


def _check_slices(enc: Encoder, x: np.ndarray | Tensor) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-2:] != tuple(enc.config.input_size):
        raise T.ShapeError(f"slice shape {x.shape[-2:]} does not match encoder input {tuple(enc.config.input_size)}")
    return x


def encode_slice(enc: Encoder, slice_: np.ndarray | Tensor) -> Tensor:
    x = _check_slices(enc, slice_)
    if x.ndim != 2:
        raise T.ShapeError(f"encode_slice expects (H, W), got {x.shape}")
    return T.reshape(enc(T.reshape(x, (1,) + x.shape)), (enc.config.embed_dim,))


def encode(enc: Encoder, slices: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode embedding of (N, H, W) slices; returns a float64 (N, d) array."""
    slices = np.asarray(slices, dtype=np.float64)
    _check_slices(enc, slices[:1])
    out = np.empty((len(slices), enc.config.embed_dim))
    with T.no_grad():
        for i in range(0, len(slices), batch_size):
            out[i:i + batch_size] = enc(Tensor(slices[i:i + batch_size])).data
    return out


# -- CLWT checkpoints --------------------------------------------------------

MAGIC = b"CLWT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path: str | Path, arrays: "OrderedDict[str, np.ndarray] | dict") -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def need(n: int) -> None:
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated, expected at least {pos + n} bytes, got {len(buf)}")

    need(8)
    version, count = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        need(4)
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(nlen)
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        need(4)
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(4 * ndim)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        need(nbytes)
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes after last entry")
    return out


_KINDS = ("patch-attn", "gated-conv")
_POOLS = ("avg", "avgmax")


def encoder_to_arrays(enc: Encoder, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
    cfg = asdict(enc.config)
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for key, value in cfg.items():
        if key == "kind":
            value = _KINDS.index(value)
        elif key == "pool":
            value = _POOLS.index(value)
        arrays[f"{prefix}config/{key}"] = np.asarray(value, dtype=np.float64).reshape(-1)
    for name, p in enc.named_parameters():
        arrays[f"{prefix}{name}"] = p.data
    return arrays


def encoder_from_arrays(arrays: dict, prefix: str = "") -> Encoder:
    kwargs = {}
    try:
        for f in fields(EncoderConfig):
            raw = arrays[f"{prefix}config/{f.name}"]
            if f.name == "kind":
                kwargs[f.name] = _KINDS[int(raw[0])]
            elif f.name == "pool":
                kwargs[f.name] = _POOLS[int(raw[0])]
            elif f.name == "input_size":
                kwargs[f.name] = tuple(int(v) for v in raw)
            else:
                kwargs[f.name] = int(raw[0])
        enc = Encoder(EncoderConfig(**kwargs), seed=0)
        for name, p in enc.named_parameters():
            value = arrays[f"{prefix}{name}"]
            if value.shape != p.shape:
                raise CheckpointError(f"parameter {name}: shape {value.shape} != {p.shape}")
            p.data = value
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing entry {exc.args[0]!r}") from None
    return enc


def save_encoder(enc: Encoder, path: str | Path) -> None:
    write_checkpoint(path, encoder_to_arrays(enc))


def load_encoder(path: str | Path) -> Encoder:
    return encoder_from_arrays(read_checkpoint(path))
