"""Featurizers and a small trainable encoder producing unit-norm embeddings.

The encoder is a single tanh hidden layer followed by a linear map and L2
normalization. It is deliberately tiny: big enough to have a nontrivial
backward pass through the normalization, small enough that gradient checks
run in milliseconds. All math is double precision.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import EmbeddingVector, ValidationError

CHECKPOINT_MAGIC = b"IDMRENC1"

GRID = 4  # featurize_image pools over a GRID x GRID layout


class DegenerateEmbeddingError(ValueError):
    """Raised when the pre-normalization output has (near-)zero norm."""


@dataclass
class EncoderParams:
    """Weights for the two-layer encoder. Shapes: W1 (hidden, in), W2 (out, hidden)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        h, d = self.W1.shape
        e, h2 = self.W2.shape
        if self.b1.shape != (h,) or self.b2.shape != (e,) or h2 != h:
            raise ValidationError("inconsistent parameter shapes")
        for block in (self.W1, self.b1, self.W2, self.b2):
            if not np.all(np.isfinite(block)):
                raise ValidationError("non-finite parameter entries")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.W2.shape[0]

    def blocks(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.W1.copy(), self.b1.copy(),
                             self.W2.copy(), self.b2.copy())


@dataclass
class ParamGrads:
    """Gradient blocks matching EncoderParams."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "ParamGrads":
        return cls(np.zeros_like(params.W1), np.zeros_like(params.b1),
                   np.zeros_like(params.W2), np.zeros_like(params.b2))

    def add_(self, other: "ParamGrads") -> None:
        self.W1 += other.W1
        self.b1 += other.b1
        self.W2 += other.W2
        self.b2 += other.b2

    def blocks(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(b * b)) for b in self.blocks())))


@dataclass
class ForwardCache:
    """Intermediate activations needed for an exact backward pass."""

    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    h_raw: np.ndarray
    norm: float


def init_params(input_dim: int, hidden_dim: int, embed_dim: int,
                seed: int = 0) -> EncoderParams:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    rng = np.random.default_rng(seed)
    s1 = 1.0 / np.sqrt(input_dim)
    s2 = 1.0 / np.sqrt(hidden_dim)
    return EncoderParams(
        rng.uniform(-s1, s1, size=(hidden_dim, input_dim)),
        rng.uniform(-s1, s1, size=hidden_dim),
        rng.uniform(-s2, s2, size=(embed_dim, hidden_dim)),
        rng.uniform(-s2, s2, size=embed_dim),
    )


def featurize_image(source, area_ratio: Optional[float] = None) -> np.ndarray:
    """Turn a raster patch or a stored feature record into a feature vector.

    Raster path: per-cell mean channel intensity over a 4x4 grid (3 channels,
    grayscale replicated) plus the log area ratio, 49 reals. Records that
    already carry a feature vector pass through unchanged.
    """
    if isinstance(source, dict) and "features" in source:
        return np.asarray(source["features"], dtype=np.float64)
    if isinstance(source, np.ndarray):
        img = np.asarray(source, dtype=np.float64)
        if img.size == 0:
            raise ValidationError("empty raster")
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        if img.ndim != 3:
            raise ValidationError(f"unsupported raster shape {img.shape}")
        h, w, c = img.shape
        if c == 1:
            img = np.repeat(img, 3, axis=2)
        elif c > 3:
            img = img[:, :, :3]
        rows = np.linspace(0, h, GRID + 1).round().astype(int)
        cols = np.linspace(0, w, GRID + 1).round().astype(int)
        cells = []
        for i in range(GRID):
            for j in range(GRID):
                r0, r1 = rows[i], max(rows[i + 1], rows[i] + 1)
                c0, c1 = cols[j], max(cols[j + 1], cols[j] + 1)
                cell = img[min(r0, h - 1):min(r1, h), min(c0, w - 1):min(c1, w)]
                cells.append(cell.reshape(-1, img.shape[2]).mean(axis=0))
        feat = np.concatenate(cells)
        ar = area_ratio if area_ratio is not None else 1.0
        return np.append(feat, np.log(max(ar, 1e-12)))
    raise ValidationError(f"cannot featurize {type(source).__name__}")


def featurize_text(text: str, dim: int = 32, seed: int = 0) -> np.ndarray:
    """Signed feature hashing of whitespace tokens, L2-normalized.

    Empty text maps to the all-zeros vector. Hashing uses blake2b keyed by
    the seed so results are stable across processes.
    """
    out = np.zeros(dim, dtype=np.float64)
    key = seed.to_bytes(8, "little", signed=True)
    for token in text.split():
        digest = hashlib.blake2b(token.encode("utf-8"), key=key,
                                 digest_size=8).digest()
        value = int.from_bytes(digest, "little")
        bucket = value % dim
        sign = 1.0 if (value >> 32) & 1 else -1.0
        out[bucket] += sign
    norm = np.linalg.norm(out)
    if norm > 0:
        out /= norm
    return out


def encode(params: EncoderParams, feature: np.ndarray,
           want_cache: bool = False):
    """Forward pass: tanh hidden layer, linear output, L2 normalization."""
    x = np.asarray(feature, dtype=np.float64)
    if x.shape != (params.input_dim,):
        raise ValidationError(
            f"feature dim {x.shape} != encoder input {params.input_dim}")
    z1 = params.W1 @ x + params.b1
    a1 = np.tanh(z1)
    h_raw = params.W2 @ a1 + params.b2
    norm = float(np.linalg.norm(h_raw))
    if norm < 1e-12:
        raise DegenerateEmbeddingError("pre-normalization output has zero norm")
    emb = EmbeddingVector(h_raw / norm, normalized=True)
    if want_cache:
        return emb, ForwardCache(x, z1, a1, h_raw, norm)
    return emb, None


def encode_multimodal(params: EncoderParams, image_feat: np.ndarray,
                      text_feat: np.ndarray,
                      want_cache: bool = False):
    """Fused encoding of concatenated image and text features.

    Image-only candidates pass a zero text slot; the fixed candidate
    instruction carries no per-item information, so it is folded away.
    """
    fused = np.concatenate([np.asarray(image_feat, dtype=np.float64),
                            np.asarray(text_feat, dtype=np.float64)])
    return encode(params, fused, want_cache=want_cache)


def backprop_embedding_grad(params: EncoderParams, cache: ForwardCache,
                            g: np.ndarray) -> ParamGrads:
    """Exact parameter gradients given dL/d(normalized output).

    Includes the normalization Jacobian (I - hh^T)/|h_raw|.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (params.embed_dim,) or cache.x.shape != (params.input_dim,):
        raise ValidationError("gradient/cache shape mismatch")
    h_hat = cache.h_raw / cache.norm
    d_raw = (g - h_hat * float(h_hat @ g)) / cache.norm
    dW2 = np.outer(d_raw, cache.a1)
    db2 = d_raw
    da1 = params.W2.T @ d_raw
    dz1 = da1 * (1.0 - cache.a1 ** 2)
    dW1 = np.outer(dz1, cache.x)
    db1 = dz1
    return ParamGrads(dW1, db1, dW2, db2)


def save_checkpoint(params: EncoderParams, path) -> None:
    """Write magic, dims, then each block as row-major float64 little-endian."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", params.input_dim, params.hidden_dim,
                             params.embed_dim))
        for block in params.blocks():
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_checkpoint(path) -> EncoderParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("bad checkpoint magic")
    d_in, d_hidden, d_embed = struct.unpack_from("<III", data, 8)
    offset = 8 + 12
    shapes = [(d_hidden, d_in), (d_hidden,), (d_embed, d_hidden), (d_embed,)]
    blocks = []
    for shape in shapes:
        count = int(np.prod(shape))
        end = offset + count * 8
        if end > len(data):
            raise ValueError("truncated checkpoint")
        blocks.append(np.frombuffer(data[offset:end], dtype="<f8").reshape(shape))
        offset = end
    if offset != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return EncoderParams(*blocks)
