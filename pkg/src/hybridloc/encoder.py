"""One-hidden-layer tanh encoders producing unit-norm embeddings.

Forward: ``z = normalize(W2 @ tanh(W1 @ x + b1) + b2)``. Gradients are
hand-derived; ``tests/test_encoder.py`` checks them against central
finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NORM_EPS = 1e-12


class DegenerateInput(ValueError):
    """Raised when normalizing a (near-)zero vector."""


class FormatError(ValueError):
    pass


@dataclass(eq=False)
class EncoderParams:
    W1: np.ndarray  # (hidden, input)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (D, hidden)
    b2: np.ndarray  # (D,)

    def __post_init__(self):
        h, _ = self.W1.shape
        d, h2 = self.W2.shape
        if self.b1.shape != (h,) or h2 != h or self.b2.shape != (d,):
            raise ValueError(
                f"inconsistent shapes W1{self.W1.shape} b1{self.b1.shape} W2{self.W2.shape} b2{self.b2.shape}"
            )

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def dim(self) -> int:
        return self.W2.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())


@dataclass(eq=False)
class GradientBundle:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    features: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


def init_params(input_dim: int, dim: int, hidden: int | None = None, seed: int = 0) -> EncoderParams:
    """Glorot-uniform weights, zero biases."""
    hidden = 2 * dim if hidden is None else hidden
    rng = np.random.default_rng([seed, 0x454E43])

    def glorot(fan_out, fan_in):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    return EncoderParams(glorot(hidden, input_dim), np.zeros(hidden), glorot(dim, hidden), np.zeros(dim))


def l2_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm <= NORM_EPS):
        raise DegenerateInput("cannot normalize a vector with norm <= 1e-12")
    return v / norm


def l2_normalize_vjp(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull back ``g`` through ``v -> v/|v|``: ``(I - u u^T) g / |v|``."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm <= NORM_EPS):
        raise DegenerateInput("cannot normalize a vector with norm <= 1e-12")
    u = v / norm
    return (g - u * np.sum(u * g, axis=-1, keepdims=True)) / norm


def l2_normalize_jvp(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    # The Jacobian is symmetric, so jvp and vjp coincide.
    return l2_normalize_vjp(v, t)


def _check_input(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"feature dim {x.shape[-1]} does not match encoder input {params.input_dim}")
    return x


def forward(params: EncoderParams, x: np.ndarray):
    """Batch forward; returns embeddings and the cache needed by :func:`backward`."""
    x = _check_input(params, x)
    h = np.tanh(x @ params.W1.T + params.b1)
    y = h @ params.W2.T + params.b2
    return l2_normalize(y), (x, h, y)


def backward(params: EncoderParams, cache, upstream: np.ndarray) -> GradientBundle:
    x, h, y = cache
    upstream = np.asarray(upstream, dtype=np.float64)
    gy = l2_normalize_vjp(y, upstream)
    gh = gy @ params.W2
    ga = gh * (1.0 - h * h)
    if x.ndim == 1:
        return GradientBundle(
            np.outer(ga, x), ga, np.outer(gy, h), gy, ga @ params.W1
        )
    return GradientBundle(ga.T @ x, ga.sum(0), gy.T @ h, gy.sum(0), ga @ params.W1)


def encode(params: EncoderParams, features: np.ndarray) -> np.ndarray:
    """Unit-norm embedding(s) of one feature vector or a batch of rows."""
    return forward(params, features)[0]


def encode_backward(params: EncoderParams, features: np.ndarray, upstream: np.ndarray) -> GradientBundle:
    """Gradients of ``sum(upstream * encode(params, features))``."""
    _, cache = forward(params, features)
    return backward(params, cache, upstream)


# ---------------------------------------------------------------------------
# GENC checkpoints: magic, u16 version, u16 reserved, u32 input, hidden, dim,
# then little-endian f32 W1, b1, W2, b2 (row-major).

GENC_MAGIC = b"GENC"
GENC_VERSION = 1
_GENC_HEADER = struct.Struct("<4sHHIII")


def params_to_bytes(params: EncoderParams) -> bytes:
    hidden, inp = params.W1.shape
    header = _GENC_HEADER.pack(GENC_MAGIC, GENC_VERSION, 0, inp, hidden, params.dim)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays().values())
    return header + body


def params_from_bytes(buf: bytes) -> EncoderParams:
    if len(buf) < _GENC_HEADER.size:
        raise FormatError(f"truncated GENC header at byte {len(buf)}")
    magic, version, _, inp, hidden, dim = _GENC_HEADER.unpack_from(buf)
    if magic != GENC_MAGIC:
        raise FormatError(f"bad GENC magic {magic!r} at byte 0")
    if version != GENC_VERSION:
        raise FormatError(f"unsupported GENC version {version} at byte 4")
    sizes = [hidden * inp, hidden, dim * hidden, dim]
    need = _GENC_HEADER.size + 4 * sum(sizes)
    if len(buf) != need:
        raise FormatError(f"GENC payload size mismatch: expected {need} bytes, got {len(buf)}")
    flat = np.frombuffer(buf, dtype="<f4", offset=_GENC_HEADER.size).astype(np.float64)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return EncoderParams(parts[0].reshape(hidden, inp), parts[1], parts[2].reshape(dim, hidden), parts[3])


def save_params(params: EncoderParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> EncoderParams:
    return params_from_bytes(Path(path).read_bytes())
