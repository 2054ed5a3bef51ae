"""Dense-network primitives with hand-written backprop.

Everything here is plain float64 numpy: small MLPs with SiLU hidden layers,
a shared per-point encoder with coordinate-wise max pooling, sinusoidal time
embeddings, Adam, and a little binary checkpoint format.  Gradients are
computed by explicit reverse passes against cached activations and are
validated against central finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"RFMP"
CHECKPOINT_VERSION = 1

ENCODER_HIDDEN = 64


class ShapeMismatch(ValueError):
    """An array fed to a network op has the wrong shape."""


class NumericalError(RuntimeError):
    """Base class for non-finite values surfacing in numerical code."""


class CheckpointError(ValueError):
    """Checkpoint bytes do not follow the expected layout."""


def silu(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


def silu_grad(z: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MLPSpec:
    """Layer widths, input first; hidden layers use SiLU, the output is linear.

    ``activation="linear"`` disables the hidden nonlinearity, which makes the
    whole network an affine map (used by tests with closed-form gradients).
    """

    widths: tuple[int, ...]
    activation: str = "silu"

    def __post_init__(self) -> None:
        if len(self.widths) < 3:
            raise ValueError("MLPSpec needs at least one hidden layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"non-positive width in {self.widths}")
        if self.activation not in ("silu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


class ParamStore:
    """Ordered name -> float64 array map with Adam moments and a step counter."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step: int = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        self.params[name] = np.asarray(value, dtype=float)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params.keys())

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        dup.params = {k: v.copy() for k, v in self.params.items()}
        dup.m = {k: v.copy() for k, v in self.m.items()}
        dup.v = {k: v.copy() for k, v in self.v.items()}
        dup.step = self.step
        return dup


def mlp_init(store: ParamStore, spec: MLPSpec, prefix: str, rng: np.random.Generator,
             zero_final: bool = False) -> None:
    """Register ``prefix.W{i}``/``prefix.b{i}`` with fan-in-scaled uniform init.

    ``zero_final`` zeroes the last layer so the network starts as the zero
    map regardless of its inputs.
    """
    for i in range(spec.n_layers):
        din, dout = spec.widths[i], spec.widths[i + 1]
        if zero_final and i == spec.n_layers - 1:
            w = np.zeros((din, dout))
            b = np.zeros(dout)
        else:
            bound = 1.0 / np.sqrt(din)
            w = rng.uniform(-bound, bound, size=(din, dout))
            b = rng.uniform(-bound, bound, size=dout)
        store.add(f"{prefix}.W{i}", w)
        store.add(f"{prefix}.b{i}", b)


def mlp_forward(store: ParamStore, spec: MLPSpec, prefix: str, x: np.ndarray):
    """Forward pass; returns (output (B, d_out), cache for the reverse pass)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.widths[0]:
        raise ShapeMismatch(f"{prefix}: expected (B, {spec.widths[0]}), got {x.shape}")
    hidden_act = silu if spec.activation == "silu" else (lambda z: z)
    acts = [x]
    pre = []
    a = x
    for i in range(spec.n_layers):
        z = a @ store[f"{prefix}.W{i}"] + store[f"{prefix}.b{i}"]
        pre.append(z)
        a = hidden_act(z) if i < spec.n_layers - 1 else z
        acts.append(a)
    return a, (acts, pre)


def mlp_backward(store: ParamStore, spec: MLPSpec, prefix: str, cache, dy: np.ndarray):
    """Reverse pass; returns (dx, grads keyed like the parameters)."""
    acts, pre = cache
    dy = np.asarray(dy, dtype=float)
    if dy.shape != acts[-1].shape:
        raise ShapeMismatch(f"{prefix}: upstream grad {dy.shape} vs output {acts[-1].shape}")
    grads: dict[str, np.ndarray] = {}
    dz = dy
    for i in range(spec.n_layers - 1, -1, -1):
        if i < spec.n_layers - 1 and spec.activation == "silu":
            dz = dz * silu_grad(pre[i])
        grads[f"{prefix}.W{i}"] = acts[i].T @ dz
        grads[f"{prefix}.b{i}"] = dz.sum(axis=0)
        dz = dz @ store[f"{prefix}.W{i}"].T
    return dz, grads


# ---------------------------------------------------------------------------
# point-cloud encoder
# ---------------------------------------------------------------------------

def encoder_spec(feat_dim: int) -> MLPSpec:
    return MLPSpec((3, ENCODER_HIDDEN, feat_dim))


def encoder_init(store: ParamStore, feat_dim: int, prefix: str, rng: np.random.Generator) -> MLPSpec:
    spec = encoder_spec(feat_dim)
    mlp_init(store, spec, prefix, rng)
    return spec


def encode_batch(store: ParamStore, spec: MLPSpec, prefix: str, clouds: np.ndarray):
    """Shared per-point MLP + coordinate-wise max over points.

    ``clouds`` is (B, 3, N); returns (features (B, F), cache).  The max pool
    is exact, so the features are permutation-invariant by construction.
    """
    clouds = np.asarray(clouds, dtype=float)
    if clouds.ndim != 3 or clouds.shape[1] != 3:
        raise ShapeMismatch(f"expected clouds (B, 3, N), got {clouds.shape}")
    b, _, n = clouds.shape
    pts = clouds.transpose(0, 2, 1).reshape(b * n, 3)
    per_point, mlp_cache = mlp_forward(store, spec, prefix, pts)
    per_point = per_point.reshape(b, n, -1)
    arg = per_point.argmax(axis=1)
    feats = np.take_along_axis(per_point, arg[:, None, :], axis=1)[:, 0, :]
    return feats, (mlp_cache, arg, (b, n, per_point.shape[-1]))


def encode_batch_backward(store: ParamStore, spec: MLPSpec, prefix: str, cache, dfeats: np.ndarray):
    """Backprop through the max pool (winner takes the gradient) and the MLP."""
    mlp_cache, arg, (b, n, f) = cache
    dfeats = np.asarray(dfeats, dtype=float)
    if dfeats.shape != (b, f):
        raise ShapeMismatch(f"expected dfeats ({b}, {f}), got {dfeats.shape}")
    dper = np.zeros((b, n, f))
    np.put_along_axis(dper, arg[:, None, :], dfeats[:, None, :], axis=1)
    _, grads = mlp_backward(store, spec, prefix, mlp_cache, dper.reshape(b * n, f))
    return grads


def encode_pointcloud(store: ParamStore, spec: MLPSpec, prefix: str, cloud: np.ndarray) -> np.ndarray:
    """Feature vector (F,) for a single (3, N) cloud."""
    cloud = np.asarray(cloud, dtype=float)
    if cloud.ndim != 2 or cloud.shape[0] != 3:
        raise ShapeMismatch(f"expected cloud (3, N), got {cloud.shape}")
    feats, _ = encode_batch(store, spec, prefix, cloud[None])
    return feats[0]


# ---------------------------------------------------------------------------
# time embedding
# ---------------------------------------------------------------------------

def _omegas(dim: int) -> np.ndarray:
    if dim < 2 or dim % 2 != 0:
        raise ValueError("time embedding dimension must be even and >= 2")
    half = dim // 2
    k = np.arange(half, dtype=float)
    return 1000.0 ** (k / max(1, half - 1))


def time_embed(tau: float, dim: int) -> np.ndarray:
    """Sinusoidal embedding of a scalar in [0, 1]: interleaved (sin, cos) pairs.

    Frequencies run geometrically from 1 to 1000 across the pairs.
    """
    w = _omegas(dim) * float(tau)
    out = np.empty(dim)
    out[0::2] = np.sin(w)
    out[1::2] = np.cos(w)
    return out


def time_embed_batch(taus: np.ndarray, dim: int) -> np.ndarray:
    w = _omegas(dim)[None, :] * np.asarray(taus, dtype=float)[:, None]
    out = np.empty((w.shape[0], dim))
    out[:, 0::2] = np.sin(w)
    out[:, 1::2] = np.cos(w)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every entry of ``grads``."""
    store.step += 1
    t = store.step
    for name, g in grads.items():
        if name not in store.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        p = store.params[name]
        g = np.asarray(g, dtype=float)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        if name not in store.m:
            store.m[name] = np.zeros_like(p)
            store.v[name] = np.zeros_like(p)
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(path, tensors: dict[str, np.ndarray], precision: str = "f64") -> None:
    """Serialize named tensors to the binary checkpoint layout.

    Layout: magic, version, precision flag, tensor count, then per tensor the
    name (u32 length + UTF-8 bytes), rank, dims, and raw little-endian data.
    float64 round-trips live parameters bit-exactly; ``precision="f32"`` is
    the explicitly flagged compact form.
    """
    if precision not in ("f64", "f32"):
        raise ValueError(f"unknown precision {precision!r}")
    dtype = "<f8" if precision == "f64" else "<f4"
    flag = 0 if precision == "f64" else 1
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IBI", CHECKPOINT_VERSION, flag, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back; arrays come out in their stored precision."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        header = fh.read(9)
        if len(header) != 9:
            raise CheckpointError("truncated header")
        version, flag, count = struct.unpack("<IBI", header)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if flag not in (0, 1):
            raise CheckpointError(f"unknown precision flag {flag}")
        dtype = np.dtype("<f8") if flag == 0 else np.dtype("<f4")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack("<" + "I" * rank, fh.read(4 * rank)) if rank else ()
            n_items = int(np.prod(dims)) if rank else 1
            raw = fh.read(n_items * dtype.itemsize)
            if len(raw) != n_items * dtype.itemsize:
                raise CheckpointError(f"truncated tensor data for {name!r}")
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        return tensors


def store_from_tensors(tensors: dict[str, np.ndarray]) -> ParamStore:
    """Fresh ParamStore (moments reset) holding float64 copies of ``tensors``."""
    store = ParamStore()
    for name, arr in tensors.items():
        store.add(name, np.array(arr, dtype=float, copy=True))
    return store
