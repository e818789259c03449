"""Named parameter trees, binary checkpoints, and the Adam optimizer.

A parameter tree is a flat dict mapping dotted names to trainable tensors.
Checkpoints use a simple binary container: magic "SGF1", a u32 version, then
one record per tensor (u16 name length, utf-8 name, u8 rank, u32 dims,
little-endian f32 payload). Optimizer state rides in the same container under
reserved "adam." names.
"""

import struct

import numpy as np

from .autodiff import Tensor

MAGIC = b"SGF1"
VERSION = 1


def init_linear(params, name, fan_in, fan_out, rng, scale=None, bias=True, zero=False):
    """Register a linear layer's weight (and optional bias) in the tree."""
    if zero:
        w = np.zeros((fan_in, fan_out), dtype=np.float32)
    else:
        std = scale if scale is not None else 1.0 / np.sqrt(fan_in)
        w = rng.normal(0.0, std, size=(fan_in, fan_out)).astype(np.float32)
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(fan_out, dtype=np.float32), requires_grad=True)


def init_vector(params, name, dim, rng, std=0.0):
    data = np.zeros(dim, dtype=np.float32) if std == 0.0 else rng.normal(0.0, std, dim)
    params[name] = Tensor(data.astype(np.float32), requires_grad=True)


def init_layer_norm(params, name, dim):
    params[f"{name}.g"] = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)


def zero_grads(params):
    for t in params.values():
        t.grad = None


def num_parameters(params):
    return sum(t.size for t in params.values())


def save_params(path, params, extra=None):
    """Write tensors (and optional extra name->ndarray entries) to disk."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        items = list(params.items())
        if extra:
            items += list(extra.items())
        for name, tensor in items:
            arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, np.float32)
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f4").tobytes())


def load_params(path):
    """Read a checkpoint back as a dict of name -> float32 ndarray."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(2)
            if not head:
                break
            (nlen,) = struct.unpack("<H", head)
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if rank else 1
            payload = fh.read(4 * count)
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
            out[name] = arr
    return out


def restore_params(params, loaded, strict=True):
    """Copy loaded arrays into an existing tree (shapes must match)."""
    for name, tensor in params.items():
        if name not in loaded:
            if strict:
                raise KeyError(f"checkpoint missing parameter '{name}'")
            continue
        arr = loaded[name]
        if arr.shape != tensor.data.shape:
            raise ValueError(f"shape mismatch for '{name}': {arr.shape} vs {tensor.data.shape}")
        tensor.data = np.ascontiguousarray(arr, dtype=np.float32)


class Adam:
    """Adam over a parameter tree; state serializes alongside parameters."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - np.float32(self.lr) * update.astype(np.float32)

    def state_arrays(self):
        out = {"adam.t": np.array([self.t], dtype=np.float32)}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def restore(self, loaded):
        if "adam.t" not in loaded:
            return False
        self.t = int(loaded["adam.t"][0])
        for k in self.params:
            if f"adam.m.{k}" in loaded:
                self.m[k] = loaded[f"adam.m.{k}"].copy()
                self.v[k] = loaded[f"adam.v.{k}"].copy()
        return True


def split_checkpoint(loaded):
    """Separate model tensors from optimizer state in a loaded checkpoint."""
    model = {k: v for k, v in loaded.items() if not k.startswith("adam.")}
    opt = {k: v for k, v in loaded.items() if k.startswith("adam.")}
    return model, opt
