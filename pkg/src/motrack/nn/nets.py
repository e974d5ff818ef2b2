"""The network blocks: segmentation, two motion stages, and the single-stage net.

Layer widths follow the published architecture exactly:
  * segmentation encoder 64-64-64-128-1024 per point, global max pool, the
    pooled vector concatenated back onto the second layer's 64-dim output,
    decoder 512-256-128-128 into 2 mask logits + 9 box-feature channels
  * stage encoders 64-128-256-512 per point, pooled, then 512-256
  * motion / refine heads: three 128 hidden layers
  * stage 2: pooled MLP 512-256-4

Normalization/ReLU follow every layer except final outputs.
"""

from __future__ import annotations

import numpy as np

from .layers import Linear, PointMLP, VectorMLP
from .tensor import Tensor, concat


class Module:
    """Named-parameter bookkeeping plus a train/eval flag."""

    def __init__(self):
        self.training = True

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def named_params(self) -> dict:
        return dict(self._params())

    def named_stats(self) -> dict:
        out = {}
        for name, fn in self._norms():
            out[f"{name}.running_mean"] = fn.running_mean
            out[f"{name}.running_var"] = fn.running_var
        return out

    def state_dict(self) -> dict:
        out = {name: t.data for name, t in self.named_params().items()}
        out.update(self.named_stats())
        return out

    def load_state_dict(self, state: dict):
        params = self.named_params()
        norms = dict(self._norms())
        expect = set(params) | set(self.named_stats())
        if set(state) != expect:
            missing = expect - set(state)
            extra = set(state) - expect
            raise ValueError(f"state mismatch: missing {missing}, extra {extra}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()
            t.grad = None
        for name, fn in norms.items():
            fn.running_mean = np.asarray(state[f"{name}.running_mean"], float).copy()
            fn.running_var = np.asarray(state[f"{name}.running_var"], float).copy()

    def _params(self):
        raise NotImplementedError

    def _norms(self):
        return ()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_points(x: Tensor):
    if x.data.ndim < 2 or x.data.shape[-2] < 1:
        raise ValueError("need at least one point")


class SegNet(Module):
    """Point-wise target/background logits plus predicted box-feature vectors."""

    N_IN = 14

    def __init__(self, rng, norm: bool = True):
        super().__init__()
        self.enc = PointMLP([self.N_IN, 64, 64, 64, 128, 1024], rng, norm)
        self.dec = PointMLP([1024 + 64, 512, 256, 128, 128], rng, norm)
        self.out = Linear(128, 11, rng)

    def __call__(self, x):
        x = _as_tensor(x)
        _check_points(x)
        h = x
        skip = None
        for i, (lin, fn) in enumerate(self.enc.layers):
            h = lin(h)
            if fn is not None:
                h = fn(h, self.training)
            h = h.relu()
            if i == 1:
                skip = h
        pooled = h.max(axis=-2, keepdims=True)  # (..., 1, 1024)
        n = x.data.shape[-2]
        tiled = pooled + np.zeros((n, 1))  # broadcast the global feature per point
        h = concat([tiled, skip], axis=-1)
        h = self.dec(h, self.training)
        out = self.out(h)
        return out[..., :2], out[..., 2:]

    def _params(self):
        yield from self.enc.params("enc")
        yield from self.dec.params("dec")
        yield from self.out.params("out")

    def _norms(self):
        yield from self.enc.norm_layers("enc")
        yield from self.dec.norm_layers("dec")


class Stage1Net(Module):
    """Target-point encoder with a motion head (4 RTM + 2 logits) and a
    previous-box refinement head (4 RTM)."""

    N_IN = 13

    def __init__(self, rng, norm: bool = True):
        super().__init__()
        self.enc = PointMLP([self.N_IN, 64, 128, 256, 512], rng, norm)
        self.post = VectorMLP([512, 512, 256], rng, final_relu=True)
        self.motion_head = VectorMLP([256, 128, 128, 128, 6], rng)
        self.refine_head = VectorMLP([256, 128, 128, 128, 4], rng)

    def embed(self, x) -> Tensor:
        x = _as_tensor(x)
        _check_points(x)
        h = self.enc(x, self.training)
        return self.post(h.max(axis=-2))

    def __call__(self, x):
        emb = self.embed(x)
        motion = self.motion_head(emb)
        refine = self.refine_head(emb)
        return motion[..., :4], motion[..., 4:], refine

    def _params(self):
        yield from self.enc.params("enc")
        yield from self.post.params("post")
        yield from self.motion_head.params("motion")
        yield from self.refine_head.params("refine")

    def _norms(self):
        yield from self.enc.norm_layers("enc")


class Stage2Net(Module):
    """Refinement regressor on the canonicalized completed target cloud."""

    N_IN = 12

    def __init__(self, rng, norm: bool = True):
        super().__init__()
        self.enc = PointMLP([self.N_IN, 64, 128, 256, 512], rng, norm)
        self.post = VectorMLP([512, 512, 256, 4], rng)

    def __call__(self, x) -> Tensor:
        x = _as_tensor(x)
        _check_points(x)
        h = self.enc(x, self.training)
        return self.post(h.max(axis=-2))

    def _params(self):
        yield from self.enc.params("enc")
        yield from self.post.params("post")

    def _norms(self):
        yield from self.enc.norm_layers("enc")


class MVanillaNet(Module):
    """Single-shot variant: the full stamped cloud straight to one RTM."""

    N_IN = 14

    def __init__(self, rng, norm: bool = True):
        super().__init__()
        self.enc = PointMLP([self.N_IN, 64, 128, 256, 512], rng, norm)
        self.post = VectorMLP([512, 512, 256], rng, final_relu=True)
        self.head = VectorMLP([256, 128, 128, 128, 4], rng)

    def __call__(self, x) -> Tensor:
        x = _as_tensor(x)
        _check_points(x)
        h = self.enc(x, self.training)
        return self.head(self.post(h.max(axis=-2)))

    def _params(self):
        yield from self.enc.params("enc")
        yield from self.post.params("post")
        yield from self.head.params("head")

    def _norms(self):
        yield from self.enc.norm_layers("enc")


class M2Nets(Module):
    """The two-stage model bundle: segmentation + stage 1 + stage 2."""

    def __init__(self, rng, norm: bool = True):
        super().__init__()
        self.seg = SegNet(rng, norm)
        self.stage1 = Stage1Net(rng, norm)
        self.stage2 = Stage2Net(rng, norm)

    def train(self, mode: bool = True):
        for net in (self.seg, self.stage1, self.stage2):
            net.train(mode)
        return super().train(mode)

    def _params(self):
        for tag, net in (("seg", self.seg), ("s1", self.stage1), ("s2", self.stage2)):
            for name, t in net._params():
                yield f"{tag}.{name}", t

    def _norms(self):
        for tag, net in (("seg", self.seg), ("s1", self.stage1), ("s2", self.stage2)):
            for name, fn in net._norms():
                yield f"{tag}.{name}", fn


# ---------------------------------------------------------------------------
# checkpoint io: versioned binary of named float64 arrays

_MAGIC = b"MTK1"
_VERSION = 1


def save_arrays(path, arrays: dict):
    """Write {name: float array} in the versioned checkpoint format."""
    import struct

    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_arrays(path) -> dict:
    """Read a checkpoint back into {name: float64 array}."""
    import struct

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        out[name] = arr.astype(np.float64)
    if off != len(raw):
        raise ValueError("trailing bytes in checkpoint")
    return out


def save_checkpoint(path, model: Module, extra: dict = None):
    """Persist a model's parameters and running stats (plus optimizer slots)."""
    arrays = dict(model.state_dict())
    if extra:
        for name, arr in extra.items():
            arrays[f"extra.{name}"] = arr
    save_arrays(path, arrays)


def load_checkpoint(path, model: Module) -> dict:
    """Restore a model in place; returns any extra arrays stored alongside."""
    arrays = load_arrays(path)
    extra = {
        name[len("extra."):]: arr
        for name, arr in arrays.items()
        if name.startswith("extra.")
    }
    state = {k: v for k, v in arrays.items() if not k.startswith("extra.")}
    model.load_state_dict(state)
    return extra
