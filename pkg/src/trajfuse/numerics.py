"""Dense-array building blocks with hand-written backward passes.

Every op here is a forward/backward pair on float64 numpy arrays.  Forward
functions return the output (and, where the backward needs intermediate
values, a cache); backward functions take the upstream gradient and return
gradients for the inputs and parameters.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

DTYPE = np.float64


# --------------------------------------------------------------------------
# parameters


class ParamBundle:
    """Named parameter arrays with matching gradient buffers.

    Non-trainable state (batch-norm running statistics) lives in the same
    bundle under ``buffers`` so that one checkpoint captures the model.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        value = np.array(value, dtype=DTYPE)
        if name in self.values or name in self.buffers:
            raise KeyError(f"duplicate parameter {name!r}")
        if trainable:
            self.values[name] = value
            self.grads[name] = np.zeros_like(value)
        else:
            self.buffers[name] = value
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        if name in self.values:
            return self.values[name]
        return self.buffers[name]

    def __setitem__(self, name: str, value):
        target = self.values if name in self.values else self.buffers
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != target[name].shape:
            raise ValueError(f"{name}: shape {value.shape} != {target[name].shape}")
        target[name][...] = value

    def __contains__(self, name):
        return name in self.values or name in self.buffers

    def names(self):
        return list(self.values)

    def accumulate(self, name: str, grad):
        g = self.grads[name]
        if np.shape(grad) != g.shape:
            raise ValueError(f"{name}: gradient shape {np.shape(grad)} != {g.shape}")
        g += grad

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def sub(self, prefix: str) -> dict[str, np.ndarray]:
        """Trainable values under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def copy(self) -> "ParamBundle":
        out = ParamBundle()
        for k, v in self.values.items():
            out.add(k, v.copy())
        for k, v in self.buffers.items():
            out.add(k, v.copy(), trainable=False)
        return out

    def save(self, path):
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path) -> "ParamBundle":
        return load_checkpoint(path)


_CKPT_MAGIC = b"TFPB"
_CKPT_VERSION = 1


def save_checkpoint(path, params: ParamBundle):
    """Binary checkpoint: named entries, shape headers, little-endian float64, CRC32 trailer."""
    entries = [(k, 0, v) for k, v in params.values.items()] + [(k, 1, v) for k, v in params.buffers.items()]
    chunks = [_CKPT_MAGIC, struct.pack("<HI", _CKPT_VERSION, len(entries))]
    for name, kind, v in entries:
        raw = name.encode()
        chunks.append(struct.pack("<HB", len(raw), kind) + raw)
        chunks.append(struct.pack("<B", v.ndim) + struct.pack(f"<{v.ndim}I", *v.shape))
        chunks.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> ParamBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 14 or blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ValueError(f"{path}: CRC mismatch")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    out = ParamBundle()
    for _ in range(count):
        nlen, kind = struct.unpack_from("<HB", body, off)
        off += 3
        name = body[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape).astype(DTYPE)
        off += 8 * size
        out.add(name, arr, trainable=(kind == 0))
    return out


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape if shape is not None else (fan_in, fan_out))


# --------------------------------------------------------------------------
# elementwise / affine


def linear(x, W, b=None):
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight rows {W.shape[0]}")
    y = x @ W
    if b is not None:
        y = y + b
    return y


def linear_backward(dy, x, W, has_bias: bool = True):
    """Returns ``(dx, dW, db)``; ``db`` is None without bias."""
    dx = dy @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = x2.T @ dy2
    db = dy2.sum(axis=0) if has_bias else None
    return dx, dW, db


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def masked_softmax(x, mask, axis=-1):
    """Softmax over entries where ``mask`` is true; all-masked slices give zeros."""
    x = np.where(mask, x, -np.inf)
    mx = np.max(x, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(x - mx), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def softmax_backward(dy, y, axis=-1):
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


# --------------------------------------------------------------------------
# sampling


def bilinear_sample(fmap, fx, fy):
    """Bilinearly interpolate a (C, H, W) map at continuous lattice coordinates.

    Value ``fmap[:, iy, ix]`` sits at coordinate ``(ix, iy)``; neighbours outside
    the map read as zero.  ``fx``/``fy`` may be arrays of any matching shape;
    the result has shape ``fx.shape + (C,)``.
    """
    fmap = np.asarray(fmap, dtype=DTYPE)
    fx = np.asarray(fx, dtype=DTYPE)
    fy = np.asarray(fy, dtype=DTYPE)
    _, H, W = fmap.shape
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    wx = fx - x0
    wy = fy - y0
    out = np.zeros(fx.shape + (fmap.shape[0],))
    for dx, dy, w in ((0, 0, (1 - wx) * (1 - wy)), (1, 0, wx * (1 - wy)),
                      (0, 1, (1 - wx) * wy), (1, 1, wx * wy)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        vals = fmap[:, np.where(ok, yi, 0), np.where(ok, xi, 0)]  # (C, ...)
        out += np.moveaxis(vals, 0, -1) * (w * ok)[..., None]
    return out


def bilinear_sample_backward(dout, fmap, fx, fy, need_map: bool = True):
    """Gradients ``(dmap, dfx, dfy)`` of :func:`bilinear_sample`."""
    fmap = np.asarray(fmap, dtype=DTYPE)
    fx = np.asarray(fx, dtype=DTYPE)
    fy = np.asarray(fy, dtype=DTYPE)
    C, H, W = fmap.shape
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    wx = fx - x0
    wy = fy - y0
    corners = {}
    for dx in (0, 1):
        for dy in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            v = np.moveaxis(fmap[:, np.where(ok, yi, 0), np.where(ok, xi, 0)], 0, -1) * ok[..., None]
            corners[dx, dy] = (xi, yi, ok, v)
    v00, v10, v01, v11 = (corners[k][3] for k in ((0, 0), (1, 0), (0, 1), (1, 1)))
    g = lambda a: (dout * a).sum(axis=-1)
    dfx = g((1 - wy)[..., None] * (v10 - v00) + wy[..., None] * (v11 - v01))
    dfy = g((1 - wx)[..., None] * (v01 - v00) + wx[..., None] * (v11 - v10))
    dmap = None
    if need_map:
        dmap = np.zeros_like(fmap)
        weights = {(0, 0): (1 - wx) * (1 - wy), (1, 0): wx * (1 - wy), (0, 1): (1 - wx) * wy, (1, 1): wx * wy}
        flat = dmap.reshape(C, -1)
        d2 = dout.reshape(-1, C)
        for k, (xi, yi, ok, _) in corners.items():
            w = (weights[k] * ok).reshape(-1)
            lin = (np.where(ok, yi, 0) * W + np.where(ok, xi, 0)).reshape(-1)
            for c in range(C):
                flat[c] += np.bincount(lin, weights=d2[:, c] * w, minlength=H * W)
    return dmap, dfx, dfy


def _corner_weights(fx, fy):
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    wx = fx - x0
    wy = fy - y0
    return x0, y0, wx, wy


def bilinear_sample_batch(maps, fx, fy):
    """Per-item bilinear sampling: ``maps`` (S, C, H, W), ``fx``/``fy`` (S, ...) -> (S, ..., C)."""
    S, C, H, W = maps.shape
    x0, y0, wx, wy = _corner_weights(np.asarray(fx, dtype=DTYPE), np.asarray(fy, dtype=DTYPE))
    sid = np.arange(S).reshape((S,) + (1,) * (x0.ndim - 1))
    sid = np.broadcast_to(sid, x0.shape)
    flat = np.moveaxis(maps, 1, -1)  # (S, H, W, C)
    out = np.zeros(x0.shape + (C,))
    for dx, dy, w in ((0, 0, (1 - wx) * (1 - wy)), (1, 0, wx * (1 - wy)),
                      (0, 1, (1 - wx) * wy), (1, 1, wx * wy)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        vals = flat[sid, np.where(ok, yi, 0), np.where(ok, xi, 0)]
        out += vals * (w * ok)[..., None]
    return out


def bilinear_sample_batch_backward(dout, maps, fx, fy):
    """Gradients ``(dfx, dfy)`` of :func:`bilinear_sample_batch` (maps are treated as constants)."""
    S, C, H, W = maps.shape
    x0, y0, wx, wy = _corner_weights(np.asarray(fx, dtype=DTYPE), np.asarray(fy, dtype=DTYPE))
    sid = np.broadcast_to(np.arange(S).reshape((S,) + (1,) * (x0.ndim - 1)), x0.shape)
    flat = np.moveaxis(maps, 1, -1)
    v = {}
    for dx in (0, 1):
        for dy in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            v[dx, dy] = flat[sid, np.where(ok, yi, 0), np.where(ok, xi, 0)] * ok[..., None]
    dfx = (dout * ((1 - wy)[..., None] * (v[1, 0] - v[0, 0]) + wy[..., None] * (v[1, 1] - v[0, 1]))).sum(-1)
    dfy = (dout * ((1 - wx)[..., None] * (v[0, 1] - v[0, 0]) + wx[..., None] * (v[1, 1] - v[1, 0]))).sum(-1)
    return dfx, dfy


# --------------------------------------------------------------------------
# attention


MHA_KEYS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")


def init_mha(params: ParamBundle, prefix: str, C: int, rng: np.random.Generator):
    for k in ("q", "k", "v", "o"):
        params.add(f"{prefix}.W{k}", xavier_uniform(rng, C, C))
        params.add(f"{prefix}.b{k}", np.zeros(C))


def multi_head_attention(x, p: dict, heads: int, mask=None):
    """Self-attention over axis -2 of ``x`` with shape (B, L, C).

    ``mask`` (B, L) marks valid tokens; invalid tokens are never attended to.
    Returns ``(y, cache)``.
    """
    x = np.asarray(x, dtype=DTYPE)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
        mask = None if mask is None else np.asarray(mask)[None]
    B, L, C = x.shape
    if C % heads:
        raise ValueError(f"channels {C} not divisible by {heads} heads")
    d = C // heads
    if mask is None:
        mask = np.ones((B, L), dtype=bool)
    mask = np.asarray(mask, dtype=bool)

    def split(t):
        return t.reshape(B, L, heads, d).transpose(0, 2, 1, 3)

    q = split(x @ p["Wq"] + p["bq"])
    k = split(x @ p["Wk"] + p["bk"])
    v = split(x @ p["Wv"] + p["bv"])
    scale = 1.0 / np.sqrt(d)
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    a = masked_softmax(s, mask[:, None, None, :], axis=-1)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(B, L, C)
    y = o @ p["Wo"] + p["bo"]
    cache = dict(x=x, q=q, k=k, v=v, a=a, o=o, p=p, heads=heads, scale=scale, squeeze=squeeze)
    return (y[0] if squeeze else y), cache


def multi_head_attention_backward(dy, cache):
    """Returns ``(dx, grads)`` with ``grads`` keyed like :data:`MHA_KEYS`."""
    x, q, k, v, a, o, p = (cache[n] for n in ("x", "q", "k", "v", "a", "o", "p"))
    heads, scale = cache["heads"], cache["scale"]
    dy = np.asarray(dy, dtype=DTYPE)
    if cache["squeeze"]:
        dy = dy[None]
    B, L, C = x.shape
    d = C // heads

    def split(t):
        return t.reshape(B, L, heads, d).transpose(0, 2, 1, 3)

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, L, C)

    g = {}
    g["Wo"] = o.reshape(-1, C).T @ dy.reshape(-1, C)
    g["bo"] = dy.reshape(-1, C).sum(axis=0)
    do = split(dy @ p["Wo"].T)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = softmax_backward(da, a, axis=-1) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dx = np.zeros_like(x)
    x2 = x.reshape(-1, C)
    for name, dt in (("q", dq), ("k", dk), ("v", dv)):
        dm = merge(dt)
        g["W" + name] = x2.T @ dm.reshape(-1, C)
        g["b" + name] = dm.reshape(-1, C).sum(axis=0)
        dx += dm @ p["W" + name].T
    return (dx[0] if cache["squeeze"] else dx), g


# --------------------------------------------------------------------------
# convolution / normalisation


def _im2col3(x):
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.stack([xp[:, ky:ky + H, kx:kx + W] for ky in range(3) for kx in range(3)], axis=1)
    return cols.reshape(C * 9, H * W).T


def conv3x3(x, W, b=None):
    """Same-padded 3x3 convolution: x (Cin, H, W), W (Cout, Cin, 3, 3) -> (Cout, H, W)."""
    x = np.asarray(x, dtype=DTYPE)
    Cout, Cin = W.shape[:2]
    if x.shape[0] != Cin or W.shape[2:] != (3, 3):
        raise ValueError(f"conv3x3: input {x.shape} incompatible with weight {W.shape}")
    _, H, Wd = x.shape
    cols = _im2col3(x)
    y = cols @ W.reshape(Cout, -1).T
    if b is not None:
        y = y + b
    return y.T.reshape(Cout, H, Wd), cols


def conv3x3_backward(dy, cols, W, x_shape):
    Cout = W.shape[0]
    Cin, H, Wd = x_shape
    dy2 = dy.reshape(Cout, -1).T
    dW = (dy2.T @ cols).reshape(W.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ W.reshape(Cout, -1)).T.reshape(Cin, 3, 3, H, Wd)
    dxp = np.zeros((Cin, H + 2, Wd + 2))
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + H, kx:kx + Wd] += dcols[:, ky, kx]
    return dxp[:, 1:-1, 1:-1], dW, db


def batchnorm(x, gamma, beta, running_mean, running_var, training: bool,
              momentum: float = 0.9, eps: float = 1e-5):
    """Per-channel batch norm over the spatial axes of a (C, H, W) map.

    In training mode the running statistics are updated in place.
    """
    C = x.shape[0]
    flat = x.reshape(C, -1)
    if training:
        mu = flat.mean(axis=1)
        var = flat.var(axis=1)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mu[:, None]) * inv[:, None]
    y = gamma[:, None] * xhat + beta[:, None]
    return y.reshape(x.shape), (xhat, inv, gamma, training)


def batchnorm_backward(dy, cache):
    xhat, inv, gamma, training = cache
    C = dy.shape[0]
    d = dy.reshape(C, -1)
    dgamma = (d * xhat).sum(axis=1)
    dbeta = d.sum(axis=1)
    dxhat = d * gamma[:, None]
    if training:
        N = d.shape[1]
        dx = (inv[:, None] / N) * (N * dxhat - dxhat.sum(axis=1, keepdims=True)
                                   - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
    else:
        dx = dxhat * inv[:, None]
    return dx.reshape(dy.shape), dgamma, dbeta


# --------------------------------------------------------------------------
# gradient checking


def grad_check(f, x, analytic, h: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None, atol: float = 1e-6) -> float:
    """Worst relative error between ``analytic`` and central differences of ``f`` at ``x``.

    ``f`` maps the array ``x`` (perturbed in place, then restored) to a scalar.
    Relative error per coordinate is ``|a - n| / max(|a| + |n|, atol)``; the
    floor keeps round-off on near-zero gradients from dominating.  With
    ``max_coords`` only a random subset of coordinates is probed.
    """
    if not x.flags.c_contiguous:
        raise ValueError("grad_check perturbs x in place; pass a C-contiguous array")
    flat = x.reshape(-1)
    an = np.asarray(analytic, dtype=DTYPE).reshape(-1)
    if an.shape != flat.shape:
        raise ValueError("analytic gradient shape mismatch")
    idx = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=max_coords, replace=False)
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        num = (fp - fm) / (2 * h)
        err = abs(an[i] - num) / max(abs(an[i]) + abs(num), atol)
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# optimisation


class AdamW:
    """Adam with decoupled weight decay (biases and norm parameters are not decayed)."""

    def __init__(self, params: ParamBundle, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, clip_norm: float | None = 10.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.values.items()}

    @staticmethod
    def _decays(name: str) -> bool:
        leaf = name.rsplit(".", 1)[-1]
        return not (leaf.startswith("b") or leaf in ("gamma", "beta"))

    def step(self):
        self.t += 1
        grads = self.params.grads
        scale = 1.0
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.values.items():
            g = grads[k] * scale
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.wd and self._decays(k):
                p -= self.lr * self.wd * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
