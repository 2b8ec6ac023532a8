"""A small dense-prediction network with hand-written backpropagation.

Activations are NHWC float arrays. Every layer caches what its backward pass
needs only when the forward pass is called with ``keep_cache=True``; inference
without caches is read-only on the layers.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

DEFAULT_ARCH = {
    "in_channels": 1,
    "backbone": [16, 32, 64],
    "kp_hidden": 16,
    "desc_dim": 32,
    "dropout_rate": None,
    "uhead": None,
}
STAGES = ("stage1", "stage2", "stage3")
MAGIC = b"PIXR"
FORMAT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


# ------------------------------------------------------------------ layers

class Conv2d:
    kind = "conv"

    def __init__(self, name, cin, cout, k, rng=None, dtype=np.float32):
        if k % 2 != 1:
            raise ValueError("conv kernels must be odd-sized")
        self.name, self.cin, self.cout, self.k = name, cin, cout, k
        if rng is None:
            self.weight = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            limit = np.sqrt(6.0 / (cin * k * k))
            self.weight = rng.uniform(-limit, limit, (cout, cin, k, k)).astype(dtype)
        self.bias = np.zeros(cout, dtype=dtype)
        self.zero_grad()
        self._cache = None

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def grads(self):
        return {f"{self.name}.weight": self.gweight, f"{self.name}.bias": self.gbias}

    def zero_grad(self):
        self.gweight = np.zeros_like(self.weight)
        self.gbias = np.zeros_like(self.bias)

    def _cols(self, x):
        # column order is (di, dj, channel) so col2im slices stay contiguous
        n, h, w, c = x.shape
        if self.k == 1:
            return x.reshape(n * h * w, c)
        p = self.k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = np.empty((n, h, w, self.k * self.k * c), dtype=x.dtype)
        for di in range(self.k):
            for dj in range(self.k):
                j = (di * self.k + dj) * c
                cols[..., j:j + c] = xp[:, di:di + h, dj:dj + w, :]
        return cols.reshape(n * h * w, -1)

    def _wmat(self):
        return self.weight.transpose(0, 2, 3, 1).reshape(self.cout, -1)

    def forward(self, x, keep_cache=False):
        n, h, w, _ = x.shape
        cols = self._cols(x)
        y = cols @ self._wmat().T
        y += self.bias
        if keep_cache:
            self._cache = (cols, x.shape)
        return y.reshape(n, h, w, self.cout)

    def backward(self, gy):
        cols, xshape = self._cache
        n, h, w, c = xshape
        g2 = gy.reshape(-1, self.cout)
        k, p = self.k, self.k // 2
        gw = (g2.T @ cols).reshape(self.cout, k, k, c)
        self.gweight += gw.transpose(0, 3, 1, 2)
        self.gbias += g2.sum(axis=0)
        gcols = g2 @ self._wmat()
        if k == 1:
            return gcols.reshape(xshape)
        gcols = gcols.reshape(n, h, w, k * k * c)
        gxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=gy.dtype)
        for di in range(k):
            for dj in range(k):
                j = (di * k + dj) * c
                gxp[:, di:di + h, dj:dj + w, :] += gcols[..., j:j + c]
        return gxp[:, p:p + h, p:p + w, :]


class ReLU:
    kind = "relu"

    def __init__(self, name):
        self.name = name
        self._cache = None

    def forward(self, x, keep_cache=False):
        if keep_cache:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, gy):
        return gy * self._cache


class Sigmoid:
    kind = "sigmoid"

    def __init__(self, name):
        self.name = name
        self._cache = None

    def forward(self, x, keep_cache=False):
        y = sigmoid(x)
        if keep_cache:
            self._cache = y
        return y

    def backward(self, gy):
        y = self._cache
        return gy * y * (1 - y)


class Dropout:
    """Inverted element-wise dropout; only active when the caller supplies a random stream.

    ``mask_source`` (N, H, W) of flat pixel indices into the batch, or -1,
    makes a pixel reuse another pixel's keep/drop draws for all channels.
    Training pairs use it so a B pixel sees the same sampled network as the
    A pixel it corresponds to.
    """
    kind = "dropout"

    def __init__(self, name, rate):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.name, self.rate = name, rate
        self._cache = None

    def forward(self, x, keep_cache=False, rng=None, mask_source=None):
        if rng is None or self.rate == 0.0:
            if keep_cache:
                self._cache = None
            return x
        keep = rng.random(x.shape, dtype=np.float32) >= self.rate
        if mask_source is not None:
            src = np.asarray(mask_source).ravel()
            if src.size != x.size // x.shape[-1]:
                raise ValueError("mask_source must have one entry per pixel")
            flat = keep.reshape(-1, x.shape[-1])
            tied = src >= 0
            flat[tied] = flat[src[tied]]
        scale = x.dtype.type(1.0 / (1.0 - self.rate))
        if keep_cache:
            self._cache = keep * scale
        return x * keep * scale

    def backward(self, gy):
        return gy if self._cache is None else gy * self._cache


class L2Norm:
    """Per-pixel L2 normalisation over channels."""
    kind = "l2norm"
    eps = 1e-12

    def __init__(self, name):
        self.name = name
        self._cache = None

    def forward(self, x, keep_cache=False):
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True) + self.eps)
        y = x / norm
        if keep_cache:
            self._cache = (y, norm)
        return y

    def backward(self, gy):
        y, norm = self._cache
        return (gy - y * (gy * y).sum(axis=-1, keepdims=True)) / norm


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def bce_with_logits(z, y):
    """Elementwise binary cross-entropy from logits; soft targets allowed."""
    return np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))


# ------------------------------------------------------------------ model

class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, keep_cache=False, rng=None, stop_before_last=False, mask_source=None):
        layers = self.layers[:-1] if stop_before_last else self.layers
        for layer in layers:
            if isinstance(layer, Dropout):
                x = layer.forward(x, keep_cache, rng, mask_source)
            else:
                x = layer.forward(x, keep_cache)
            if not np.isfinite(x).all():
                raise NonFiniteError(f"non-finite activation after layer {layer.name}")
        return x

    def backward(self, g, skip_last=False):
        layers = self.layers[:-1] if skip_last else self.layers
        for layer in reversed(layers):
            g = layer.backward(g)
        return g

    def convs(self):
        return [l for l in self.layers if isinstance(l, Conv2d)]

    def params(self):
        out = {}
        for c in self.convs():
            out.update(c.params())
        return out

    def grads(self):
        out = {}
        for c in self.convs():
            out.update(c.grads())
        return out


def _conv_stack(prefix, cin, widths, rng, dtype, final=None, k=3):
    layers = []
    for i, cout in enumerate(widths):
        layers.append(Conv2d(f"{prefix}.conv{i}", cin, cout, k, rng, dtype))
        if final is None or i < len(widths) - 1:
            layers.append(ReLU(f"{prefix}.relu{i}"))
        cin = cout
    if final is not None:
        layers.append(final)
    return layers


class Model:
    """Backbone with keypoint, descriptor and optional uncertainty heads."""

    def __init__(self, arch=None, seed=0, dtype=np.float32, stage="stage1", init="he"):
        self.arch = {**DEFAULT_ARCH, **(arch or {})}
        self.stage = stage
        a = self.arch
        rng = np.random.default_rng(seed) if init == "he" else None
        c_feat = a["backbone"][-1] if a["backbone"] else a["in_channels"]
        self.backbone = Sequential(_conv_stack("backbone", a["in_channels"], a["backbone"], rng, dtype))
        self.keypoint_head = Sequential(
            _conv_stack("keypoint", c_feat, [a["kp_hidden"], 1], rng, dtype,
                        final=Sigmoid("keypoint.sigmoid"), k=1))
        self.descriptor_head = Sequential(
            [Conv2d("descriptor.conv0", c_feat, a["desc_dim"], 1, rng, dtype), L2Norm("descriptor.l2norm")])
        self.uncertainty_head = None
        if a["uhead"]:
            self.uncertainty_head = make_uncertainty_head(c_feat, a["uhead"], rng, dtype)
        self.dropout_active = False
        self.forward_calls = 0
        if a["dropout_rate"] is not None:
            self._insert_dropout(a["dropout_rate"])

    # structure ---------------------------------------------------------
    def _insert_dropout(self, rate):
        layers = []
        for layer in self.backbone.layers:
            layers.append(layer)
            if isinstance(layer, ReLU):
                layers.append(Dropout(layer.name.replace("relu", "dropout"), rate))
        self.backbone.layers = layers
        self.dropout_active = True

    @property
    def is_bayesian(self):
        return any(isinstance(l, Dropout) for l in self.backbone.layers)

    @property
    def mode(self):
        return "train" if self.dropout_active else "eval"

    def heads(self):
        out = {"backbone": self.backbone, "keypoint": self.keypoint_head,
               "descriptor": self.descriptor_head}
        if self.uncertainty_head is not None:
            out["uncertainty"] = self.uncertainty_head
        return out

    def params(self):
        out = {}
        for seq in self.heads().values():
            out.update(seq.params())
        return out

    def grads(self):
        out = {}
        for seq in self.heads().values():
            out.update(seq.grads())
        return out

    def zero_grad(self):
        for seq in self.heads().values():
            for c in seq.convs():
                c.zero_grad()

    def n_params(self):
        return int(sum(p.size for p in self.params().values()))

    @property
    def dtype(self):
        return self.backbone.convs()[0].weight.dtype

    def astype(self, dtype):
        for seq in self.heads().values():
            for c in seq.convs():
                c.weight = c.weight.astype(dtype)
                c.bias = c.bias.astype(dtype)
                c.zero_grad()
        return self

    def copy(self):
        m = Model(self.arch, dtype=self.dtype, stage=self.stage, init="zeros")
        m.dropout_active = self.dropout_active
        m.load_params(self.params())
        return m

    def load_params(self, params, strict=True):
        own = self.params()
        if strict and set(own) != set(params):
            missing = sorted(set(own) ^ set(params))
            raise CheckpointShapeError(f"parameter names differ: {missing[:6]}")
        for seq in self.heads().values():
            for c in seq.convs():
                for attr, key in (("weight", f"{c.name}.weight"), ("bias", f"{c.name}.bias")):
                    if key not in params:
                        continue
                    v = np.asarray(params[key])
                    cur = getattr(c, attr)
                    if v.shape != cur.shape:
                        raise CheckpointShapeError(f"{key}: expected {cur.shape}, got {v.shape}")
                    setattr(c, attr, v.astype(cur.dtype).copy())
                c.zero_grad()

    # passes ------------------------------------------------------------
    def forward(self, image, rng=None, keep_cache=False, descriptors=True, uncertainty=False,
                mask_source=None):
        """Dense outputs for an (H, W), (N, H, W) or (N, H, W, C) input.

        Returns a dict with ``feat`` (N, H, W, C), ``logit`` and ``prob``
        (N, H, W), ``desc`` (N, H, W, D) and, if requested, ``u`` (N, H, W).
        Dropout is applied only when ``dropout_active`` and ``rng`` is given;
        ``mask_source`` is passed to :class:`Dropout`.
        """
        self.forward_calls += 1
        x = np.asarray(image, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None, :, :, None]
        elif x.ndim == 3:
            x = x[..., None]
        drop_rng = rng if self.dropout_active else None
        feat = self.backbone.forward(x, keep_cache, drop_rng, mask_source=mask_source)
        logit = self.keypoint_head.forward(feat, keep_cache, stop_before_last=True)
        # the sigmoid layer's cache is unused: gradients enter as d/dlogit
        prob = sigmoid(logit)
        out = {"feat": feat, "logit": logit[..., 0], "prob": prob[..., 0]}
        if descriptors:
            out["desc"] = self.descriptor_head.forward(feat, keep_cache)
        if uncertainty:
            if self.uncertainty_head is None:
                raise ValueError("model has no uncertainty head")
            ulogit = self.uncertainty_head.forward(uhead_input(feat, prob[..., 0]), keep_cache,
                                                   stop_before_last=True)
            out["ulogit"] = ulogit[..., 0]
            out["u"] = sigmoid(ulogit)[..., 0]
        return out

    def backward(self, grad_logit=None, grad_desc=None):
        """Accumulate parameter gradients from d/dlogit (N, H, W) and d/ddesc (N, H, W, D)."""
        g_feat = None
        if grad_logit is not None:
            g_feat = self.keypoint_head.backward(grad_logit[..., None].astype(self.dtype), skip_last=True)
        if grad_desc is not None:
            g = self.descriptor_head.backward(grad_desc.astype(self.dtype))
            g_feat = g if g_feat is None else g_feat + g
        if g_feat is not None:
            self.backbone.backward(g_feat)


def make_uncertainty_head(c_feat, widths, rng=None, dtype=np.float32):
    layers = []
    cin = c_feat + 1
    for i, cout in enumerate(widths):
        layers.append(Conv2d(f"uncertainty.conv{i}", cin, cout, 3, rng, dtype))
        layers.append(ReLU(f"uncertainty.relu{i}"))
        cin = cout
    layers.append(Conv2d(f"uncertainty.conv{len(widths)}", cin, 1, 1, rng, dtype))
    layers.append(Sigmoid("uncertainty.sigmoid"))
    return Sequential(layers)


def uhead_input(feat, prob):
    return np.concatenate([feat, prob[..., None].astype(feat.dtype)], axis=-1)


# ------------------------------------------------------------------ optimisation

class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def train_step(model, batch, loss_fn, optimizer):
    """One Adam update; ``loss_fn(model, batch, grad=True)`` must fill the model's grads."""
    model.zero_grad()
    loss = float(loss_fn(model, batch, grad=True))
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")
    grads = model.grads()
    bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {bad[:4]} (loss {loss:.6g})")
    optimizer.step(model.params(), grads)
    return loss


def grad_check(model, loss_fn, batch, epsilon=1e-3):
    """Largest relative error between backprop and central-difference gradients."""
    if model.n_params() > 5000:
        raise ValueError("grad_check is limited to models with <= 5000 parameters")
    model.zero_grad()
    loss_fn(model, batch, grad=True)
    analytic = {k: g.copy() for k, g in model.grads().items()}
    worst = 0.0
    for name, p in model.params().items():
        flat = p.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = float(loss_fn(model, batch, grad=False))
            flat[i] = orig - epsilon
            lm = float(loss_fn(model, batch, grad=False))
            flat[i] = orig
            num = (lp - lm) / (2 * epsilon)
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ------------------------------------------------------------------ checkpoints

def _write_params(buf, params):
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def checkpoint_bytes(model, stage=None, extra=None, only_prefix=None) -> bytes:
    stage = stage or model.stage
    if stage not in STAGES:
        raise ValueError(f"unknown stage tag {stage!r}")
    params = model.params()
    if only_prefix:
        params = {k: v for k, v in params.items() if k.startswith(only_prefix)}
    cfg = {"arch": model.arch, "dropout_active": model.dropout_active,
           "head_only": bool(only_prefix), **(extra or {})}
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    tag = stage.encode()
    buf.write(struct.pack("<B", len(tag)))
    buf.write(tag)
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    _write_params(buf, params)
    return buf.getvalue()


def save_checkpoint(model, path, stage=None, extra=None, only_prefix=None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, stage, extra, only_prefix))


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("corrupt checkpoint: unexpected end of file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Parse a checkpoint file into (stage, config, params)."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError("corrupt checkpoint: bad magic bytes")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    (tl,) = r.unpack("<B")
    stage = r.take(tl).decode("utf-8", errors="replace")
    if stage not in STAGES:
        raise CorruptCheckpointError(f"corrupt checkpoint: unknown stage tag {stage!r}")
    (bl,) = r.unpack("<I")
    try:
        cfg = json.loads(r.take(bl).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptCheckpointError("corrupt checkpoint: bad config block") from None
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (nl,) = r.unpack("<H")
        name = r.take(nl).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise CorruptCheckpointError("corrupt checkpoint: trailing bytes")
    return stage, cfg, params


def load_checkpoint(path) -> Model:
    stage, cfg, params = read_checkpoint(path)
    arch = dict(cfg["arch"])
    if cfg.get("head_only"):
        raise CheckpointError("head-only checkpoint: load it together with its detector")
    model = Model(arch, stage=stage, init="zeros")
    model.load_params(params)
    model.dropout_active = bool(cfg.get("dropout_active", model.dropout_active))
    return model


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
