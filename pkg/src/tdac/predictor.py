"""Encoder-decoder backbone that predicts the two parameter maps and the initial level set.

Topology (widths shown at full scale, divided uniformly by ``scale``)::

    enc1   conv 3->16, conv 16->16                 -> skip1, pool
    enc2   conv 16->32, residual(32)               -> skip2, pool
    enc3   conv 32->64, residual(64)               -> skip3, pool
    bridge conv 64->128, residual(128) x 3
    dec1   upsample, conv 128->64, conv 64->64, + skip3
    dec2   upsample, conv 64->32,  conv 32->32, + skip2
    dec3   upsample, conv 32->16,  conv 16->16, + skip1
    head   conv 16->16, 1x1 conv 16->3

Every 3x3 convolution is followed by ReLU and then batch normalization; a
residual block is two such units plus an identity add.  Output channels are
``(lambda1_raw, lambda2_raw, phi0)``; the parameter maps are
``softplus(raw) + 1e-4`` and ``P = sigmoid(phi0)``.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as nn

FULL_WIDTHS = (16, 32, 64, 128)
LAMBDA_FLOOR = 1e-4
CHECKPOINT_MAGIC = b"TDACCKPT"
CHECKPOINT_VERSION = 1


class PredictorError(ValueError):
    pass


class StaleCacheError(PredictorError):
    pass


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor of the backbone.

    ``scale`` divides every stage width of the full model; ``const_lambda``
    replaces the predicted parameter maps by two trainable scalars.
    """

    in_channels: int = 3
    scale: int = 4
    n_bridge: int = 3
    batch_norm: bool = True
    const_lambda: bool = False

    @property
    def widths(self):
        if self.scale < 1 or any(w % self.scale for w in FULL_WIDTHS):
            raise PredictorError(f"scale {self.scale} must divide the stage widths {FULL_WIDTHS}")
        return tuple(w // self.scale for w in FULL_WIDTHS)


def _unit_specs(arch: Architecture):
    """Ordered ``(name, cin, cout, k)`` for every convolution in the network."""
    w0, w1, w2, w3 = arch.widths
    specs = [("enc1.a", arch.in_channels, w0, 3), ("enc1.b", w0, w0, 3)]
    for stage, (cin, cout) in (("enc2", (w0, w1)), ("enc3", (w1, w2))):
        specs += [(f"{stage}.in", cin, cout, 3), (f"{stage}.res.a", cout, cout, 3), (f"{stage}.res.b", cout, cout, 3)]
    specs.append(("bridge.in", w2, w3, 3))
    for i in range(arch.n_bridge):
        specs += [(f"bridge.res{i}.a", w3, w3, 3), (f"bridge.res{i}.b", w3, w3, 3)]
    for stage, (cin, cout) in (("dec1", (w3, w2)), ("dec2", (w2, w1)), ("dec3", (w1, w0))):
        specs += [(f"{stage}.a", cin, cout, 3), (f"{stage}.b", cout, cout, 3)]
    specs += [("head.a", w0, w0, 3), ("head.out", w0, 3, 1)]
    return specs


@dataclass
class PredictorParams:
    """Weights, normalization parameters and running statistics of the backbone.

    ``tensors`` holds trainable arrays, ``buffers`` the running statistics.
    ``version`` increases with every optimizer update and is used to detect
    stale activation caches.
    """

    arch: Architecture
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = 0

    def copy(self):
        return PredictorParams(
            self.arch,
            OrderedDict((k, v.copy()) for k, v in self.tensors.items()),
            OrderedDict((k, v.copy()) for k, v in self.buffers.items()),
            self.version,
        )


def init_params(arch: Architecture, seed=0) -> PredictorParams:
    """He-normal kernels (std ``sqrt(2/fan_in)``), zero biases, unit BN scales, zero BN shifts."""
    rng = np.random.default_rng(seed)
    params = PredictorParams(arch)
    for name, cin, cout, k in _unit_specs(arch):
        fan_in = cin * k * k
        params.tensors[f"{name}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        params.tensors[f"{name}.bias"] = np.zeros(cout)
        if arch.batch_norm and name != "head.out":
            params.tensors[f"{name}.bn.gamma"] = np.ones(cout)
            params.tensors[f"{name}.bn.beta"] = np.zeros(cout)
            params.buffers[f"{name}.bn.mean"] = np.zeros(cout)
            params.buffers[f"{name}.bn.var"] = np.ones(cout)
    if arch.const_lambda:
        params.tensors["const.lambda1_raw"] = np.zeros(1)
        params.tensors["const.lambda2_raw"] = np.zeros(1)
    return params


def validate_params(params: PredictorParams):
    expected = init_params(params.arch, seed=0)
    for group in ("tensors", "buffers"):
        want, have = getattr(expected, group), getattr(params, group)
        if list(want) != list(have):
            raise PredictorError(f"{group} names do not match the architecture")
        for k, v in want.items():
            if have[k].shape != v.shape:
                raise PredictorError(f"{k}: shape {have[k].shape}, expected {v.shape}")
            if not np.isfinite(have[k]).all():
                raise PredictorError(f"{k} contains non-finite values")


# --- forward / backward tape -------------------------------------------------


class _Tape:
    """Records backward closures so skip connections accumulate gradients correctly."""

    def __init__(self):
        self.ops = []  # (out_key, in_keys, backward)
        self.n = 0

    def new(self):
        self.n += 1
        return self.n

    def record(self, out_key, in_keys, backward):
        self.ops.append((out_key, in_keys, backward))


@dataclass
class PredictorOutput:
    """Batched outputs; every field is ``(N, H, W)``."""

    lambda1_raw: np.ndarray
    lambda2_raw: np.ndarray
    phi0: np.ndarray
    P: np.ndarray

    @property
    def lambda1(self):
        return nn.softplus(self.lambda1_raw) + LAMBDA_FLOOR

    @property
    def lambda2(self):
        return nn.softplus(self.lambda2_raw) + LAMBDA_FLOOR


@dataclass
class ActivationCache:
    tape: _Tape
    out_key: int
    params_ref: PredictorParams
    version: int
    train: bool
    output: PredictorOutput


def _as_batch(images, in_channels):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x.transpose(2, 0, 1)[None]
    elif x.ndim == 4:
        x = x.transpose(0, 3, 1, 2)
    else:
        raise PredictorError(f"cannot interpret image array of shape {x.shape}")
    if x.shape[1] != in_channels:
        if x.shape[1] == 1 and in_channels == 3:
            x = np.repeat(x, 3, axis=1)
        else:
            raise PredictorError(f"image has {x.shape[1]} channels, network expects {in_channels}")
    return np.ascontiguousarray(x)


def predictor_forward(images, params: PredictorParams, mode="train"):
    """Run the backbone on one image ``(H, W[, C])`` or a batch ``(N, H, W, C)``.

    Returns
    -------
    output : PredictorOutput
    cache : ActivationCache
        Needed by :func:`predictor_backward`; only train-mode caches are accepted there.
    """
    if mode not in ("train", "eval"):
        raise PredictorError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    arch = params.arch
    x = _as_batch(images, arch.in_channels)
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise PredictorError(f"image size {x.shape[2]}x{x.shape[3]} must be divisible by 8")

    t = params.tensors
    buf = params.buffers
    tape = _Tape()
    vals = {}

    def put(v):
        k = tape.new()
        vals[k] = v
        return k

    def unit(name, k_in, relu_bn=True):
        y, cctx = nn.conv_forward(vals[k_in], t[f"{name}.weight"], t[f"{name}.bias"])
        k_conv = put(y)

        def b_conv(g, cctx=cctx, name=name):
            dx, dw, db = nn.conv_backward(g, cctx)
            return [dx], {f"{name}.weight": dw, f"{name}.bias": db}

        tape.record(k_conv, [k_in], b_conv)
        if not relu_bn:
            return k_conv
        y, rctx = nn.relu_forward(y)
        k_relu = put(y)
        tape.record(k_relu, [k_conv], lambda g, rctx=rctx: ([nn.relu_backward(g, rctx)], {}))
        if not arch.batch_norm:
            return k_relu
        y, bctx = nn.bn_forward(
            y, t[f"{name}.bn.gamma"], t[f"{name}.bn.beta"], buf[f"{name}.bn.mean"], buf[f"{name}.bn.var"], train
        )
        k_bn = put(y)

        def b_bn(g, bctx=bctx, name=name):
            dx, dg, db = nn.bn_backward(g, bctx)
            return [dx], {f"{name}.bn.gamma": dg, f"{name}.bn.beta": db}

        tape.record(k_bn, [k_relu], b_bn)
        return k_bn

    def add(ka, kb):
        k = put(vals[ka] + vals[kb])
        tape.record(k, [ka, kb], lambda g: ([g, g], {}))
        return k

    def residual(name, k_in):
        return add(k_in, unit(f"{name}.b", unit(f"{name}.a", k_in)))

    def pool(k_in):
        y, pctx = nn.maxpool_forward(vals[k_in])
        k = put(y)
        tape.record(k, [k_in], lambda g, pctx=pctx: ([nn.maxpool_backward(g, pctx)], {}))
        return k

    def upsample(k_in):
        y, uctx = nn.upsample_forward(vals[k_in])
        k = put(y)
        tape.record(k, [k_in], lambda g, uctx=uctx: ([nn.upsample_backward(g, uctx)], {}))
        return k

    k = put(x)
    skip1 = unit("enc1.b", unit("enc1.a", k))
    k = pool(skip1)
    skip2 = residual("enc2.res", unit("enc2.in", k))
    k = pool(skip2)
    skip3 = residual("enc3.res", unit("enc3.in", k))
    k = pool(skip3)
    k = unit("bridge.in", k)
    for i in range(arch.n_bridge):
        k = residual(f"bridge.res{i}", k)
    for stage, skip in (("dec1", skip3), ("dec2", skip2), ("dec3", skip1)):
        k = upsample(k)
        k = unit(f"{stage}.b", unit(f"{stage}.a", k))
        k = add(k, skip)
    k = unit("head.a", k)
    k_out = unit("head.out", k, relu_bn=False)

    raw = vals[k_out]
    if arch.const_lambda:
        shape = raw[:, 0].shape
        l1_raw = np.broadcast_to(t["const.lambda1_raw"][0], shape).copy()
        l2_raw = np.broadcast_to(t["const.lambda2_raw"][0], shape).copy()
    else:
        l1_raw, l2_raw = raw[:, 0].copy(), raw[:, 1].copy()
    phi0 = raw[:, 2].copy()
    out = PredictorOutput(l1_raw, l2_raw, phi0, nn.sigmoid(phi0))
    cache = ActivationCache(tape, k_out, params, params.version, train, out)
    return out, cache


def predictor_backward(cache: ActivationCache, d_lambda1=None, d_lambda2=None, d_phi0=None, d_P=None):
    """Gradients of the loss with respect to every trainable tensor.

    ``d_lambda1``/``d_lambda2`` are gradients with respect to the positive
    parameter maps, ``d_phi0`` the gradient reaching the initial level set
    from the contour branch, and ``d_P`` the gradient with respect to the
    probability map.  The two ``phi0`` paths are summed.  All are ``(N, H, W)``
    (or ``(H, W)`` for a single image); ``None`` means zero.

    Raises
    ------
    StaleCacheError
        If the cache came from an eval-mode pass or the parameters were
        updated after the forward pass.
    """
    if not cache.train:
        raise StaleCacheError("backward requires a train-mode forward cache")
    if cache.params_ref.version != cache.version:
        raise StaleCacheError(
            f"parameters changed since the forward pass (version {cache.version} -> {cache.params_ref.version})"
        )
    out = cache.output
    shape = out.phi0.shape
    params = cache.params_ref
    arch = params.arch

    def field_grad(g):
        if g is None:
            return np.zeros(shape)
        g = np.asarray(g, dtype=np.float64)
        return g.reshape(shape)

    g_l1 = field_grad(d_lambda1) * nn.sigmoid(out.lambda1_raw)
    g_l2 = field_grad(d_lambda2) * nn.sigmoid(out.lambda2_raw)
    g_phi = field_grad(d_phi0) + field_grad(d_P) * out.P * (1.0 - out.P)

    grads = OrderedDict((k, np.zeros_like(v)) for k, v in params.tensors.items())
    g_raw = np.zeros((shape[0], 3) + shape[1:])
    g_raw[:, 2] = g_phi
    if arch.const_lambda:
        grads["const.lambda1_raw"][0] = g_l1.sum()
        grads["const.lambda2_raw"][0] = g_l2.sum()
    else:
        g_raw[:, 0] = g_l1
        g_raw[:, 1] = g_l2

    adj = {cache.out_key: g_raw}
    for out_key, in_keys, backward in reversed(cache.tape.ops):
        g = adj.pop(out_key, None)
        if g is None:
            continue
        g_ins, g_params = backward(g)
        for k_in, gi in zip(in_keys, g_ins):
            if k_in in adj:
                adj[k_in] = adj[k_in] + gi
            else:
                adj[k_in] = gi
        for name, gp in g_params.items():
            grads[name] += gp
    return grads


# --- checkpoint container ----------------------------------------------------


def save_checkpoint(path_or_file, params: PredictorParams):
    """Write the versioned checkpoint container.

    Layout: 8-byte magic ``TDACCKPT``, uint32 format version, uint32 header
    length, UTF-8 JSON header (architecture plus ordered ``[name, shape]``
    entries), then every tensor as little-endian float32 in header order.
    Trainable tensors come first, running statistics after.
    """
    entries = [[k, list(v.shape)] for k, v in params.tensors.items()]
    entries += [[k, list(v.shape)] for k, v in params.buffers.items()]
    header = json.dumps(
        {"arch": asdict(params.arch), "tensors": entries, "n_trainable": len(params.tensors)},
        sort_keys=True,
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for group in (params.tensors, params.buffers):
        for v in group.values():
            buf.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path_or_file) -> PredictorParams:
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise PredictorError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise PredictorError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    arch = Architecture(**header["arch"])
    params = PredictorParams(arch)
    offset = 16 + hlen
    counts = [int(np.prod(shape)) if shape else 1 for _, shape in header["tensors"]]
    if offset + 4 * sum(counts) != len(data):
        raise PredictorError("checkpoint has trailing or missing bytes")
    for i, (name, shape) in enumerate(header["tensors"]):
        count = counts[i]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 4 * count
        (params.tensors if i < header["n_trainable"] else params.buffers)[name] = arr
    validate_params(params)
    return params
