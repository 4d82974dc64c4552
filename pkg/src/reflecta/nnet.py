"""Fully convolutional network core: layers, backprop, presets, inference.

Everything is plain numpy. Tensors are (batch, channels, height, width);
convolutions are valid (no padding) cross-correlations, so a network whose
layers are all convolutional can run on a full image slice and emit one
class distribution per interior position (dense inference).

Two preset families:

* ``twopathcnn`` - two pathways over the same input patch: a local pathway
  (two conv/maxout/stride-1-maxpool blocks, dropout on its hidden layers)
  and a global pathway (one large conv/maxout), concatenated and classified
  by a single big conv. Receptive field 33.
* ``wide2d`` - two co-centered inputs at different extents: a normal
  resolution pathway of eight 3x3 conv/maxout blocks and a low resolution
  pathway (mean-downsample by 3, eight blocks, replicate-upsample by 3),
  merged through two 1x1 conv/maxout blocks with dropout. Receptive field
  17 at normal resolution; training segments of 43/75 yield a 27x27 output
  neighborhood per instance.

``*_desk`` variants keep the exact topology with smaller feature counts so
the synthetic-phantom studies run in minutes on a CPU.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ._seeds import substream

# chunk convolution im2col buffers roughly at this size
_WINDOW_BYTES_LIMIT = 256 * 1024 * 1024


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | maxout | maxpool | dropout | downsample | upsample
    out_channels: int = 0
    kernel: int = 1
    group: int = 2
    window: int = 2
    stride: int = 1
    rate: float = 0.5
    factor: int = 3

    def __post_init__(self):
        if self.kind == "conv" and (self.kernel < 1 or self.out_channels < 1):
            raise ValueError(f"bad conv spec: {self}")
        if self.kind == "maxpool" and (self.window < 1 or self.stride < 1):
            raise ValueError(f"bad maxpool spec: {self}")
        if self.kind == "dropout" and not 0 <= self.rate < 1:
            raise ValueError(f"bad dropout rate: {self.rate}")


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    in_channels: int
    pathways: tuple          # tuple of (input_index, tuple of LayerSpec)
    merge_layers: tuple      # LayerSpecs applied after channel concat
    n_inputs: int
    patch_sizes: tuple       # training patch size per input
    receptive_field: int     # of the first (normal-resolution) pathway
    label_window: int        # output neighborhood per training instance
    low_res_factor: int = 0  # downsample factor of the second pathway, 0 if none
    n_classes: int = 2

    @property
    def out_offset(self):
        return (self.receptive_field - 1) // 2


@dataclass
class Network:
    config: NetworkConfig
    params: dict
    opt_state: dict = field(default_factory=dict)
    dtype: np.dtype = np.float32


# ---------------------------------------------------------------------------
# individual layers (forward + backward)
# ---------------------------------------------------------------------------

def _window_view(x, kh, kw, stride=1):
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    return as_strided(x, (b, c, oh, ow, kh, kw),
                      (sb, sc, sh * stride, sw * stride, sh, sw))


def conv2d(x, weights, bias):
    """Valid cross-correlation plus per-feature bias.

    x: (B, C, H, W); weights: (O, C, kh, kw); bias: (O,).
    Output: (B, O, H-kh+1, W-kw+1).
    """
    b, c, h, w = x.shape
    o, ci, kh, kw = weights.shape
    if ci != c:
        raise ValueError(f"input has {c} channels, kernel expects {ci}")
    if kh > h or kw > w:
        raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    oh, ow = h - kh + 1, w - kw + 1
    out = np.empty((b, o, oh, ow), dtype=x.dtype)
    rows = _conv_chunk_rows(b, c, ow, kh, kw, x.itemsize)
    for r0 in range(0, oh, rows):
        r1 = min(r0 + rows, oh)
        win = _window_view(x[:, :, r0:r1 + kh - 1, :], kh, kw)
        out[:, :, r0:r1, :] = np.tensordot(
            win, weights, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out += bias[None, :, None, None]
    return out


def _conv_chunk_rows(b, c, ow, kh, kw, itemsize):
    per_row = b * c * ow * kh * kw * itemsize
    return max(1, _WINDOW_BYTES_LIMIT // max(per_row, 1))


def conv2d_backward(x, weights, gout):
    """Gradients of conv2d: returns (grad_x, grad_w, grad_b)."""
    b, c, h, w = x.shape
    o, _, kh, kw = weights.shape
    oh, ow = gout.shape[2], gout.shape[3]
    grad_b = gout.sum(axis=(0, 2, 3))
    grad_w = np.zeros_like(weights, dtype=np.promote_types(x.dtype, np.float32))
    rows = _conv_chunk_rows(b, c, ow, kh, kw, x.itemsize)
    for r0 in range(0, oh, rows):
        r1 = min(r0 + rows, oh)
        win = _window_view(x[:, :, r0:r1 + kh - 1, :], kh, kw)
        grad_w += np.tensordot(gout[:, :, r0:r1, :], win, axes=([0, 2, 3], [0, 2, 3]))
    # full correlation of the padded output gradient with the flipped kernel
    gpad = np.zeros((b, o, oh + 2 * (kh - 1), ow + 2 * (kw - 1)), dtype=gout.dtype)
    gpad[:, :, kh - 1:kh - 1 + oh, kw - 1:kw - 1 + ow] = gout
    flipped = weights[:, :, ::-1, ::-1]
    grad_x = np.empty_like(x)
    rows_x = _conv_chunk_rows(b, o, w, kh, kw, gout.itemsize)
    for r0 in range(0, h, rows_x):
        r1 = min(r0 + rows_x, h)
        win = _window_view(gpad[:, :, r0:r1 + kh - 1, :], kh, kw)
        grad_x[:, :, r0:r1, :] = np.tensordot(
            win, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    return grad_x, grad_w.astype(weights.dtype, copy=False), grad_b


def maxout(x, group):
    """Elementwise max over consecutive groups of feature maps."""
    b, c, h, w = x.shape
    if c % group:
        raise ValueError(f"{c} channels not divisible by maxout group {group}")
    r = x.reshape(b, c // group, group, h, w)
    idx = r.argmax(axis=2)
    out = np.take_along_axis(r, idx[:, :, None], axis=2)[:, :, 0]
    return out, idx


def maxout_backward(x_shape, group, idx, gout):
    b, c, h, w = x_shape
    grad = np.zeros((b, c // group, group, h, w), dtype=gout.dtype)
    np.put_along_axis(grad, idx[:, :, None], gout[:, :, None], axis=2)
    return grad.reshape(b, c, h, w)


def maxpool(x, window, stride=1):
    """Sliding-window max; output dims floor((H-window)/stride)+1."""
    b, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"pool window {window} larger than input {h}x{w}")
    win = _window_view(x, window, window, stride)
    flat = win.reshape(win.shape[:4] + (window * window,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool_backward(x_shape, window, stride, idx, gout):
    b, c, h, w = x_shape
    grad = np.zeros((b, c, h, w), dtype=gout.dtype)
    oh, ow = gout.shape[2], gout.shape[3]
    hi = np.arange(oh)[:, None] * stride + idx // window
    wi = np.arange(ow)[None, :] * stride + idx % window
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(grad, (bi, ci, hi, wi), gout)
    return grad


def dropout(x, rate, rng):
    """Inverted dropout: scales kept units by 1/(1-rate) at train time."""
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def downsample_mean(x, factor):
    b, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial dims {h}x{w} not divisible by {factor}")
    r = x.reshape(b, c, h // factor, factor, w // factor, factor)
    return r.mean(axis=(3, 5))


def downsample_mean_backward(x_shape, factor, gout):
    b, c, h, w = x_shape
    grad = np.repeat(np.repeat(gout, factor, axis=2), factor, axis=3) / (factor * factor)
    return grad.astype(gout.dtype, copy=False)


def upsample_repeat(x, factor):
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def upsample_repeat_backward(factor, gout):
    b, c, h, w = gout.shape
    r = gout.reshape(b, c, h // factor, factor, w // factor, factor)
    return r.sum(axis=(3, 5))


def softmax_channels(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# network assembly
# ---------------------------------------------------------------------------

def _run_layers(layers, x, params, prefix, mode, rng, ctxs=None):
    for i, spec in enumerate(layers):
        if spec.kind == "conv":
            w = params[f"{prefix}{i}_w"]
            b = params[f"{prefix}{i}_b"]
            if ctxs is not None:
                ctxs.append(("conv", x, w))
            x = conv2d(x, w, b)
        elif spec.kind == "maxout":
            x, idx = maxout(x, spec.group)
            if ctxs is not None:
                ctxs.append(("maxout", spec.group, idx,
                             (x.shape[0], x.shape[1] * spec.group) + x.shape[2:]))
        elif spec.kind == "maxpool":
            shape = x.shape
            x, idx = maxpool(x, spec.window, spec.stride)
            if ctxs is not None:
                ctxs.append(("maxpool", spec.window, spec.stride, idx, shape))
        elif spec.kind == "dropout":
            if mode == "train" and spec.rate > 0:
                x, mask = dropout(x, spec.rate, rng)
            else:
                mask = None
            if ctxs is not None:
                ctxs.append(("dropout", mask))
        elif spec.kind == "downsample":
            shape = x.shape
            x = downsample_mean(x, spec.factor)
            if ctxs is not None:
                ctxs.append(("downsample", spec.factor, shape))
        elif spec.kind == "upsample":
            x = upsample_repeat(x, spec.factor)
            if ctxs is not None:
                ctxs.append(("upsample", spec.factor))
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
    return x


def _backprop_layers(layers, ctxs, grad, grads, prefix):
    for i in range(len(layers) - 1, -1, -1):
        ctx = ctxs[i]
        kind = ctx[0]
        if kind == "conv":
            _, x, w = ctx
            grad, gw, gb = conv2d_backward(x, w, grad)
            grads[f"{prefix}{i}_w"] = grads.get(f"{prefix}{i}_w", 0) + gw
            grads[f"{prefix}{i}_b"] = grads.get(f"{prefix}{i}_b", 0) + gb
        elif kind == "maxout":
            _, group, idx, in_shape = ctx
            grad = maxout_backward(in_shape, group, idx, grad)
        elif kind == "maxpool":
            _, window, stride, idx, in_shape = ctx
            grad = maxpool_backward(in_shape, window, stride, idx, grad)
        elif kind == "dropout":
            mask = ctx[1]
            if mask is not None:
                grad = grad * mask
        elif kind == "downsample":
            _, factor, in_shape = ctx
            grad = downsample_mean_backward(in_shape, factor, grad)
        elif kind == "upsample":
            grad = upsample_repeat_backward(ctx[1], grad)
    return grad


def _center_crop(x, target_hw):
    h, w = x.shape[2], x.shape[3]
    th, tw = target_hw
    if (h, w) == (th, tw):
        return x, (0, 0)
    dh, dw = (h - th) // 2, (w - tw) // 2
    return x[:, :, dh:dh + th, dw:dw + tw], (dh, dw)


def run_pathway(net, index, x, mode="infer", rng=None, ctxs=None):
    input_index, layers = net.config.pathways[index]
    return _run_layers(layers, x, net.params, f"p{index}_l", mode, rng, ctxs)


def run_merge(net, feats, mode="infer", rng=None, ctxs=None):
    """Concatenate pathway feature maps (center-cropped to the smallest
    spatial size) and apply the merge layers; returns class probabilities."""
    target = (min(f.shape[2] for f in feats), min(f.shape[3] for f in feats))
    cropped = []
    offsets = []
    for f in feats:
        c, off = _center_crop(f, target)
        cropped.append(c)
        offsets.append(off)
    x = np.concatenate(cropped, axis=1)
    if ctxs is not None:
        ctxs.append(("concat", [f.shape for f in feats], offsets, target))
    merge_ctxs = [] if ctxs is not None else None
    logits = _run_layers(net.config.merge_layers, x, net.params, "m_l", mode, rng, merge_ctxs)
    if ctxs is not None:
        ctxs.append(("merge", merge_ctxs))
    probs = softmax_channels(logits)
    if ctxs is not None:
        ctxs.append(("softmax", probs))
    return probs


def _as_inputs(config, batch):
    if config.n_inputs == 1:
        arrays = (batch,) if not isinstance(batch, (tuple, list)) else tuple(batch)
        if len(arrays) != 1:
            raise ValueError(f"{config.name} takes one input tensor, got {len(arrays)}")
    else:
        if not isinstance(batch, (tuple, list)) or len(batch) != config.n_inputs:
            raise ValueError(f"{config.name} takes {config.n_inputs} input tensors")
        arrays = tuple(batch)
    out = []
    for a in arrays:
        a = np.asarray(a)
        if a.ndim == 3:
            a = a[None]
        if a.ndim != 4:
            raise ValueError(f"inputs must be (B, C, H, W), got shape {a.shape}")
        if a.shape[1] != config.in_channels:
            raise ValueError(f"{config.name} expects {config.in_channels} channels, "
                             f"got {a.shape[1]}")
        out.append(a)
    return out


def forward(net, batch, mode="infer", seed=0):
    """Class probabilities for a batch; dropout is active only in train mode.

    batch: one (B, C, H, W) array for single-input presets, or a tuple of two
    co-centered arrays for dual-input presets. Output: (B, n_classes, H', W')
    with the channel distribution summing to 1 at every position.
    """
    inputs = _as_inputs(net.config, batch)
    rng = substream(seed, "dropout") if mode == "train" else None
    feats = []
    for i in range(len(net.config.pathways)):
        input_index = net.config.pathways[i][0]
        x = inputs[input_index].astype(net.dtype, copy=False)
        feats.append(run_pathway(net, i, x, mode, rng))
    return run_merge(net, feats, mode, rng)


def _forward_with_ctx(net, inputs, mode, rng):
    ctxs = []
    feats = []
    for i in range(len(net.config.pathways)):
        input_index = net.config.pathways[i][0]
        x = inputs[input_index].astype(net.dtype, copy=False)
        pathway_ctxs = []
        feats.append(run_pathway(net, i, x, mode, rng, pathway_ctxs))
        ctxs.append(("pathway", i, input_index, pathway_ctxs))
    probs = run_merge(net, feats, mode, rng, ctxs)
    return probs, ctxs


def loss_and_gradients(net, batch, labels, l1=0.0, l2=0.0, seed=0, mode="train"):
    """Mean negative log likelihood plus L1/L2 penalties, with gradients.

    labels: (B,) class indices for single-position outputs, or (B, H', W')
    for dense training; regularization applies to conv weights only.
    Returns (loss, gradient dict matching net.params keys).
    """
    inputs = _as_inputs(net.config, batch)
    rng = substream(seed, "dropout") if mode == "train" else None
    probs, ctxs = _forward_with_ctx(net, inputs, mode, rng)
    b, n_classes, oh, ow = probs.shape
    y = np.asarray(labels).astype(np.int64)
    if y.ndim == 1:
        if (oh, ow) != (1, 1):
            raise ValueError(f"scalar labels but output is {oh}x{ow}")
        y = y.reshape(b, 1, 1)
    if y.shape != (b, oh, ow):
        raise ValueError(f"labels shape {y.shape} does not match output {(b, oh, ow)}")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError("labels must be class indices")
    count = b * oh * ow
    picked = np.take_along_axis(probs, y[:, None], axis=1)[:, 0]
    nll = -np.log(np.maximum(picked, 1e-30)).sum() / count
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, y[:, None], 1.0, axis=1)
    grad_logits = (probs - onehot) / count

    grads = {}
    merge_ctx = ctxs[-2][1]
    concat_ctx = ctxs[-3]
    grad = _backprop_layers(net.config.merge_layers, merge_ctx, grad_logits, grads, "m_l")
    # split the concat gradient back into (padded) pathway gradients
    _, feat_shapes, offsets, target = concat_ctx
    grads_feats = []
    start = 0
    for shape, (dh, dw) in zip(feat_shapes, offsets):
        n = shape[1]
        piece = grad[:, start:start + n]
        start += n
        full = np.zeros(shape, dtype=piece.dtype)
        full[:, :, dh:dh + target[0], dw:dw + target[1]] = piece
        grads_feats.append(full)
    for entry in ctxs[:-3]:
        _, i, _input_index, pathway_ctxs = entry
        _, layers = net.config.pathways[i]
        _backprop_layers(layers, pathway_ctxs, grads_feats[i], grads, f"p{i}_l")

    loss = float(nll)
    for name, value in net.params.items():
        if name.endswith("_w"):
            if l1:
                loss += l1 * float(np.abs(value).sum())
                grads[name] = grads[name] + l1 * np.sign(value)
            if l2:
                loss += l2 * float((value.astype(np.float64) ** 2).sum())
                grads[name] = grads[name] + 2.0 * l2 * value
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss: {loss}")
    for name in net.params:
        grads.setdefault(name, np.zeros_like(net.params[name]))
        grads[name] = grads[name].astype(net.dtype, copy=False)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def step_sgd_momentum(params, grads, state, lr, mu=0.6):
    """v <- mu v - lr g; w <- w + v. state holds per-parameter velocities."""
    velocity = state.setdefault("velocity", {})
    for name, w in params.items():
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        v = mu * v - lr * grads[name]
        velocity[name] = v
        params[name] = w + v
    return params


def step_rmsprop(params, grads, state, lr, decay=0.9, eps=1e-8):
    """s <- decay s + (1-decay) g^2; w <- w - lr g / sqrt(s + eps)."""
    accum = state.setdefault("accum", {})
    for name, w in params.items():
        g = grads[name]
        s = accum.get(name)
        if s is None:
            s = np.zeros_like(w)
        s = decay * s + (1.0 - decay) * g * g
        accum[name] = s
        params[name] = w - lr * g / np.sqrt(s + eps)
    return params


# ---------------------------------------------------------------------------
# presets and initialization
# ---------------------------------------------------------------------------

def _conv_block(out_channels, kernel, group=2):
    return (LayerSpec("conv", out_channels=out_channels * group, kernel=kernel),
            LayerSpec("maxout", group=group))


def make_config(name, in_channels):
    """Named preset architectures; feature counts scale with the preset."""
    if name == "twopathcnn":
        local = _conv_block(64, 7) + (LayerSpec("maxpool", window=4, stride=1),
                                      LayerSpec("dropout", rate=0.5))
        local += _conv_block(64, 3) + (LayerSpec("maxpool", window=2, stride=1),
                                       LayerSpec("dropout", rate=0.5))
        global_ = _conv_block(160, 13)
        merge = (LayerSpec("conv", out_channels=2, kernel=21),)
        return NetworkConfig(name, in_channels, ((0, local), (0, global_)), merge,
                             n_inputs=1, patch_sizes=(33,), receptive_field=33,
                             label_window=1)
    if name == "twopathcnn_desk":
        local = _conv_block(12, 5) + (LayerSpec("maxpool", window=2, stride=1),
                                      LayerSpec("dropout", rate=0.5))
        local += _conv_block(12, 3) + (LayerSpec("maxpool", window=2, stride=1),
                                       LayerSpec("dropout", rate=0.5))
        global_ = _conv_block(24, 9)
        merge = (LayerSpec("conv", out_channels=2, kernel=9),)
        return NetworkConfig(name, in_channels, ((0, local), (0, global_)), merge,
                             n_inputs=1, patch_sizes=(17,), receptive_field=17,
                             label_window=1)
    if name in ("wide2d", "wide2d_desk"):
        fms = (30, 30, 40, 40, 40, 40, 50, 50) if name == "wide2d" else (8, 8, 10, 10, 10, 10, 12, 12)
        hidden = 150 if name == "wide2d" else 24
        normal = ()
        for f in fms:
            normal += _conv_block(f, 3)
        low = (LayerSpec("downsample", factor=3),)
        for f in fms:
            low += _conv_block(f, 3)
        low += (LayerSpec("upsample", factor=3),)
        merge = (_conv_block(hidden, 1) + (LayerSpec("dropout", rate=0.5),)
                 + _conv_block(hidden, 1) + (LayerSpec("dropout", rate=0.5),)
                 + (LayerSpec("conv", out_channels=2, kernel=1),))
        return NetworkConfig(name, in_channels, ((0, normal), (1, low)), merge,
                             n_inputs=2, patch_sizes=(43, 75), receptive_field=17,
                             label_window=27, low_res_factor=3)
    raise ValueError(f"unknown preset {name!r}; have twopathcnn[_desk], wide2d[_desk]")


def _iter_conv_shapes(config):
    """Yield (param prefix, conv spec, in_channels) walking every pathway and
    the merge stack, tracking the channel count through each layer kind."""
    merge_in = 0
    for p, (input_index, layers) in enumerate(config.pathways):
        channels = config.in_channels
        for i, spec in enumerate(layers):
            if spec.kind == "conv":
                yield f"p{p}_l{i}", spec, channels
                channels = spec.out_channels
            elif spec.kind == "maxout":
                channels //= spec.group
        merge_in += channels
    channels = merge_in
    for i, spec in enumerate(config.merge_layers):
        if spec.kind == "conv":
            yield f"m_l{i}", spec, channels
            channels = spec.out_channels
        elif spec.kind == "maxout":
            channels //= spec.group


def init_params(config, scheme="uniform_pm0005", seed=0, dtype=np.float32):
    """Fresh network; biases are zero in every scheme.

    uniform_pm0005 draws weights from (-0.005, 0.005); he draws from a normal
    with per-layer std sqrt(2 / fan_in). Deterministic given the seed.
    """
    if scheme not in ("uniform_pm0005", "he"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = substream(seed, "init", config.name)
    params = {}
    for prefix, spec, in_ch in _iter_conv_shapes(config):
        shape = (spec.out_channels, in_ch, spec.kernel, spec.kernel)
        if scheme == "uniform_pm0005":
            w = rng.uniform(-0.005, 0.005, size=shape)
        else:
            fan_in = in_ch * spec.kernel * spec.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[f"{prefix}_w"] = w.astype(dtype)
        params[f"{prefix}_b"] = np.zeros(spec.out_channels, dtype=dtype)
    return Network(config=config, params=params, opt_state={}, dtype=np.dtype(dtype))


def final_layer_names(config):
    """Parameter names of the classifying (last conv) layer."""
    last = None
    for i, spec in enumerate(config.merge_layers):
        if spec.kind == "conv":
            last = i
    return (f"m_l{last}_w", f"m_l{last}_b")


# ---------------------------------------------------------------------------
# dense inference
# ---------------------------------------------------------------------------

def _pad_hw(arr, left, right):
    return np.pad(arr, ((0, 0), (left[0], right[0]), (left[1], right[1])))


def dense_infer_slice(net, channels_hw, mode="infer"):
    """Probabilities for one (C, H, W) slice; output (2, H-RF+1, W-RF+1).

    For dual-input presets the low-resolution pathway sees the same slice
    zero-padded to the wider co-centered extent (and to a multiple of its
    downsampling factor); its output is trailing-cropped to the normal
    pathway's grid, which keeps the two aligned at the shared offset.
    """
    config = net.config
    c, h, w = channels_hw.shape
    rf = config.receptive_field
    if h < rf or w < rf:
        raise ValueError(f"slice {h}x{w} smaller than receptive field {rf}")
    x1 = channels_hw[None].astype(net.dtype, copy=False)
    if config.n_inputs == 1:
        return forward(net, x1, mode=mode)[0]
    margin = (config.patch_sizes[1] - config.patch_sizes[0]) // 2
    factor = config.low_res_factor
    pad_h = (factor - (h + 2 * margin) % factor) % factor
    pad_w = (factor - (w + 2 * margin) % factor) % factor
    x2 = _pad_hw(channels_hw, (margin, margin), (margin + pad_h, margin + pad_w))
    x2 = x2[None].astype(net.dtype, copy=False)
    f1 = run_pathway(net, 0, x1, mode)
    f2 = run_pathway(net, 1, x2, mode)
    f2 = f2[:, :, :f1.shape[2], :f1.shape[3]]
    return run_merge(net, [f1, f2], mode)[0]


def dense_infer(net, image, slice_axis="z"):
    """Apply the network to every full slice of a multi-modal image.

    Returns a (n_classes, X, Y, Z) float32 probability volume; positions
    whose receptive field does not fit inside the slice are left at 0.
    Matches per-patch forward outputs at every valid position.
    """
    if image.n_channels != net.config.in_channels:
        raise ValueError(f"image has {image.n_channels} channels, net expects "
                         f"{net.config.in_channels}")
    axis = {"x": 0, "y": 1, "z": 2}[slice_axis]
    dims = image.dims
    stack = np.stack([ch.data for ch in image.channels])  # (C, X, Y, Z)
    out = np.zeros((net.config.n_classes,) + dims, dtype=np.float32)
    offset = net.config.out_offset
    plane_axes = [a for a in range(3) if a != axis]
    for k in range(dims[axis]):
        plane = np.take(stack, k, axis=1 + axis)
        probs = dense_infer_slice(net, plane)
        sl = [slice(None)] * 4
        sl[1 + axis] = k
        sl[1 + plane_axes[0]] = slice(offset, offset + probs.shape[1])
        sl[1 + plane_axes[1]] = slice(offset, offset + probs.shape[2])
        out[tuple(sl)] = probs
    return out


# ---------------------------------------------------------------------------
# serialization: shape-tagged little-endian float32 tensors
# ---------------------------------------------------------------------------

_NET_MAGIC = b"RFNET\x01"


def save_network(net, path):
    """Binary container: magic, JSON header (preset name, channels, dtype),
    then for each parameter its name, shape, and raw little-endian data."""
    header = json.dumps({
        "preset": net.config.name,
        "in_channels": net.config.in_channels,
        "dtype": np.dtype(net.dtype).name,
        "names": sorted(net.params),
    }).encode()
    with open(path, "wb") as fh:
        fh.write(_NET_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in sorted(net.params):
            tensor = np.ascontiguousarray(net.params[name], dtype="<f4")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.tobytes())


def load_network(path):
    with open(path, "rb") as fh:
        if fh.read(6) != _NET_MAGIC:
            raise ValueError(f"{path}: not a network file")
        header_len = struct.unpack("<I", fh.read(4))[0]
        header = json.loads(fh.read(header_len))
        config = make_config(header["preset"], header["in_channels"])
        params = {}
        for _ in header["names"]:
            name_len = struct.unpack("<H", fh.read(2))[0]
            name = fh.read(name_len).decode()
            ndim = struct.unpack("<B", fh.read(1))[0]
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            params[name] = data.astype(header["dtype"])
    return Network(config=config, params=params, opt_state={},
                   dtype=np.dtype(header["dtype"]))
