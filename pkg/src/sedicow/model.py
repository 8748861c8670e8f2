"""Diarization-conditioned encoder with self-enrollment cross-attention.

Layout of one forward pass (both streams share every encoder layer)::

    features --conv subsample--> pre-PE FDDT --> + positions --+
                                                               |
    for each layer l:                                          v
        z_se = layer_l(z_se, stno_se)                 (enrollment stream)
        z    = z + MLP([z ; CrossAttn(z, z_se)])      (fusion)
        z    = layer_l(z, stno)                       (main stream)

    logits = head(LN(z))

Only the main stream produces logits.  Tensors are batched as (B, T, D);
the public per-op helpers also accept unbatched (T, D) inputs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .stno import StnoMask

IGNORE_INDEX = -1


@dataclass
class EncoderConfig:
    n_features: int = 24
    layers: int = 2
    d_model: int = 32
    heads: int = 4
    ff_dim: int = 64
    vocab: int = 16
    stride: int = 2
    max_frames: int = 1500
    enroll_window: int = 50
    fusion_hidden: int = 64
    use_enrollment: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.enroll_window < 1:
            raise ValueError("enroll_window must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


# parameter containers -------------------------------------------------------


class _Params:
    """Mixin: walk dataclass fields and yield (dotted name, Tensor)."""

    def named(self, prefix: str = ""):
        for f in fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, _Params):
                yield from value.named(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    yield from item.named(f"{name}.{i}.")


@dataclass
class FddtParams(_Params):
    """Diagonal affine transform per STNO class; rows ordered (S, T, N, O)."""

    scale: Tensor
    bias: Tensor


@dataclass
class AttentionParams(_Params):
    wq: Tensor
    bq: Tensor
    wk: Tensor  # no key bias: softmax is invariant to it
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class LayerParams(_Params):
    fddt: FddtParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor


@dataclass
class CrossAttnBlock(_Params):
    q_ln_gain: Tensor
    q_ln_bias: Tensor
    kv_ln_gain: Tensor
    kv_ln_bias: Tensor
    attn: AttentionParams
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class ConvParams(_Params):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ModelParams(_Params):
    conv: ConvParams
    fddt_pre: FddtParams
    layers: list
    fusion: list
    ln_post_gain: Tensor
    ln_post_bias: Tensor
    head_w: Tensor
    head_b: Tensor


# initialization -------------------------------------------------------------


def _param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _dense(rng, fan_in, fan_out) -> Tensor:
    # same variance as uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    return _param(rng.normal(0.0, 1.0 / math.sqrt(3 * fan_in), size=(fan_in, fan_out)))


def _zeros(*shape) -> Tensor:
    return _param(np.zeros(shape))


def init_fddt(site: str, d_model: int) -> FddtParams:
    """Pre-positional site damps silence and non-target by 0.5; layer sites start as identity."""
    scale = np.ones((4, d_model))
    if site == "pre_pe":
        scale[0] = 0.5  # silence
        scale[2] = 0.5  # non-target
    elif site != "layer":
        raise ValueError(f"unknown FDDT site {site!r}")
    return FddtParams(_param(scale), _zeros(4, d_model))


def _init_attention(rng, d) -> AttentionParams:
    return AttentionParams(
        wq=_dense(rng, d, d), bq=_zeros(d),
        wk=_dense(rng, d, d),
        wv=_dense(rng, d, d), bv=_zeros(d),
        wo=_dense(rng, d, d), bo=_zeros(d),
    )


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> ModelParams:
    d = cfg.d_model
    conv = ConvParams(
        _dense(rng, 3 * cfg.n_features, d), _zeros(d),
        _dense(rng, 3 * d, d), _zeros(d),
    )
    layers = [
        LayerParams(
            fddt=init_fddt("layer", d),
            ln1_gain=_param(np.ones(d)), ln1_bias=_zeros(d),
            attn=_init_attention(rng, d),
            ln2_gain=_param(np.ones(d)), ln2_bias=_zeros(d),
            ff_w1=_dense(rng, d, cfg.ff_dim), ff_b1=_zeros(cfg.ff_dim),
            ff_w2=_dense(rng, cfg.ff_dim, d), ff_b2=_zeros(d),
        )
        for _ in range(cfg.layers)
    ]
    fusion = []
    if cfg.use_enrollment:
        for _ in range(cfg.layers):
            # zero output layer: fusion starts as the identity map
            fusion.append(CrossAttnBlock(
                q_ln_gain=_param(np.ones(d)), q_ln_bias=_zeros(d),
                kv_ln_gain=_param(np.ones(d)), kv_ln_bias=_zeros(d),
                attn=_init_attention(rng, d),
                mlp_w1=_dense(rng, 2 * d, cfg.fusion_hidden), mlp_b1=_zeros(cfg.fusion_hidden),
                mlp_w2=_zeros(cfg.fusion_hidden, d), mlp_b2=_zeros(d),
            ))
    return ModelParams(
        conv=conv,
        fddt_pre=init_fddt("pre_pe", d),
        layers=layers,
        fusion=fusion,
        ln_post_gain=_param(np.ones(d)),
        ln_post_bias=_zeros(d),
        head_w=_dense(rng, d, cfg.vocab),
        head_b=_zeros(cfg.vocab),
    )


# building blocks ------------------------------------------------------------


def _batched(x):
    """Return (3-D tensor, was_unbatched)."""
    x = ag.as_tensor(x)
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


def _mask_array(mask) -> np.ndarray:
    if isinstance(mask, StnoMask):
        return mask.values
    if isinstance(mask, Tensor):
        return mask.data
    return np.asarray(mask, dtype=np.float64)


def fddt_apply(z, mask, p: FddtParams) -> Tensor:
    """Blend the four per-class diagonal affine maps by STNO probabilities.

    Computed as ``z * (P @ scale) + P @ bias`` with P the (.., T, 4) mask,
    which expands to sum_i (scale_i * z_t + bias_i) * p_i^t.
    """
    z = ag.as_tensor(z)
    probs = _mask_array(mask)
    if probs.shape[-2] != z.shape[-2] or probs.shape[-1] != 4:
        raise ValueError(f"mask shape {probs.shape} is not aligned with input {z.shape}")
    probs = Tensor(probs)
    return z * (probs @ p.scale) + probs @ p.bias


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def _layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ag.layer_norm(x) * gain + bias


def _conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    # kernel 3, padding 1: output length ceil(T / stride)
    n = x.shape[1]
    out_len = (n - 1) // stride + 1
    xp = ag.pad(x, 1, 1, axis=1)
    span = stride * (out_len - 1) + 1
    taps = [xp[:, k:k + span:stride] for k in range(3)]
    return _linear(ag.concat(taps, axis=-1), w, b)


def conv_subsample(features, conv: ConvParams, stride: int = 2) -> Tensor:
    """Two kernel-3 convolutions with GELU; the second one strides."""
    x, single = _batched(features)
    if x.shape[1] == 0:
        raise ValueError("conv_subsample needs at least one frame")
    if x.shape[1] < stride:
        raise ValueError(f"need at least {stride} frames, got {x.shape[1]}")
    h = ag.gelu(_conv1d(x, conv.w1, conv.b1, 1))
    h = ag.gelu(_conv1d(h, conv.w2, conv.b2, stride))
    return h.reshape(h.shape[1:]) if single else h


def subsampled_length(n_frames: int, stride: int) -> int:
    return (n_frames - 1) // stride + 1


def multi_head_attention(xq: Tensor, xkv: Tensor, p: AttentionParams, heads: int) -> Tensor:
    b, tq, d = xq.shape
    tk = xkv.shape[1]
    dh = d // heads
    q = _linear(xq, p.wq, p.bq).reshape(b, tq, heads, dh).transpose(0, 2, 1, 3)
    k = (xkv @ p.wk).reshape(b, tk, heads, dh).transpose(0, 2, 3, 1)
    v = _linear(xkv, p.wv, p.bv).reshape(b, tk, heads, dh).transpose(0, 2, 1, 3)
    weights = ag.softmax((q @ k) * (1.0 / math.sqrt(dh)))
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, tq, d)
    return _linear(out, p.wo, p.bo)


def encoder_layer(z, mask, p: LayerParams, heads: int) -> Tensor:
    """FDDT on the layer input, then pre-norm self-attention and feed-forward."""
    z, single = _batched(z)
    if z.shape[1] < 1:
        raise ValueError("encoder_layer needs T >= 1")
    probs = _mask_array(mask)
    if probs.ndim == 2:
        probs = probs[None]
    z = fddt_apply(z, probs, p.fddt)
    h = _layer_norm(z, p.ln1_gain, p.ln1_bias)
    z = z + multi_head_attention(h, h, p.attn, heads)
    h = _layer_norm(z, p.ln2_gain, p.ln2_bias)
    z = z + _linear(ag.gelu(_linear(h, p.ff_w1, p.ff_b1)), p.ff_w2, p.ff_b2)
    return z.reshape(z.shape[1:]) if single else z


def enroll_fuse(z_main, z_se, block: CrossAttnBlock, heads: int) -> Tensor:
    """Cross-attend from the main stream to the enrollment stream, fuse by MLP + residual."""
    z, single = _batched(z_main)
    e, _ = _batched(z_se)
    if z.shape[1] == 0 or e.shape[1] == 0:
        raise ValueError("enroll_fuse inputs must be non-empty")
    if z.shape[-1] != e.shape[-1]:
        raise ValueError(f"dimension mismatch: {z.shape[-1]} vs {e.shape[-1]}")
    # pre-norm on both attention inputs, as in the self-attention sublayer
    c = multi_head_attention(
        _layer_norm(z, block.q_ln_gain, block.q_ln_bias),
        _layer_norm(e, block.kv_ln_gain, block.kv_ln_bias),
        block.attn,
        heads,
    )
    hidden = ag.gelu(_linear(ag.concat([z, c], axis=-1), block.mlp_w1, block.mlp_b1))
    out = _linear(hidden, block.mlp_w2, block.mlp_b2) + z
    return out.reshape(out.shape[1:]) if single else out


def sinusoids(length: int, channels: int, max_timescale: float = 10000.0) -> np.ndarray:
    """Fixed sinusoidal position table (sin half, then cos half)."""
    increment = math.log(max_timescale) / (channels // 2 - 1)
    inv = np.exp(-increment * np.arange(channels // 2))
    t = np.arange(length)[:, None] * inv[None, :]
    return np.concatenate([np.sin(t), np.cos(t)], axis=1)


# the model ------------------------------------------------------------------


class SEDiCoW:
    """Parameters plus forward/loss for the conditioned encoder."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, params: ModelParams | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed))
        self._positions = sinusoids(cfg.max_frames, cfg.d_model)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params.named())

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def disable_fusion(self):
        """Zero every fusion output layer, making enrollment a no-op."""
        for block in self.params.fusion:
            block.mlp_w2.data[...] = 0.0
            block.mlp_b2.data[...] = 0.0

    def _front(self, features, stno) -> Tensor:
        h = conv_subsample(features, self.params.conv, self.cfg.stride)
        n = h.shape[1]
        if n > self.cfg.max_frames:
            raise ValueError(f"{n} frames exceed max_frames={self.cfg.max_frames}")
        h = fddt_apply(h, stno, self.params.fddt_pre)
        return h + Tensor(self._positions[:n])

    def forward(self, features, stno, enroll_features=None, enroll_stno=None) -> Tensor:
        """Frame logits (B, T, V) for the main stream.

        ``stno``/``enroll_stno`` are (B, T, 4) arrays aligned with the
        subsampled frame counts.  Enrollment is skipped when the model was
        built without fusion blocks or when no enrollment is passed.
        """
        cfg = self.cfg
        features = np.asarray(features, dtype=np.float64)
        stno = _mask_array(stno)
        if features.ndim == 2:
            features, stno = features[None], stno[None]
            if enroll_features is not None:
                enroll_features = np.asarray(enroll_features)[None]
                enroll_stno = _mask_array(enroll_stno)[None]
        if features.shape[-1] != cfg.n_features:
            raise ValueError(f"expected {cfg.n_features} features, got {features.shape[-1]}")
        t = subsampled_length(features.shape[1], cfg.stride)
        if stno.shape[:2] != (features.shape[0], t):
            raise ValueError(f"stno shape {stno.shape} not aligned with {t} subsampled frames")
        use_enroll = bool(self.params.fusion) and enroll_features is not None
        z = self._front(features, stno)
        if use_enroll:
            enroll_features = np.asarray(enroll_features, dtype=np.float64)
            enroll_stno = _mask_array(enroll_stno)
            w = subsampled_length(enroll_features.shape[1], cfg.stride)
            if enroll_stno.shape[:2] != (enroll_features.shape[0], w):
                raise ValueError(
                    f"enroll_stno shape {enroll_stno.shape} not aligned with {w} subsampled frames"
                )
            if enroll_features.shape[0] != features.shape[0]:
                raise ValueError("main and enrollment batch sizes differ")
            z_se = self._front(enroll_features, enroll_stno)
        for l, layer in enumerate(self.params.layers):
            if use_enroll:
                z_se = encoder_layer(z_se, enroll_stno, layer, cfg.heads)
                z = enroll_fuse(z, z_se, self.params.fusion[l], cfg.heads)
            z = encoder_layer(z, stno, layer, cfg.heads)
        z = _layer_norm(z, self.params.ln_post_gain, self.params.ln_post_bias)
        return _linear(z, self.params.head_w, self.params.head_b)

    __call__ = forward

    def save(self, path, extra: dict | None = None):
        header = {"config": asdict(self.cfg)}
        if extra:
            header.update(extra)
        ag.save_checkpoint(path, self.named_parameters(), header)

    @classmethod
    def load(cls, path) -> "SEDiCoW":
        header, arrays = ag.load_checkpoint(path)
        model = cls(EncoderConfig(**header["config"]))
        named = model.named_parameters()
        if set(named) != set(arrays):
            raise ValueError("checkpoint parameters do not match the model configuration")
        for name, tensor in named.items():
            if tensor.shape != arrays[name].shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {tensor.shape}")
            tensor.data[...] = arrays[name]
        return model


def loss(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy over frames whose target is not IGNORE_INDEX."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    return ag.cross_entropy(logits, targets, ignore_index=IGNORE_INDEX)
