"""Toy denoiser and dual-branch enhancer built on the autodiff primitives.

Networks are plain functions of a parameter mapping (name -> Tensor or
array) so the same code serves tape-recorded training and constant-mode
inference. Layout is channels-first: images are (N, C, H, W).

Parameter name prefixes: ``den.`` denoiser, ``ill.`` illumination
branch, ``ref.`` reflectance branch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .autodiff import ParamSet, ShapeError, Tensor, as_tensor
from .autodiff import tensor as T
from .retinex import decompose

NORM_EPS = 1e-12


@dataclass(frozen=True)
class NetConfig:
    width: int = 8
    zero_init_head: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def widths(self) -> tuple[int, int, int]:
        c = self.width
        return c, 2 * c, 4 * c


# Initialization ---------------------------------------------------------------


def _conv_init(rng, name: str, cin: int, cout: int, k: int, bias: bool = True, zero: bool = False):
    bound = np.sqrt(1.0 / (cin * k * k))
    w = np.zeros((cout, cin, k, k)) if zero else rng.uniform(-bound, bound, size=(cout, cin, k, k))
    out = [(f"{name}.w", w)]
    if bias:
        out.append((f"{name}.b", np.zeros((cout, 1, 1))))
    return out


def _eiab_init(rng, name: str, c: int):
    items = []
    for proj in ("q", "k", "v", "p"):
        items += _conv_init(rng, f"{name}.{proj}", c, c, 1, bias=False)
    bound = np.sqrt(1.0 / 9.0)
    items.append((f"{name}.cpe", rng.uniform(-bound, bound, size=(c, 1, 3, 3))))
    items.append((f"{name}.alpha", np.ones((1, 1, 1))))
    return items


def _unet_init(rng, prefix: str, cin: int, cout: int, cfg: NetConfig):
    c1, c2, c3 = cfg.widths
    return (
        _conv_init(rng, f"{prefix}.in", cin, c1, 3)
        + _conv_init(rng, f"{prefix}.e2", c1, c2, 3)
        + _conv_init(rng, f"{prefix}.e3", c2, c3, 3)
        + _conv_init(rng, f"{prefix}.d2", c3 + c2, c2, 3)
        + _conv_init(rng, f"{prefix}.d1", c2 + c1, c1, 3)
        + _conv_init(rng, f"{prefix}.out", c1, cout, 1, zero=cfg.zero_init_head)
    )


def init_denoiser(cfg: NetConfig = NetConfig()) -> ParamSet:
    rng = np.random.default_rng([cfg.seed, 1])
    return ParamSet(_unet_init(rng, "den", 2, 3, cfg))


def init_enhancer(cfg: NetConfig = NetConfig()) -> ParamSet:
    rng = np.random.default_rng([cfg.seed, 2])
    c1, c2, c3 = cfg.widths
    items = _unet_init(rng, "ill", 1, 1, cfg)
    items += (
        _conv_init(rng, "ref.img_in", 3, c1, 3)
        + _conv_init(rng, "ref.ev_in", 3, c1, 3)
        + _conv_init(rng, "ref.fuse", 2 * c1, c1, 3)
        + _conv_init(rng, "ref.e2", c1, c2, 3)
        + _conv_init(rng, "ref.e3", c2, c3, 3)
        + _conv_init(rng, "ref.ev1", c1, c1, 3)
        + _conv_init(rng, "ref.ev2", c1, c2, 3)
        + _conv_init(rng, "ref.ev3", c2, c3, 3)
        + _eiab_init(rng, "ref.att3", c3)
        + _conv_init(rng, "ref.d2", c3 + c2, c2, 3)
        + _eiab_init(rng, "ref.att2", c2)
        + _conv_init(rng, "ref.d1", c2 + c1, c1, 3)
        + _eiab_init(rng, "ref.att1", c1)
        + _conv_init(rng, "ref.out", c1, 3, 1)
    )
    return ParamSet(items)


# Layers -----------------------------------------------------------------------


def conv(p: Mapping, name: str, x):
    y = T.conv2d(x, p[f"{name}.w"])
    bias = p.get(f"{name}.b")
    return y if bias is None else y + bias


def act(x):
    return T.leaky_relu(x)


def _unet(p: Mapping, prefix: str, x):
    h1 = act(conv(p, f"{prefix}.in", x))
    h2 = act(conv(p, f"{prefix}.e2", T.avgpool2(h1)))
    h3 = act(conv(p, f"{prefix}.e3", T.avgpool2(h2)))
    u2 = act(conv(p, f"{prefix}.d2", T.concat([T.upsample_nearest(h3), h2], axis=1)))
    u1 = act(conv(p, f"{prefix}.d1", T.concat([T.upsample_nearest(u2), h1], axis=1)))
    return conv(p, f"{prefix}.out", u1)


def _check_spatial(x, name: str):
    h, w = x.shape[-2:]
    if h % 4 or w % 4:
        raise ShapeError(f"{name}: spatial size {h}x{w} must be divisible by 4")


def _l2_normalize_rows(x):
    norm = T.power(T.sum_(x * x, axis=2, keepdims=True) + NORM_EPS, 0.5)
    return x / norm


def eiab_forward(p: Mapping, name: str, f_img, f_ev, return_attention: bool = False):
    """Cross attention over channels: image queries, event keys and values.

    ``A = softmax(alpha * K_n Q_n^T)`` is (C, C) per sample, with Q and K
    L2-normalized over the flattened spatial axis. Output is
    ``W_p(A V) + CPE(V) + F_img``.
    """
    f_img, f_ev = as_tensor(f_img), as_tensor(f_ev)
    if f_img.shape[2:] != f_ev.shape[2:] or f_img.shape[0] != f_ev.shape[0]:
        raise ShapeError(f"eiab: image features {f_img.shape} and event features {f_ev.shape} not aligned")
    n, c, h, w = f_img.shape
    q = T.conv2d(f_img, p[f"{name}.q.w"])
    k = T.conv2d(f_ev, p[f"{name}.k.w"])
    v = T.conv2d(f_ev, p[f"{name}.v.w"])
    qn = _l2_normalize_rows(T.reshape(q, (n, c, h * w)))
    kn = _l2_normalize_rows(T.reshape(k, (n, c, h * w)))
    scores = T.matmul(kn, T.transpose(qn, (0, 2, 1)))
    attn = T.softmax(scores * p[f"{name}.alpha"], axis=-1)
    av = T.reshape(T.matmul(attn, T.reshape(v, (n, c, h * w))), (n, c, h, w))
    out = T.conv2d(av, p[f"{name}.p.w"]) + T.depthwise_conv2d(v, p[f"{name}.cpe"]) + f_img
    return (out, attn) if return_attention else out


def denoiser_forward(p: Mapping, counts) -> Tensor:
    """Class logits (N, 3, H, W) from scaled event counts (N, 2, H, W)."""
    counts = as_tensor(counts)
    if counts.ndim != 4 or counts.shape[1] != 2:
        raise ShapeError(f"denoiser expects (N, 2, H, W) input, got {counts.shape}")
    _check_spatial(counts, "denoiser")
    return _unet(p, "den", counts)


def illum_forward(p: Mapping, x_l) -> Tensor:
    x_l = as_tensor(x_l)
    _check_spatial(x_l, "illumination net")
    return T.sigmoid(_unet(p, "ill", x_l))


def refl_forward(p: Mapping, x_r, events) -> Tensor:
    x_r, events = as_tensor(x_r), as_tensor(events)
    if x_r.shape[0] != events.shape[0] or x_r.shape[2:] != events.shape[2:]:
        raise ShapeError(f"reflectance {x_r.shape} and event tensor {events.shape} not aligned")
    _check_spatial(x_r, "reflectance net")
    img = act(conv(p, "ref.img_in", x_r))
    ev = act(conv(p, "ref.ev_in", events))
    e1 = act(conv(p, "ref.fuse", T.concat([img, ev], axis=1)))
    e2 = act(conv(p, "ref.e2", T.avgpool2(e1)))
    e3 = act(conv(p, "ref.e3", T.avgpool2(e2)))
    f1 = act(conv(p, "ref.ev1", ev))
    f2 = act(conv(p, "ref.ev2", T.avgpool2(f1)))
    f3 = act(conv(p, "ref.ev3", T.avgpool2(f2)))
    b = eiab_forward(p, "ref.att3", e3, f3)
    d2 = act(conv(p, "ref.d2", T.concat([T.upsample_nearest(b), e2], axis=1)))
    d2 = eiab_forward(p, "ref.att2", d2, f2)
    d1 = act(conv(p, "ref.d1", T.concat([T.upsample_nearest(d2), e1], axis=1)))
    d1 = eiab_forward(p, "ref.att1", d1, f1)
    return T.sigmoid(conv(p, "ref.out", d1))


def decompose_batch(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(N, H, W, 3) images -> illumination (N, 1, H, W), reflectance (N, 3, H, W)."""
    pairs = [decompose(img) for img in images]
    illum = np.stack([pr.illumination for pr in pairs])[:, None]
    refl = np.stack([np.moveaxis(pr.reflectance, -1, 0) for pr in pairs])
    return illum, refl


def enhance_decomposed(p: Mapping, x_l, x_r, events):
    """Returns (illumination, reflectance, enhanced image) tensors."""
    l_hat = illum_forward(p, x_l)
    r_hat = refl_forward(p, x_r, events)
    return l_hat, r_hat, l_hat * r_hat


def enhance(p: Mapping, x_low: np.ndarray, events):
    """Enhance (N, H, W, 3) low-light images given (N, 3, H, W) event probabilities."""
    x_l, x_r = decompose_batch(np.asarray(x_low))
    return enhance_decomposed(p, x_l, x_r, events)


def event_probabilities(p: Mapping, counts) -> Tensor:
    return T.softmax(denoiser_forward(p, counts), axis=1)
