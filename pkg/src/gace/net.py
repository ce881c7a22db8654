"""Two-layer MLPs, symmetric max pooling, losses, exact gradients and Adam.

All forward/backward math is plain numpy in the dtype of the model
parameters (float64 during training, float32 for fast inference). Scatter
accumulation uses ``np.add.at`` and sequential loops only, so results are
deterministic regardless of BLAS thread count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .features import NormConfig

_ACTIVATIONS = ("relu", "identity", "logistic")


@dataclass
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    act: str = "relu"

    def __post_init__(self):
        if self.act not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")
        if self.w.shape[0] != self.b.shape[0]:
            raise ValueError("bias length does not match weight rows")


@dataclass
class Mlp:
    layers: list

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[0]

    def astype(self, dtype) -> "Mlp":
        return Mlp([Layer(l.w.astype(dtype), l.b.astype(dtype), l.act)
                    for l in self.layers])


def _apply_act(a: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(a, 0.0)
    if act == "logistic":
        return 1.0 / (1.0 + np.exp(-a))
    return a


def mlp_forward(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Apply the MLP to a single vector or a batch of row vectors."""
    x = np.asarray(x)
    single = x.ndim == 1
    h = x[None, :] if single else x
    for layer in mlp.layers:
        if h.shape[1] != layer.w.shape[1]:
            raise ValueError(
                f"input width {h.shape[1]} does not match layer input "
                f"{layer.w.shape[1]}")
        h = _apply_act(h @ layer.w.T + layer.b, layer.act)
    return h[0] if single else h


def _mlp_forward_cached(mlp: Mlp, x: np.ndarray):
    # Returns output, per-layer pre-activations and per-layer inputs.
    pre, post = [], [x]
    h = x
    for layer in mlp.layers:
        a = h @ layer.w.T + layer.b
        pre.append(a)
        h = _apply_act(a, layer.act)
        post.append(h)
    return h, pre, post


def _mlp_backward(mlp: Mlp, pre, post, dout):
    # Reverse pass; returns per-layer (dw, db) and the input gradient.
    g = dout
    grads = [None] * len(mlp.layers)
    for li in reversed(range(len(mlp.layers))):
        layer = mlp.layers[li]
        if layer.act == "relu":
            g = g * (pre[li] > 0)
        elif layer.act == "logistic":
            y = post[li + 1]
            g = g * y * (1.0 - y)
        grads[li] = (g.T @ post[li], g.sum(axis=0))
        g = g @ layer.w
    return grads, g


def init_mlp(rng: np.random.Generator, dims, acts) -> Mlp:
    """Uniform fan-in scaled initialization: U(-1/sqrt(in), 1/sqrt(in))."""
    layers = []
    for i, act in enumerate(acts):
        fan_in, fan_out = dims[i], dims[i + 1]
        k = 1.0 / np.sqrt(fan_in)
        layers.append(Layer(rng.uniform(-k, k, (fan_out, fan_in)),
                            rng.uniform(-k, k, fan_out), act))
    return Mlp(layers)


def max_pool(vectors, width: int | None = None) -> np.ndarray:
    """Element-wise maximum over a list of equal-length vectors.

    Permutation invariant; an empty list yields a zero vector of the given
    width.
    """
    if len(vectors) == 0:
        if width is None:
            raise ValueError("width is required to pool an empty list")
        return np.zeros(width)
    arr = np.stack([np.asarray(v) for v in vectors])
    return arr.max(axis=0)


@dataclass
class GaceModel:
    """Parameters of the instance, context and fusion networks.

    Carries the normalization constants and the feature mask the networks
    were trained with, so a saved model is self-describing.
    """

    h_i: Mlp
    h_c: Mlp
    h_f: Mlp
    norm_config: NormConfig
    feature_mask: np.ndarray
    use_instance: bool = True
    use_context: bool = True
    detach_context: bool = False
    seed: int = 0
    version: int = 1

    @property
    def f_i_dim(self) -> int:
        return self.h_i.out_dim

    @property
    def f_c_dim(self) -> int:
        return self.h_c.out_dim

    @property
    def dtype(self):
        return self.h_i.layers[0].w.dtype

    def astype(self, dtype) -> "GaceModel":
        return replace(self, h_i=self.h_i.astype(dtype),
                       h_c=self.h_c.astype(dtype),
                       h_f=self.h_f.astype(dtype),
                       feature_mask=self.feature_mask.astype(dtype))


def build_model(norm_config: NormConfig, *, seed: int, hidden: int = 256,
                f_i_dim: int = 128, f_c_dim: int = 64,
                fusion_hidden: int = 256, feature_mask=None,
                use_instance: bool = True, use_context: bool = True,
                detach_context: bool = False,
                dtype=np.float64) -> GaceModel:
    """Seeded model initialization with the configured layer widths."""
    rng = np.random.default_rng(seed)
    d = norm_config.instance_dim
    g = norm_config.neighbor_geo_dim
    h_i = init_mlp(rng, (d, hidden, f_i_dim), ("relu", "relu"))
    h_c = init_mlp(rng, (g + f_i_dim, hidden, f_c_dim), ("relu", "relu"))
    h_f = init_mlp(rng, (f_i_dim + f_c_dim, fusion_hidden, 2),
                   ("relu", "logistic"))
    if feature_mask is None:
        feature_mask = np.ones(d)
    feature_mask = np.asarray(feature_mask, dtype=np.float64)
    if feature_mask.shape != (d,):
        raise ValueError(f"feature mask must have shape ({d},)")
    model = GaceModel(h_i, h_c, h_f, norm_config, feature_mask,
                      use_instance=use_instance, use_context=use_context,
                      detach_context=detach_context, seed=seed)
    return model.astype(dtype)


@dataclass
class FrameInputs:
    """Precomputed network inputs for one frame.

    ``x`` holds raw (unmasked) instance vectors; pairs are grouped by
    subject with CSR offsets.
    """

    x: np.ndarray              # (N, D)
    pair_subject: np.ndarray   # (P,)
    pair_neighbor: np.ndarray  # (P,)
    pair_offsets: np.ndarray   # (N + 1,)
    pair_geo: np.ndarray       # (P, G)

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class ForwardCache:
    xm: np.ndarray
    pre_i: list
    post_i: list
    f_i: np.ndarray
    u_pairs: np.ndarray
    pre_c: list
    post_c: list
    f_cp: np.ndarray
    amax: np.ndarray
    f_c: np.ndarray
    z: np.ndarray
    pre_f: list
    post_f: list
    s: np.ndarray


def _segment_max(f_cp, offsets, n, width, dtype):
    f_c = np.zeros((n, width), dtype=dtype)
    if f_cp.shape[0] == 0:
        return f_c
    sizes = np.diff(offsets)
    nz = sizes > 0
    starts = offsets[:-1][nz]
    f_c[nz] = np.maximum.reduceat(f_cp, starts, axis=0)
    return f_c


def _segment_max_argmax(f_cp, offsets, n, width, dtype):
    f_c = np.zeros((n, width), dtype=dtype)
    # amax holds the pooled pair index per (subject, channel); -1 when the
    # subject has no neighbors. np.argmax takes the first occurrence, which
    # implements the lowest-index tie-break.
    amax = np.full((n, width), -1, dtype=np.int64)
    cols = np.arange(width)
    for i in range(n):
        lo, hi = offsets[i], offsets[i + 1]
        if hi > lo:
            block = f_cp[lo:hi]
            am = np.argmax(block, axis=0)
            f_c[i] = block[am, cols]
            amax[i] = lo + am
    return f_c, amax


def gace_forward(model: GaceModel, inputs: FrameInputs,
                 want_cache: bool = False, timings: dict | None = None):
    """Run the full network on one frame.

    Instance embeddings are shared: each subject's neighbor inputs reuse
    the neighbors' embeddings, so gradients can flow end to end.

    Returns (s_hat, v_hat) or (s_hat, v_hat, cache) when ``want_cache``.
    """
    dtype = model.dtype
    n = inputs.n
    mask = model.feature_mask.astype(dtype, copy=False)
    xm = inputs.x.astype(dtype, copy=False) * mask

    t0 = time.perf_counter() if timings is not None else 0.0
    f_i, pre_i, post_i = _mlp_forward_cached(model.h_i, xm)
    if timings is not None:
        t1 = time.perf_counter()
        timings["h_i"] = timings.get("h_i", 0.0) + (t1 - t0)
        t0 = t1

    p = inputs.pair_subject.size
    if model.use_context and p > 0:
        u_pairs = np.concatenate(
            [inputs.pair_geo.astype(dtype, copy=False),
             f_i[inputs.pair_neighbor]], axis=1)
        f_cp, pre_c, post_c = _mlp_forward_cached(model.h_c, u_pairs)
        if want_cache:
            f_c, amax = _segment_max_argmax(
                f_cp, inputs.pair_offsets, n, model.f_c_dim, dtype)
        else:
            f_c = _segment_max(f_cp, inputs.pair_offsets, n,
                               model.f_c_dim, dtype)
            amax = None
    else:
        u_pairs = np.zeros((0, model.h_c.in_dim), dtype=dtype)
        f_cp, pre_c, post_c = np.zeros((0, model.f_c_dim), dtype=dtype), [], []
        f_c = np.zeros((n, model.f_c_dim), dtype=dtype)
        amax = np.full((n, model.f_c_dim), -1, dtype=np.int64)
    if timings is not None:
        t1 = time.perf_counter()
        timings["h_c"] = timings.get("h_c", 0.0) + (t1 - t0)
        t0 = t1

    f_i_used = f_i if model.use_instance else np.zeros_like(f_i)
    f_c_used = f_c if model.use_context else np.zeros_like(f_c)
    z = np.concatenate([f_i_used, f_c_used], axis=1)
    s, pre_f, post_f = _mlp_forward_cached(model.h_f, z)
    if timings is not None:
        timings["h_f"] = timings.get("h_f", 0.0) + (time.perf_counter() - t0)

    s_hat, v_hat = s[:, 0], s[:, 1]
    if not want_cache:
        return s_hat, v_hat
    cache = ForwardCache(xm, pre_i, post_i, f_i, u_pairs, pre_c, post_c,
                         f_cp, amax, f_c, z, pre_f, post_f, s)
    return s_hat, v_hat, cache


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters: focal gamma/alpha and the IoU-guidance weight."""

    lambda_iou: float = 0.5
    gamma: float = 2.0
    alpha: float = 0.25
    eps: float = 1e-7

    def __post_init__(self):
        if self.lambda_iou < 0 or self.gamma < 0:
            raise ValueError("lambda_iou and gamma must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")


def _focal_terms(s_hat, u, cfg: LossConfig, with_grad: bool = False):
    s = np.clip(s_hat, cfg.eps, 1.0 - cfg.eps)
    pt = np.where(u == 1, s, 1.0 - s)
    at = np.where(u == 1, cfg.alpha, 1.0 - cfg.alpha)
    one_m = 1.0 - pt
    log_pt = np.log(pt)
    if cfg.gamma == 0.0:
        loss = -at * log_pt
        dpt = -at / pt
    else:
        pow_g = one_m ** cfg.gamma
        loss = -at * pow_g * log_pt
        dpt = at * (cfg.gamma * one_m ** (cfg.gamma - 1.0) * log_pt
                    - pow_g / pt)
    if not with_grad:
        return loss, None
    ds = np.where(u == 1, dpt, -dpt)
    # Clamp subgradient: saturated outputs receive zero gradient.
    ds = np.where((s_hat > cfg.eps) & (s_hat < 1.0 - cfg.eps), ds, 0.0)
    return loss, ds


def focal_loss(s_hat, u, gamma: float = 2.0, alpha: float = 0.25) -> float:
    """Focal loss for one prediction; the score is clamped away from {0, 1}."""
    cfg = LossConfig(gamma=gamma, alpha=alpha)
    loss, _ = _focal_terms(np.asarray([s_hat], dtype=np.float64),
                           np.asarray([u]), cfg)
    return float(loss[0])


def iou_l1_loss(v_hat, v) -> float:
    """Absolute error of the IoU regression head."""
    return float(abs(v_hat - v))


def total_loss(s_hat, v_hat, u, v, cfg: LossConfig):
    """Mean focal loss plus lambda_iou times the mean L1 IoU loss.

    Returns (total, mean_focal, mean_l1). Raises on an empty batch.
    """
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s_hat.size == 0:
        raise ValueError("cannot compute a loss over an empty batch")
    focal, _ = _focal_terms(s_hat, np.asarray(u), cfg)
    l1 = np.abs(np.asarray(v_hat, dtype=np.float64) - np.asarray(v))
    mf, ml = float(focal.mean()), float(l1.mean())
    return mf + cfg.lambda_iou * ml, mf, ml


def _loss_grads_wrt_outputs(s_hat, v_hat, u, v, cfg: LossConfig):
    # Gradients of (sum focal + lambda * sum l1) w.r.t. the two heads.
    focal, ds = _focal_terms(s_hat, u, cfg, with_grad=True)
    diff = v_hat - v
    l1 = np.abs(diff)
    dv = cfg.lambda_iou * np.sign(diff)
    return float(focal.sum()), float(l1.sum()), ds, dv


def backward(model: GaceModel, inputs: FrameInputs, u, v,
             cfg: LossConfig, cache: ForwardCache | None = None,
             scale: float | None = None):
    """Exact reverse-mode gradients of the frame loss.

    By default the loss is the per-detection mean (``scale = 1 / N``); the
    trainer passes ``scale = 1`` and normalizes over the whole batch. Max
    pooling routes gradients to the argmax pair per channel; neighbor
    embedding gradients flow back into the instance network unless the
    model detaches them.

    Returns (grads, (focal_sum, l1_sum, n)) where grads maps "h_i", "h_c",
    "h_f" to per-layer (dw, db) lists and "x" to the gradient w.r.t. the
    raw instance inputs.
    """
    n = inputs.n
    if n == 0:
        raise ValueError("cannot run backward on a frame with no detections")
    if cache is None:
        _, _, cache = gace_forward(model, inputs, want_cache=True)
    if scale is None:
        scale = 1.0 / n
    u = np.asarray(u)
    v = np.asarray(v, dtype=np.float64)
    s_hat = cache.s[:, 0].astype(np.float64)
    v_hat = cache.s[:, 1].astype(np.float64)

    focal_sum, l1_sum, ds, dv = _loss_grads_wrt_outputs(s_hat, v_hat, u, v, cfg)
    dtype = model.dtype
    dout = np.empty((n, 2), dtype=dtype)
    dout[:, 0] = scale * ds
    dout[:, 1] = scale * dv

    grads_f, dz = _mlp_backward(model.h_f, cache.pre_f, cache.post_f, dout)
    fi_dim = model.f_i_dim
    d_fi = dz[:, :fi_dim] if model.use_instance else np.zeros(
        (n, fi_dim), dtype=dtype)
    d_fc = dz[:, fi_dim:] if model.use_context else None

    p = inputs.pair_subject.size
    if model.use_context and p > 0:
        d_fcp = np.zeros_like(cache.f_cp)
        valid = cache.amax >= 0
        if np.any(valid):
            np.add.at(d_fcp, (cache.amax[valid], np.nonzero(valid)[1]),
                      d_fc[valid])
        grads_c, du = _mlp_backward(model.h_c, cache.pre_c, cache.post_c,
                                    d_fcp)
        if not model.detach_context:
            d_fi = d_fi.copy()
            np.add.at(d_fi, inputs.pair_neighbor,
                      du[:, inputs.pair_geo.shape[1]:])
    else:
        grads_c = [(np.zeros_like(l.w), np.zeros_like(l.b))
                   for l in model.h_c.layers]

    grads_i, dxm = _mlp_backward(model.h_i, cache.pre_i, cache.post_i, d_fi)
    dx = dxm * model.feature_mask.astype(dtype, copy=False)

    grads = {"h_i": grads_i, "h_c": grads_c, "h_f": grads_f, "x": dx}
    return grads, (focal_sum, l1_sum, n)


def model_params(model: GaceModel) -> list:
    """Flat parameter list in a fixed order (h_i, h_c, h_f; w then b)."""
    out = []
    for mlp in (model.h_i, model.h_c, model.h_f):
        for layer in mlp.layers:
            out.append(layer.w)
            out.append(layer.b)
    return out


def grad_list(grads: dict, model: GaceModel) -> list:
    """Gradient arrays aligned with :func:`model_params`."""
    out = []
    for name, mlp in (("h_i", model.h_i), ("h_c", model.h_c),
                      ("h_f", model.h_f)):
        for dw, db in grads[name]:
            out.append(dw)
            out.append(db)
    return out


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def init(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state
