"""Conv-gated linear attention.

Per head: project q/k/v, optionally rotate (RoPE), run a causal depthwise
conv over q and k, map both through a shared linear + positivity
nonlinearity into feature space, and drive a gated linear recurrence

    S_t = diag(g_t) S_{t-1} + k̇_tᵀ v_t,      z_t = g_t ∘ z_{t-1} + k̇_t,
    o_t = (q̇_t S_t) / max(q̇_t · z_t, ε),

where the gate vector g_t = sigmoid(x_t W1 W2 + b) lives on the feature
axis and is broadcast across value channels. Under that broadcast the
column-mean of the matrix normalizer collapses exactly to the vector
recurrence z, which is why normalization costs one extra vector per head.

Three evaluation paths with deliberately different summation orders:

* ``gla_scan_recurrent`` — direct fold over time (also the streaming path),
* ``gla_scan_chunked``   — log-space cumulative gates, pairwise in-chunk
  decays, inter-chunk state carry,
* ``gla_parallel_oracle`` — plain-numpy O(N²) evaluation that materialises
  the gate products J and normalises the weights *before* touching values
  (so the first-token weight is exactly 1.0).

The scan entry points accept either Tensors (autodiff) or ndarrays (fast
inference); the oracle is ndarray-only by design.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .baselines import rope_apply
from .errors import ConfigError, NumericError, OracleSizeError, ShapeError
from .tensor import Tensor, from_op, np_sigmoid
from .tensor import _accum, _unbroadcast  # package-internal reuse

EPS = 1e-6
MASK_VALUE = -1e9
# floor applied inside log-space decay paths only; sigmoid output can
# underflow to exactly 0.0 under saturated gate pre-activations
GATE_LOG_FLOOR = 1e-12
FEATURE_KINDS = ("softmax_featdim", "one_plus_elu", "identity")
# sigmoid(2.944...) ~ 0.95: gates start close to 1 so early training keeps memory
GATE_INIT_BIAS = math.log(19.0)
ORACLE_HARD_CAP = 4096


class _NP:
    """Numpy mirror of the tensor ops the generic scan code calls."""

    exp = staticmethod(np.exp)
    log = staticmethod(np.log)
    matmul = staticmethod(np.matmul)
    concatenate = staticmethod(np.concatenate)
    sigmoid = staticmethod(np_sigmoid)

    @staticmethod
    def cumsum(x, axis=-1):
        return np.cumsum(x, axis=axis)

    @staticmethod
    def clamp_min(x, lo):
        return np.maximum(x, lo)

    @staticmethod
    def softmax(x, axis=-1):
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)


def _ops(*xs):
    return T if any(isinstance(x, Tensor) for x in xs) else _NP


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ConvGLAParams:
    """One attention layer's parameters, heads stacked on the leading axis.

    Arrays are Tensors so the same object trains and serves (inference paths
    read ``.data``). When ``share_conv`` is set, ``conv_k`` is the same
    object as ``conv_q``; when ``share_linear`` (default), ``W_phi_k`` is
    None and keys reuse ``W_phi``.
    """

    Wq: Tensor  # [H, d_model, d_head]
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor  # [H*d_head, d_model]
    conv_q: Tensor  # [H, d_head, K], tap 0 = current position
    conv_k: Tensor
    W_phi: Tensor  # [H, d_head, d_feat]
    gate_W1: Tensor  # [H, d_model, R]
    gate_W2: Tensor  # [H, R, d_feat]
    gate_b: Tensor  # [H, d_feat]
    W_phi_k: Optional[Tensor] = None
    share_conv: bool = False
    share_linear: bool = True
    use_rope: bool = False
    rope_theta: float = 10000.0
    hybrid_window: Optional[int] = None
    feature_kind: str = "softmax_featdim"
    use_conv: bool = True  # ablation: no-conv arm
    normalize: bool = True  # ablation: no-norm arm

    @property
    def n_heads(self) -> int:
        return self.Wq.shape[0]

    @property
    def d_model(self) -> int:
        return self.Wq.shape[1]

    @property
    def d_head(self) -> int:
        return self.Wq.shape[2]

    @property
    def d_feat(self) -> int:
        return self.W_phi.shape[2]

    @property
    def kernel_width(self) -> int:
        return self.conv_q.shape[2]

    @property
    def gate_rank(self) -> int:
        return self.gate_W1.shape[2]

    def w_phi_for_keys(self) -> Tensor:
        return self.W_phi if self.share_linear or self.W_phi_k is None else self.W_phi_k

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        """name -> Tensor; aliased/absent fields are skipped so the mapping
        round-trips through the flat checkpoint container."""
        out = {
            prefix + "Wq": self.Wq,
            prefix + "Wk": self.Wk,
            prefix + "Wv": self.Wv,
            prefix + "Wo": self.Wo,
            prefix + "conv_q": self.conv_q,
            prefix + "W_phi": self.W_phi,
            prefix + "gate_W1": self.gate_W1,
            prefix + "gate_W2": self.gate_W2,
            prefix + "gate_b": self.gate_b,
        }
        if not self.share_conv:
            out[prefix + "conv_k"] = self.conv_k
        if not self.share_linear and self.W_phi_k is not None:
            out[prefix + "W_phi_k"] = self.W_phi_k
        return out

    def attention_internals(self, prefix: str = "") -> dict[str, Tensor]:
        """The distill-stage trainable set: conv kernels, feature projection,
        gate factors — projections stay frozen by default."""
        full = self.named_parameters(prefix)
        return {
            k: v
            for k, v in full.items()
            if k[len(prefix):] not in ("Wq", "Wk", "Wv", "Wo")
        }


def init_conv_gla_params(
    rng: np.random.Generator,
    d_model: int,
    n_heads: int,
    *,
    d_feat: int | None = None,
    kernel_width: int = 4,
    gate_rank: int = 32,
    share_conv: bool = False,
    share_linear: bool = True,
    use_rope: bool = False,
    rope_theta: float = 10000.0,
    hybrid_window: int | None = None,
    feature_kind: str = "softmax_featdim",
    use_conv: bool = True,
    normalize: bool = True,
    init_std: float = 0.02,
) -> ConvGLAParams:
    """Fresh layer. Conv kernels start as the identity tap (the layer is a
    no-op mixer at init); gates start near 0.95 via the bias term."""
    if d_model % n_heads:
        raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
    if kernel_width < 1:
        raise ConfigError(f"kernel_width must be >= 1, got {kernel_width}")
    if gate_rank < 1:
        raise ConfigError(f"gate_rank must be >= 1, got {gate_rank}")
    if feature_kind not in FEATURE_KINDS:
        raise ConfigError(f"feature_kind {feature_kind!r} not in {FEATURE_KINDS}")
    if hybrid_window is not None and hybrid_window < 1:
        raise ConfigError(f"hybrid_window must be >= 1, got {hybrid_window}")
    d_head = d_model // n_heads
    if d_feat is None:
        d_feat = d_head

    def p(*shape):
        return Tensor(rng.normal(0.0, init_std, shape), requires_grad=True)

    conv_q = np.zeros((n_heads, d_head, kernel_width))
    conv_q[:, :, 0] = 1.0
    conv_q = Tensor(conv_q, requires_grad=True)
    conv_k = conv_q if share_conv else Tensor(conv_q.data.copy(), requires_grad=True)
    gate_b = Tensor(np.full((n_heads, d_feat), GATE_INIT_BIAS), requires_grad=True)
    return ConvGLAParams(
        Wq=p(n_heads, d_model, d_head),
        Wk=p(n_heads, d_model, d_head),
        Wv=p(n_heads, d_model, d_head),
        Wo=p(n_heads * d_head, d_model),
        conv_q=conv_q,
        conv_k=conv_k,
        W_phi=p(n_heads, d_head, d_feat),
        W_phi_k=None if share_linear else p(n_heads, d_head, d_feat),
        gate_W1=p(n_heads, d_model, gate_rank),
        gate_W2=p(n_heads, gate_rank, d_feat),
        gate_b=gate_b,
        share_conv=share_conv,
        share_linear=share_linear,
        use_rope=use_rope,
        rope_theta=rope_theta,
        hybrid_window=hybrid_window,
        feature_kind=feature_kind,
        use_conv=use_conv,
        normalize=normalize,
    )


# ---------------------------------------------------------------------------
# recurrent state


@dataclass
class GlaState:
    """Constant-size per-sequence state: S is the KV accumulator, z the
    normalizer accumulator, t the number of tokens absorbed."""

    S: np.ndarray  # [..., d_feat, d_head]
    z: np.ndarray  # [..., d_feat]
    t: int = 0


def init_gla_state(n_heads: int, d_feat: int, d_head: int) -> GlaState:
    return GlaState(np.zeros((n_heads, d_feat, d_head)), np.zeros((n_heads, d_feat)))


@dataclass
class ConvCache:
    """Last r pre-conv q/k vectors, newest last. Zero-filled at start, which
    reproduces the batch path's zero padding."""

    q_ring: np.ndarray  # [H, r, d_head]
    k_ring: np.ndarray


@dataclass
class WindowCache:
    """Hybrid-arm ring buffers over the last `window` tokens, newest last."""

    k: np.ndarray  # [H, W, d_head] (post-rope)
    v: np.ndarray  # [H, W, d_head]
    kdot: np.ndarray  # [H, W, d_feat]
    g: np.ndarray  # [H, W, d_feat]


@dataclass
class StreamState:
    gla: GlaState
    conv: ConvCache
    win: Optional[WindowCache] = None


def init_stream_state(p: ConvGLAParams) -> StreamState:
    h, dh, f = p.n_heads, p.d_head, p.d_feat
    r = p.kernel_width - 1
    win = None
    if p.hybrid_window is not None:
        w = p.hybrid_window
        win = WindowCache(
            k=np.zeros((h, w, dh)),
            v=np.zeros((h, w, dh)),
            kdot=np.zeros((h, w, f)),
            g=np.zeros((h, w, f)),
        )
    return StreamState(
        gla=init_gla_state(h, f, dh),
        conv=ConvCache(np.zeros((h, r, dh)), np.zeros((h, r, dh))),
        win=win,
    )


# ---------------------------------------------------------------------------
# primitives


def causal_conv1d(x, kernel, prefix: np.ndarray | None = None):
    """Depthwise causal conv along the time axis, no bias.

    x: [..., N, d]; kernel: [..., d, K] with tap 0 on the current position
    and taps 1..K-1 reaching back. Start is zero-padded unless ``prefix``
    supplies the K-1 inputs before x (newest last). Tensor in → Tensor out
    (differentiable in x and kernel); ndarray in → ndarray out.
    """
    k_width = (kernel.shape if isinstance(kernel, Tensor) else np.shape(kernel))[-1]
    if k_width < 1:
        raise ConfigError(f"conv kernel width must be >= 1, got {k_width}")
    if isinstance(x, Tensor) or isinstance(kernel, Tensor):
        xt = x if isinstance(x, Tensor) else Tensor(x)
        kt = kernel if isinstance(kernel, Tensor) else Tensor(kernel)
        return _conv_tensor(xt, kt, prefix)
    return _conv_np(np.asarray(x, dtype=np.float64), np.asarray(kernel, dtype=np.float64), prefix)


def _padded(xd: np.ndarray, k_width: int, prefix) -> np.ndarray:
    r = k_width - 1
    if prefix is None:
        prefix = np.zeros(xd.shape[:-2] + (r, xd.shape[-1]))
    else:
        prefix = np.asarray(prefix, dtype=np.float64)
        if prefix.shape[-2] != r:
            raise ShapeError(f"prefix time dim {prefix.shape} != kernel reach ({r},)")
        prefix = np.broadcast_to(prefix, xd.shape[:-2] + prefix.shape[-2:])
    return np.concatenate([prefix, xd], axis=-2)


def _conv_np(xd, kd, prefix):
    n = xd.shape[-2]
    k_width = kd.shape[-1]
    xp = _padded(xd, k_width, prefix)
    y = np.zeros(np.broadcast_shapes(xd.shape[:-2], kd.shape[:-2]) + xd.shape[-2:])
    for d in range(k_width):
        start = k_width - 1 - d
        y += kd[..., None, :, d] * xp[..., start : start + n, :]
    return y


def _conv_tensor(x: Tensor, kernel: Tensor, prefix) -> Tensor:
    xd, kd = x.data, kernel.data
    n, k_width = xd.shape[-2], kd.shape[-1]
    xp = _padded(xd, k_width, prefix)
    out = _conv_np(xd, kd, prefix)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gxp = np.zeros(g.shape[:-2] + (xp.shape[-2], xp.shape[-1]))
            for d in range(k_width):
                start = k_width - 1 - d
                gxp[..., start : start + n, :] += kd[..., None, :, d] * g
            _accum(x, _unbroadcast(gxp[..., k_width - 1 :, :], x.shape))
        if kernel.requires_grad:
            gk = np.empty(g.shape[:-2] + (xd.shape[-1], k_width))
            for d in range(k_width):
                start = k_width - 1 - d
                gk[..., d] = (g * xp[..., start : start + n, :]).sum(axis=-2)
            _accum(kernel, _unbroadcast(gk, kernel.shape))

    return from_op("causal_conv1d", out, (x, kernel), backward)


def one_plus_elu(x):
    """1 + ELU: y+1 for y >= 0, exp(y) below — strictly positive."""
    if not isinstance(x, Tensor):
        y = np.asarray(x, dtype=np.float64)
        return np.where(y >= 0, y + 1.0, np.exp(np.minimum(y, 0.0)))
    data = np.where(x.data >= 0, x.data + 1.0, np.exp(np.minimum(x.data, 0.0)))

    def backward(g: np.ndarray) -> None:
        _accum(x, g * np.where(x.data >= 0, 1.0, np.exp(np.minimum(x.data, 0.0))))

    return from_op("one_plus_elu", data, (x,), backward)


def feature_map(x, w_phi, kind: str = "softmax_featdim"):
    """Linear projection into feature space plus the positivity nonlinearity.

    softmax_featdim rows are strictly positive and sum to 1; one_plus_elu is
    strictly positive; identity is the ablation escape hatch (can break
    normalizer positivity — that's what the ε clamp is for).
    """
    if kind not in FEATURE_KINDS:
        raise ConfigError(f"feature_kind {kind!r} not in {FEATURE_KINDS}")
    ops = _ops(x, w_phi)
    y = ops.matmul(x, w_phi)
    if kind == "softmax_featdim":
        return ops.softmax(y, axis=-1)
    if kind == "one_plus_elu":
        return one_plus_elu(y)
    return y


def gate_values(x, w1, w2, b=None):
    """Forget gate sigmoid(x·W1·W2 [+ b]): strictly in (0,1), one value per
    feature channel, broadcast across value channels by the recurrence."""
    ops = _ops(x, w1, w2)
    pre = ops.matmul(ops.matmul(x, w1), w2)
    if b is not None:
        pre = pre + b
    return ops.sigmoid(pre)


# ---------------------------------------------------------------------------
# evaluation paths


def gla_step(state: GlaState, qd, kd, v, g, eps: float = EPS, normalize: bool = True):
    """One token through the recurrence (plain numpy, used for streaming).

    qd/kd/g: [..., d_feat], v: [..., d_head]; leading dims (e.g. heads) are
    broadcast. Returns (o: [..., d_head], new state).
    """
    S = g[..., :, None] * state.S + kd[..., :, None] * v[..., None, :]
    z = g * state.z + kd
    if not (np.isfinite(S.sum()) and np.isfinite(z.sum())):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(S.sum(axis=(-2, -1)))))
        head = bad[0].tolist() if bad.size else "?"
        raise NumericError(f"non-finite GLA state at t={state.t + 1}, head {head}")
    num = (qd[..., :, None] * S).sum(axis=-2)
    if normalize:
        den = np.maximum((qd * z).sum(axis=-1), eps)
        o = num / den[..., None]
    else:
        o = num
    return o, GlaState(S, z, state.t + 1)


def _state_arrays(init: Optional[GlaState], qd, d_head, tensor_path: bool):
    lead = qd.shape[:-2]
    f = qd.shape[-1]
    if init is None:
        S = np.zeros(lead + (f, d_head))
        z = np.zeros(lead + (f,))
        t0 = 0
    else:
        S, z, t0 = init.S, init.z, init.t
        if S.shape != lead + (f, d_head):
            raise ShapeError(f"init state S {S.shape} incompatible with inputs {qd.shape}")
    if tensor_path:
        # continuation states are data, not differentiable inputs
        return Tensor(S), Tensor(z), t0
    return S.copy(), z.copy(), t0


def gla_scan_recurrent(qd, kd, v, g, init: Optional[GlaState] = None,
                       eps: float = EPS, normalize: bool = True):
    """Fold of the recurrence over time; the ground-truth sequential order.

    qd/kd/g: [..., N, d_feat], v: [..., N, d_head]. Tensor inputs run on the
    autodiff tape; plain arrays take the fast numpy path. Returns
    (O: [..., N, d_head], final GlaState) — the state continues a sequence.
    """
    tensor_path = isinstance(qd, Tensor) or isinstance(v, Tensor) or isinstance(g, Tensor)
    n = qd.shape[-2]
    d_head = v.shape[-1]
    S, z, t0 = _state_arrays(init, qd, d_head, tensor_path)
    ops = _ops(qd, v, g)
    outs = []
    for t in range(n):
        qt, kt = qd[..., t, :], kd[..., t, :]
        vt, gt = v[..., t, :], g[..., t, :]
        S = gt[..., :, None] * S + kt[..., :, None] * vt[..., None, :]
        z = gt * z + kt
        num = (qt[..., :, None] * S).sum(axis=-2)
        if normalize:
            den = ops.clamp_min((qt * z).sum(axis=-1), eps)
            o = num / den[..., None]
        else:
            o = num
        outs.append(o[..., None, :])
        if not tensor_path and (t % 512 == 511) and not np.isfinite(S.sum()):
            raise NumericError(f"non-finite GLA state at t={t0 + t + 1}")
    if not tensor_path and not np.isfinite(S.sum()):
        raise NumericError(f"non-finite GLA state at t={t0 + n}")
    out = ops.concatenate(outs, axis=-2)
    final = GlaState(
        S.data.copy() if tensor_path else S,
        z.data.copy() if tensor_path else z,
        t0 + n,
    )
    return out, final


def gla_parallel_oracle(qd, kd, v, g, eps: float = EPS,
                        hard_cap: int = ORACLE_HARD_CAP, normalize: bool = True):
    """Quadratic reference: materialise the inter-position gate products J,
    normalise the score rows, then weight the values. Plain numpy only —
    this path must stay independent of the scan code.

    g may be [..., N, d_feat] (vector gates, the production shape) or
    [..., N, d_feat, d_head] (full-matrix gates, used solely to cross-check
    that the broadcast-gate normalizer identity holds).
    """
    qd, kd = np.asarray(qd, dtype=np.float64), np.asarray(kd, dtype=np.float64)
    v, g = np.asarray(v, dtype=np.float64), np.asarray(g, dtype=np.float64)
    n = qd.shape[-2]
    if n > hard_cap:
        raise OracleSizeError(f"oracle limited to N <= {hard_cap}, got {n}")
    full_matrix = g.ndim == qd.ndim + 1
    lead = qd.shape[:-2]
    out = np.empty(lead + (n, v.shape[-1]))
    for idx in np.ndindex(lead):
        out[idx] = _oracle_one(qd[idx], kd[idx], v[idx], g[idx], eps, full_matrix, normalize)
    return out


def _gate_products(g: np.ndarray) -> np.ndarray:
    """J[t, i] = prod_{z=i+1..t} g[z] for i <= t (J[t,t] = 1), zeros above."""
    n = g.shape[0]
    J = np.zeros((n, n) + g.shape[1:])
    J[0, 0] = 1.0
    for t in range(1, n):
        J[t, : t] = J[t - 1, : t] * g[t]
        J[t, t] = 1.0
    return J


def _oracle_one(qd, kd, v, g, eps, full_matrix, normalize):
    n = qd.shape[0]
    J = _gate_products(g)
    if full_matrix:
        # scores per value channel; Eq. 8 normalizer is the column mean
        num_scores = np.einsum("tf,tifh,if->tih", qd, J, kd)
        den = np.maximum(num_scores.mean(axis=-1).sum(axis=1), eps)
        if not normalize:
            return np.einsum("tih,ih->th", num_scores, v)
        return np.einsum("tih,ih->th", num_scores / den[:, None, None], v)
    scores = np.einsum("tf,tif,if->ti", qd, J, kd)
    if not normalize:
        return scores @ v
    weights = scores / np.maximum(scores.sum(axis=1), eps)[:, None]
    return weights @ v


def oracle_attention_weights(qd, kd, g, eps: float = EPS) -> np.ndarray:
    """Normalized [N, N] attention-weight matrix (single head) for dumping."""
    qd, kd, g = (np.asarray(a, dtype=np.float64) for a in (qd, kd, g))
    if qd.ndim != 2:
        raise ShapeError(f"weights dump expects a single head [N, d_feat], got {qd.shape}")
    J = _gate_products(g)
    scores = np.einsum("tf,tif,if->ti", qd, J, kd)
    return scores / np.maximum(scores.sum(axis=1), eps)[:, None]


def dump_weights_csv(path, weights: np.ndarray) -> None:
    np.savetxt(path, weights, delimiter=",")


def _chunk_mask(c: int) -> np.ndarray:
    # additive, applied before exp: -1e9 drives masked decays to exactly 0
    return np.triu(np.full((c, c), MASK_VALUE), k=1)[:, :, None]


def gla_scan_chunked(qd, kd, v, g, chunk: int, init: Optional[GlaState] = None,
                     eps: float = EPS, normalize: bool = True):
    """Chunkwise evaluation: quadratic inside each chunk (log-space pairwise
    gate decays, always exponentiating non-positive numbers) plus a carried
    state between chunks. Matches the recurrent fold to ~1e-12 and is the
    cheap path for training (few tape nodes) and long prefill.
    """
    if not isinstance(chunk, (int, np.integer)) or chunk < 1:
        raise ConfigError(f"chunk must be a positive int, got {chunk!r}")
    tensor_path = isinstance(qd, Tensor) or isinstance(v, Tensor) or isinstance(g, Tensor)
    ops = _ops(qd, v, g)
    n = qd.shape[-2]
    d_head = v.shape[-1]
    S, z, t0 = _state_arrays(init, qd, d_head, tensor_path)
    outs = []
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        c = e - s
        qc, kc = qd[..., s:e, :], kd[..., s:e, :]
        vc, gc = v[..., s:e, :], g[..., s:e, :]
        # clamp before the log: a saturated sigmoid gate underflows to 0.0
        # exactly, and the true decay limit is 0 anyway (exp(-27.6) ~ 1e-12)
        lc = ops.cumsum(ops.log(ops.clamp_min(gc, GATE_LOG_FLOOR)), axis=-2)  # [..., c, F]
        decay = ops.exp(lc[..., :, None, :] - lc[..., None, :, :] + _chunk_mask(c))
        scores = (qc[..., :, None, :] * decay * kc[..., None, :, :]).sum(axis=-1)
        carry = ops.exp(lc)  # J from the chunk start, per position
        q_carried = qc * carry
        num = ops.matmul(scores, vc) + ops.matmul(q_carried, S)
        if normalize:
            den = scores.sum(axis=-1) + (q_carried * z[..., None, :]).sum(axis=-1)
            o = num / ops.clamp_min(den, eps)[..., None]
        else:
            o = num
        outs.append(o)
        to_end = decay[..., -1, :, :]  # J from each in-chunk position to the chunk end
        k_decayed = kc * to_end
        tail = carry[..., -1:, :]  # [..., 1, F]
        swap = tuple(range(tail.ndim - 2)) + (tail.ndim - 1, tail.ndim - 2)
        S = tail.transpose(swap) * S + ops.matmul(k_decayed.transpose(swap), vc)
        z = tail[..., 0, :] * z + k_decayed.sum(axis=-2)
    out = ops.concatenate(outs, axis=-2)
    final = GlaState(
        S.data.copy() if tensor_path else S,
        z.data.copy() if tensor_path else z,
        t0 + n,
    )
    return out, final


# ---------------------------------------------------------------------------
# full layer


def _project_heads(x, w, tensor_path: bool):
    # x: [..., N, d_model], w: [H, d_model, d] -> [..., H, N, d]
    wa = w if tensor_path else w.data
    return _ops(x, wa).matmul(x[..., None, :, :], wa)


def conv_gla_attention(x, p: ConvGLAParams, mode: str = "chunked", chunk: int = 16):
    """Full layer forward: x [..., N, d_model] -> [..., N, d_model].

    mode selects the evaluation path (recurrent / chunked / oracle; oracle
    is numpy-only and does not backprop). With ``hybrid_window`` set the
    layer instead runs the joint window+linear score path, which has one
    quadratic construction regardless of mode.
    """
    if mode not in ("recurrent", "chunked", "oracle"):
        raise ConfigError(f"unknown mode {mode!r}")
    tensor_path = isinstance(x, Tensor)
    ops = _ops(x)
    get = (lambda t: t) if tensor_path else (lambda t: t.data)
    n = x.shape[-2]
    h, dh = p.n_heads, p.d_head

    q = _project_heads(x, p.Wq, tensor_path)
    k = _project_heads(x, p.Wk, tensor_path)
    v = _project_heads(x, p.Wv, tensor_path)
    if p.use_rope:
        q = rope_apply(q, theta=p.rope_theta)
        k = rope_apply(k, theta=p.rope_theta)
        if not tensor_path:
            q, k = q.data, k.data
    qc = causal_conv1d(q, get(p.conv_q)) if p.use_conv else q
    kc = causal_conv1d(k, get(p.conv_k)) if p.use_conv else k
    qdot = feature_map(qc, get(p.W_phi), p.feature_kind)
    kdot = feature_map(kc, get(p.w_phi_for_keys()), p.feature_kind)
    b = p.gate_b.reshape(h, 1, p.d_feat) if tensor_path else p.gate_b.data.reshape(h, 1, -1)
    g = gate_values(x[..., None, :, :], get(p.gate_W1), get(p.gate_W2), b)

    if p.hybrid_window is not None:
        o = _hybrid_forward(q, k, qdot, kdot, v, g, p.hybrid_window,
                            normalize=p.normalize)
    elif mode == "recurrent":
        o, _ = gla_scan_recurrent(qdot, kdot, v, g, normalize=p.normalize)
    elif mode == "chunked":
        o, _ = gla_scan_chunked(qdot, kdot, v, g, chunk=chunk, normalize=p.normalize)
    else:
        o_np = gla_parallel_oracle(
            qdot.data if tensor_path else qdot,
            kdot.data if tensor_path else kdot,
            v.data if tensor_path else v,
            g.data if tensor_path else g,
            normalize=p.normalize,
        )
        o = Tensor(o_np) if tensor_path else o_np

    # [..., H, N, dh] -> [..., N, H*dh] -> output projection
    perm = tuple(range(o.ndim - 3)) + (o.ndim - 2, o.ndim - 3, o.ndim - 1)
    merged = o.transpose(perm).reshape(o.shape[:-3] + (n, h * dh))
    return ops.matmul(merged, get(p.Wo))


def _hybrid_forward(q, k, qdot, kdot, v, g, window: int, scale: float | None = None,
                    eps: float = EPS, normalize: bool = True):
    """Joint-normalization hybrid: exp similarity inside the window, gated
    linear similarity (with the full gate decay) beyond it, one shared
    denominator. Quadratic in N — ablation arm, not the long-context path.
    """
    ops = _ops(q, v, g)
    n = q.shape[-2]
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    ti = np.arange(n)[:, None] - np.arange(n)[None, :]  # t - i
    in_win = (ti >= 0) & (ti < window)
    win_mask = np.where(in_win, 0.0, MASK_VALUE)
    lin_mask = np.where(ti >= window, 0.0, MASK_VALUE)[:, :, None]

    swap = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    soft = ops.exp(ops.matmul(q, k.transpose(swap)) * scale + win_mask)
    lc = ops.cumsum(ops.log(ops.clamp_min(g, GATE_LOG_FLOOR)), axis=-2)
    decay = ops.exp(lc[..., :, None, :] - lc[..., None, :, :] + lin_mask)
    lin = (qdot[..., :, None, :] * decay * kdot[..., None, :, :]).sum(axis=-1)
    scores = soft + lin
    num = ops.matmul(scores, v)
    if not normalize:
        return num
    den = ops.clamp_min(scores.sum(axis=-1), eps)
    return num / den[..., None]


# ---------------------------------------------------------------------------
# streaming


def stream_step(x_t: np.ndarray, p: ConvGLAParams, state: StreamState):
    """One token through the layer with constant-size state.

    x_t: [d_model]. Returns (y_t: [d_model], advanced state). Matches the
    batch recurrent path to float precision; state footprint is
    O(d_feat·d_head + r·d_head [+ window caches]) per head, independent of t.
    """
    if state.gla.S.shape[0] != p.n_heads:
        raise ConfigError(
            f"state has {state.gla.S.shape[0]} heads, params have {p.n_heads}"
        )
    x_t = np.asarray(x_t, dtype=np.float64)
    h, dh, f = p.n_heads, p.d_head, p.d_feat
    t = state.gla.t
    x_row = x_t[None, :]  # [1, d_model]
    q = np.matmul(x_row, p.Wq.data)  # [H, 1, dh]
    k = np.matmul(x_row, p.Wk.data)
    v = np.matmul(x_row, p.Wv.data)
    if p.use_rope:
        pos = np.array([t])
        q = rope_apply(q, pos=pos, theta=p.rope_theta).data
        k = rope_apply(k, pos=pos, theta=p.rope_theta).data
    conv = state.conv
    if p.use_conv:
        qc = causal_conv1d(q, p.conv_q.data, prefix=conv.q_ring)
        kc = causal_conv1d(k, p.conv_k.data, prefix=conv.k_ring)
    else:
        qc, kc = q, k
    r = p.kernel_width - 1
    if r > 0:
        conv = ConvCache(
            np.concatenate([conv.q_ring[:, 1:], q], axis=1),
            np.concatenate([conv.k_ring[:, 1:], k], axis=1),
        )
    qdot = feature_map(qc, p.W_phi.data, p.feature_kind)[:, 0]  # [H, F]
    kdot = feature_map(kc, p.w_phi_for_keys().data, p.feature_kind)[:, 0]
    g = gate_values(x_row, p.gate_W1.data, p.gate_W2.data,
                    p.gate_b.data.reshape(h, 1, f))[:, 0]
    v = v[:, 0]

    if p.hybrid_window is None:
        o, gla = gla_step(state.gla, qdot, kdot, v, g, normalize=p.normalize)
        new_state = StreamState(gla, conv)
    else:
        o, gla, win = _hybrid_stream_step(
            state, qdot, kdot, v, g, q[:, 0], k[:, 0], p, t
        )
        new_state = StreamState(gla, conv, win)
    y = np.matmul(o.reshape(1, h * dh), p.Wo.data)[0]
    return y, new_state


def _hybrid_stream_step(state, qdot, kdot, v, g, q_rot, k_rot, p, t):
    w = p.hybrid_window
    win = state.win
    scale = 1.0 / math.sqrt(p.d_head)
    # token t-w leaves the window: fold it into the linear state with the
    # full decay J_{t-w,t} = prod of gates over (t-w, t]
    S, z = state.gla.S, state.gla.z
    S = g[..., :, None] * S
    z = g * z
    if t >= w:
        j = np.prod(win.g[:, 1:], axis=1) * g  # gates t-w+1..t-1, then t
        k_inj = j * win.kdot[:, 0]
        S = S + k_inj[..., :, None] * win.v[:, 0][..., None, :]
        z = z + k_inj
    num = (qdot[..., :, None] * S).sum(axis=-2)
    den = (qdot * z).sum(axis=-1)
    # in-window softmax part: ring tokens t-w+1..t-1 plus the current token
    m = min(t, w - 1)
    if m > 0:
        keys = win.k[:, w - m :]
        vals = win.v[:, w - m :]
        s = np.exp(np.einsum("hd,hjd->hj", q_rot, keys) * scale)
        num = num + np.einsum("hj,hjd->hd", s, vals)
        den = den + s.sum(axis=1)
    s_self = np.exp((q_rot * k_rot).sum(axis=-1) * scale)
    num = num + s_self[:, None] * v
    den = den + s_self
    if p.normalize:
        o = num / np.maximum(den, EPS)[:, None]
    else:
        o = num
    win = WindowCache(
        k=np.concatenate([win.k[:, 1:], k_rot[:, None]], axis=1),
        v=np.concatenate([win.v[:, 1:], v[:, None]], axis=1),
        kdot=np.concatenate([win.kdot[:, 1:], kdot[:, None]], axis=1),
        g=np.concatenate([win.g[:, 1:], g[:, None]], axis=1),
    )
    return o, GlaState(S, z, t + 1), win
