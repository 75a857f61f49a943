"""Desk-scale language models: a softmax-attention teacher and a
conv-gated-linear-attention student sharing every non-attention weight.

Pre-norm blocks: x + attn(rms(x)), then x + mlp(rms(x)) with a silu-gated
MLP. The forward pass exposes each layer's attention sub-block output
(post output-projection, pre residual) because the distillation stage
trains directly against those tensors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .attention import ConvGLAParams, conv_gla_attention, init_conv_gla_params
from .baselines import rope_apply, softmax_attention
from .errors import ConfigError, DataError
from .serialize import load_arrays, save_arrays
from .tensor import Tensor

RMS_EPS = 1e-6
ATTN_KINDS = ("softmax_teacher", "gla_student")


@dataclass(frozen=True)
class GlaOptions:
    """Student attention hyperparameters (defaults are the recipe defaults:
    conv width 4, gate rank 32, shared feature projection, RoPE off)."""

    kernel_width: int = 4
    gate_rank: int = 32
    d_feat: Optional[int] = None
    feature_kind: str = "softmax_featdim"
    share_conv: bool = False
    share_linear: bool = True
    use_rope: bool = False
    hybrid_window: Optional[int] = None
    use_conv: bool = True
    normalize: bool = True


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_seq: int
    attn_kind: str = "softmax_teacher"
    rope: bool = True  # teacher rotary embedding
    rope_theta: float = 10000.0
    tie_embeddings: bool = False
    gla: GlaOptions = field(default_factory=GlaOptions)

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.attn_kind not in ATTN_KINDS:
            raise ConfigError(f"attn_kind {self.attn_kind!r} not in {ATTN_KINDS}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class TeacherAttn:
    Wq: Tensor  # [H, d_model, d_head]
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor  # [H*d_head, d_model]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + n: getattr(self, n) for n in ("Wq", "Wk", "Wv", "Wo")}


@dataclass
class Block:
    norm1: Tensor
    attn: "TeacherAttn | ConvGLAParams"
    norm2: Tensor
    mlp_gate: Tensor  # [d_model, d_ff]
    mlp_up: Tensor
    mlp_down: Tensor  # [d_ff, d_model]


@dataclass
class Model:
    config: ModelConfig
    embed: Tensor  # [vocab, d_model]
    blocks: list[Block]
    norm_f: Tensor
    head: Optional[Tensor]  # None when tied to the embedding

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for i, b in enumerate(self.blocks):
            pre = f"layer{i}."
            out[pre + "norm1"] = b.norm1
            out[pre + "norm2"] = b.norm2
            out.update(b.attn.named_parameters(pre + "attn."))
            out[pre + "mlp_gate"] = b.mlp_gate
            out[pre + "mlp_up"] = b.mlp_up
            out[pre + "mlp_down"] = b.mlp_down
        out["norm_f"] = self.norm_f
        if self.head is not None:
            out["head"] = self.head
        return out

    def attention_internals(self) -> dict[str, Tensor]:
        """Distill-stage trainable set (student only)."""
        out = {}
        for i, b in enumerate(self.blocks):
            if isinstance(b.attn, ConvGLAParams):
                out.update(b.attn.attention_internals(f"layer{i}.attn."))
        return out


# ---------------------------------------------------------------------------
# LoRA


@dataclass
class LoraAdapter:
    """Additive low-rank delta on a frozen base weight: (alpha/rank)·A·B.

    A starts small random, B zero, so the wrapped layer is initially
    bit-identical to the base layer.
    """

    target: str  # q | k | v | o
    A: Tensor
    B: Tensor
    rank: int = 8
    alpha: float = 16.0

    def __post_init__(self):
        if self.rank <= 0:
            raise ConfigError(f"LoRA rank must be positive, got {self.rank}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def lora_apply(base_weight, adapter: LoraAdapter, x):
    """y = x·W + (alpha/rank)·x·A·B. Base carries no gradient by contract
    (the optimizer never receives it); A and B train."""
    y = T.matmul(x, base_weight)
    return y + T.matmul(T.matmul(x, adapter.A), adapter.B) * adapter.scale


def lora_effective_weight(base: Tensor, adapter: Optional[LoraAdapter]):
    if adapter is None:
        return base
    return base + T.matmul(adapter.A, adapter.B) * adapter.scale


LoraSet = dict[int, dict[str, LoraAdapter]]  # layer index -> target -> adapter


def init_lora(rng: np.random.Generator, model: Model, rank: int = 8, alpha: float = 16.0) -> LoraSet:
    """Adapters on q,k,v,o of every layer, in the stacked-head shapes."""
    adapters: LoraSet = {}
    for i, b in enumerate(model.blocks):
        attn = b.attn
        per = {}
        for tgt, w in (("q", attn.Wq), ("k", attn.Wk), ("v", attn.Wv), ("o", attn.Wo)):
            a_shape = w.shape[:-1] + (rank,)
            b_shape = w.shape[:-2] + (rank, w.shape[-1])
            per[tgt] = LoraAdapter(
                target=tgt,
                A=Tensor(rng.normal(0.0, 0.02, a_shape), requires_grad=True),
                B=Tensor(np.zeros(b_shape), requires_grad=True),
                rank=rank,
                alpha=alpha,
            )
        adapters[i] = per
    return adapters


def lora_parameters(adapters: LoraSet) -> dict[str, Tensor]:
    out = {}
    for i, per in adapters.items():
        for tgt, ad in per.items():
            out[f"layer{i}.lora.{tgt}.A"] = ad.A
            out[f"layer{i}.lora.{tgt}.B"] = ad.B
    return out


# ---------------------------------------------------------------------------
# construction


def init_model(rng: np.random.Generator, config: ModelConfig, init_std: float = 0.02) -> Model:
    def p(*shape):
        return Tensor(rng.normal(0.0, init_std, shape), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n), requires_grad=True)

    blocks = []
    for _ in range(config.n_layers):
        if config.attn_kind == "softmax_teacher":
            attn = TeacherAttn(
                Wq=p(config.n_heads, config.d_model, config.d_head),
                Wk=p(config.n_heads, config.d_model, config.d_head),
                Wv=p(config.n_heads, config.d_model, config.d_head),
                Wo=p(config.n_heads * config.d_head, config.d_model),
            )
        else:
            g = config.gla
            attn = init_conv_gla_params(
                rng,
                config.d_model,
                config.n_heads,
                d_feat=g.d_feat,
                kernel_width=g.kernel_width,
                gate_rank=g.gate_rank,
                share_conv=g.share_conv,
                share_linear=g.share_linear,
                use_rope=g.use_rope,
                rope_theta=config.rope_theta,
                hybrid_window=g.hybrid_window,
                feature_kind=g.feature_kind,
                use_conv=g.use_conv,
                normalize=g.normalize,
                init_std=init_std,
            )
        blocks.append(
            Block(
                norm1=ones(config.d_model),
                attn=attn,
                norm2=ones(config.d_model),
                mlp_gate=p(config.d_model, config.d_ff),
                mlp_up=p(config.d_model, config.d_ff),
                mlp_down=p(config.d_ff, config.d_model),
            )
        )
    return Model(
        config=config,
        embed=p(config.vocab_size, config.d_model),
        blocks=blocks,
        norm_f=ones(config.d_model),
        head=None if config.tie_embeddings else p(config.d_model, config.vocab_size),
    )


def student_from_teacher(rng: np.random.Generator, teacher: Model,
                         gla: GlaOptions | None = None) -> Model:
    """Student sharing the teacher's values everywhere except attention
    internals: Wq/Wk/Wv/Wo are copied from the teacher (the linearization
    premise), conv kernels / feature projection / gate factors are fresh."""
    if teacher.config.attn_kind != "softmax_teacher":
        raise ConfigError("student must be derived from a softmax teacher")
    gla = gla or GlaOptions()
    config = dataclasses.replace(teacher.config, attn_kind="gla_student", gla=gla)
    student = init_model(rng, config)

    def clone(t: Tensor) -> Tensor:
        return Tensor(t.data.copy(), requires_grad=True)

    student.embed = clone(teacher.embed)
    student.norm_f = clone(teacher.norm_f)
    student.head = None if teacher.head is None else clone(teacher.head)
    for sb, tb in zip(student.blocks, teacher.blocks):
        sb.norm1 = clone(tb.norm1)
        sb.norm2 = clone(tb.norm2)
        sb.mlp_gate = clone(tb.mlp_gate)
        sb.mlp_up = clone(tb.mlp_up)
        sb.mlp_down = clone(tb.mlp_down)
        sb.attn.Wq = clone(tb.attn.Wq)
        sb.attn.Wk = clone(tb.attn.Wk)
        sb.attn.Wv = clone(tb.attn.Wv)
        sb.attn.Wo = clone(tb.attn.Wo)
    return student


# ---------------------------------------------------------------------------
# forward


def rms_norm(x, gain: Tensor):
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * ((ms + RMS_EPS) ** -0.5) * gain


def _teacher_attention(y, attn: TeacherAttn, config: ModelConfig,
                       lora: Optional[dict[str, LoraAdapter]] = None):
    lora = lora or {}
    wq = lora_effective_weight(attn.Wq, lora.get("q"))
    wk = lora_effective_weight(attn.Wk, lora.get("k"))
    wv = lora_effective_weight(attn.Wv, lora.get("v"))
    wo = lora_effective_weight(attn.Wo, lora.get("o"))
    yh = y[..., None, :, :]
    q = T.matmul(yh, wq)  # [..., H, N, dh]
    k = T.matmul(yh, wk)
    v = T.matmul(yh, wv)
    if config.rope:
        q = rope_apply(q, theta=config.rope_theta)
        k = rope_apply(k, theta=config.rope_theta)
    o = softmax_attention(q, k, v)
    perm = tuple(range(o.ndim - 3)) + (o.ndim - 2, o.ndim - 3, o.ndim - 1)
    n = y.shape[-2]
    merged = o.transpose(perm).reshape(o.shape[:-3] + (n, o.shape[-3] * o.shape[-1]))
    return T.matmul(merged, wo)


def _student_attention(y, attn: ConvGLAParams, mode: str, chunk: int,
                       lora: Optional[dict[str, LoraAdapter]] = None):
    if lora:
        attn = dataclasses.replace(
            attn,
            Wq=lora_effective_weight(attn.Wq, lora.get("q")),
            Wk=lora_effective_weight(attn.Wk, lora.get("k")),
            Wv=lora_effective_weight(attn.Wv, lora.get("v")),
            Wo=lora_effective_weight(attn.Wo, lora.get("o")),
        )
        y = y if isinstance(y, Tensor) else Tensor(y)
    return conv_gla_attention(y, attn, mode=mode, chunk=chunk)


def forward(
    model: Model,
    tokens: np.ndarray,
    mode: str = "chunked",
    chunk: int = 16,
    lora: Optional[LoraSet] = None,
    attn_override: Optional[Callable[[int, Tensor], Tensor]] = None,
    want_attn_inputs: bool = False,
):
    """tokens: int array [..., N] -> (logits [..., N, vocab], attn_outs).

    attn_outs[ℓ] is layer ℓ's attention sub-block output (post-Wo, pre
    residual add). With ``want_attn_inputs`` a third list is returned with
    each layer's post-norm attention input — the distillation interface.
    ``attn_override(ℓ, y)`` replaces the attention computation (test hook).
    """
    tokens = np.asarray(tokens)
    cfg = model.config
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= cfg.vocab_size:
        raise DataError(f"token ids outside [0, {cfg.vocab_size})")
    if tokens.shape[-1] > cfg.max_seq:
        raise ConfigError(f"sequence length {tokens.shape[-1]} exceeds max_seq {cfg.max_seq}")
    x = T.take_rows(model.embed, tokens)
    attn_outs, attn_ins = [], []
    lora = lora or {}
    for i, b in enumerate(model.blocks):
        y = rms_norm(x, b.norm1)
        if attn_override is not None:
            a = attn_override(i, y)
        elif isinstance(b.attn, TeacherAttn):
            a = _teacher_attention(y, b.attn, cfg, lora.get(i))
        else:
            a = _student_attention(y, b.attn, mode, chunk, lora.get(i))
        attn_ins.append(y)
        attn_outs.append(a)
        x = x + a
        h = rms_norm(x, b.norm2)
        m = T.matmul(T.silu(T.matmul(h, b.mlp_gate)) * T.matmul(h, b.mlp_up), b.mlp_down)
        x = x + m
    if model.blocks:
        x = rms_norm(x, model.norm_f)
    head = model.head if model.head is not None else T.transpose(model.embed)
    logits = T.matmul(x, head)
    if want_attn_inputs:
        return logits, attn_outs, attn_ins
    return logits, attn_outs


def generate_greedy(model: Model, tokens: np.ndarray, max_new: int,
                    mode: str = "chunked", lora: Optional[LoraSet] = None) -> np.ndarray:
    """Greedy continuation by repeated full forward passes (desk scale).

    tokens [..., N] -> generated ids [..., max_new].
    """
    tokens = np.asarray(tokens)
    out = []
    with T.no_grad():
        for _ in range(max_new):
            logits, _ = forward(model, tokens, mode=mode, lora=lora)
            nxt = np.argmax(logits.data[..., -1, :], axis=-1)
            out.append(nxt)
            tokens = np.concatenate([tokens, nxt[..., None]], axis=-1)
    return np.stack(out, axis=-1)


# ---------------------------------------------------------------------------
# checkpoints


def _config_meta(config: ModelConfig) -> dict:
    doc = dataclasses.asdict(config)
    return doc


def save_model(path, model: Model) -> None:
    arrays = {k: v.data for k, v in model.named_parameters().items()}
    save_arrays(path, arrays, meta={"model_config": _config_meta(model.config)})


def save_lora(path, adapters: LoraSet) -> None:
    arrays, ranks, alphas = {}, set(), set()
    for i, per in adapters.items():
        for tgt, ad in per.items():
            arrays[f"layer{i}.{tgt}.A"] = ad.A.data
            arrays[f"layer{i}.{tgt}.B"] = ad.B.data
            ranks.add(ad.rank)
            alphas.add(ad.alpha)
    if len(ranks) != 1 or len(alphas) != 1:
        raise ConfigError("mixed-rank adapter sets are not serializable")
    save_arrays(path, arrays, meta={"lora": {"rank": ranks.pop(), "alpha": alphas.pop()}})


def load_lora(path, model: Model) -> LoraSet:
    arrays, meta = load_arrays(path)
    rank = int(meta["lora"]["rank"])
    alpha = float(meta["lora"]["alpha"])
    adapters: LoraSet = {}
    for name, arr in arrays.items():
        layer, tgt, which = name.split(".")
        i = int(layer.removeprefix("layer"))
        if i >= len(model.blocks):
            raise DataError(f"adapter {name} has no matching layer")
        per = adapters.setdefault(i, {})
        ad = per.get(tgt)
        if ad is None:
            ad = per[tgt] = LoraAdapter(target=tgt, A=Tensor(np.zeros(0)), B=Tensor(np.zeros(0)),
                                        rank=rank, alpha=alpha)
        setattr(ad, which, Tensor(arr, requires_grad=True))
    return adapters


def load_model(path) -> Model:
    arrays, meta = load_arrays(path)
    doc = meta["model_config"]
    doc["gla"] = GlaOptions(**doc.get("gla") or {})
    config = ModelConfig(**doc)
    rng = np.random.default_rng(0)  # values are overwritten below
    model = init_model(rng, config)
    params = model.named_parameters()
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise DataError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, t in params.items():
        if t.data.shape != arrays[name].shape:
            raise DataError(f"shape mismatch for {name}: {t.data.shape} vs {arrays[name].shape}")
        t.data = arrays[name]
    return model
