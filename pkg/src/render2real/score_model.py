"""Score-estimator contract, conditioning types and the bundled toy backbone."""

from __future__ import annotations

import contextlib
import hashlib
import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, Protocol, runtime_checkable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import Latent, NoiseSchedule, StepPlan, ddim_step

NEGATIVE_EMBEDDING_TOKENS = 75


class ScoreModelError(RuntimeError):
    pass


class ConcurrentRunError(ScoreModelError):
    """A hooked model is already bound to another pipeline run."""


class TraceError(ScoreModelError):
    pass


class EmbeddingKind(str, Enum):
    NULL = "null"
    NEGATIVE_DOMAIN = "negative_domain"
    CAPTION = "caption"


class AttentionMode(str, Enum):
    PASSTHROUGH = "passthrough"
    RECORD = "record"
    INJECT = "inject"


@dataclass
class ConditioningEmbedding:
    tokens: torch.Tensor  # (L, d)
    kind: EmbeddingKind = EmbeddingKind.CAPTION

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(f"conditioning tokens must be (L>=1, d), got {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("conditioning tokens contain non-finite values")


@dataclass
class NegativeDomainEmbedding:
    tokens: torch.Tensor  # (75, d)
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != NEGATIVE_EMBEDDING_TOKENS:
            raise ValueError(
                f"negative domain embedding must have {NEGATIVE_EMBEDDING_TOKENS} rows, "
                f"got shape {tuple(self.tokens.shape)}"
            )

    @property
    def base_fingerprint(self) -> str | None:
        return self.training_meta.get("base_fingerprint")


@dataclass(frozen=True)
class AttentionLayerInfo:
    layer_id: str
    depth_level: int
    feature_size: int


class AttentionTrace:
    """Self-attention queries/keys captured per ``(step_index, layer_id)``.

    Append-only while recording; call :meth:`seal` once the run is complete.
    """

    def __init__(self):
        self._entries: dict[tuple[int, str], tuple[torch.Tensor, torch.Tensor]] = {}
        self._sealed = False

    def add(self, step_index: int, layer_id: str, q: torch.Tensor, k: torch.Tensor) -> None:
        if self._sealed:
            raise TraceError("trace is sealed; use a fresh AttentionTrace per run")
        key = (step_index, layer_id)
        if key in self._entries:
            raise TraceError(f"trace collision at {key}")
        if q.shape != k.shape:
            raise TraceError(f"Q/K shape mismatch at {key}: {tuple(q.shape)} vs {tuple(k.shape)}")
        self._entries[key] = (q, k)

    def seal(self) -> None:
        self._sealed = True

    @property
    def sealed(self) -> bool:
        return self._sealed

    def __getitem__(self, key: tuple[int, str]) -> tuple[torch.Tensor, torch.Tensor]:
        return self._entries[key]

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self):
        return self._entries.keys()

    def steps(self) -> list[int]:
        return sorted({s for s, _ in self._entries})


InjectionPolicy = Callable[[int, AttentionLayerInfo], bool]


@runtime_checkable
class ScoreEstimator(Protocol):
    num_train_steps: int

    def predict(self, z: torch.Tensor, t: int, cond: ConditioningEmbedding) -> torch.Tensor: ...

    def enumerate_attention_layers(self) -> list[AttentionLayerInfo]: ...

    def set_attention_mode(self, mode: AttentionMode, trace: AttentionTrace | None = None,
                           policy: InjectionPolicy | None = None) -> None: ...


class _HookState:
    def __init__(self):
        self.mode = AttentionMode.PASSTHROUGH
        self.trace: AttentionTrace | None = None
        self.policy: InjectionPolicy | None = None
        self.step = 0
        self.injected: list[tuple[int, str]] = []
        self.lock = threading.Lock()


class HookedEstimatorMixin:
    """Attention record/inject bookkeeping shared by estimators."""

    def _init_hooks(self):
        self._hook = _HookState()

    @property
    def attention_mode(self) -> AttentionMode:
        return self._hook.mode

    def set_attention_mode(self, mode, trace=None, policy=None) -> None:
        mode = AttentionMode(mode)
        if mode is not AttentionMode.PASSTHROUGH and trace is None:
            raise ValueError(f"{mode.value} mode needs a trace")
        if mode is AttentionMode.INJECT and policy is None:
            raise ValueError("inject mode needs a policy")
        self._hook.mode, self._hook.trace, self._hook.policy = mode, trace, policy
        self._hook.injected = []

    def set_step(self, step_index: int) -> None:
        self._hook.step = step_index

    def pop_injected(self) -> list[tuple[int, str]]:
        out, self._hook.injected = self._hook.injected, []
        return out

    @contextlib.contextmanager
    def hooked(self, mode, trace=None, policy=None) -> Iterator[None]:
        """Bind the estimator to one run; concurrent binding raises :class:`ConcurrentRunError`."""
        if not self._hook.lock.acquire(blocking=False):
            raise ConcurrentRunError("estimator is already bound to a running pipeline")
        try:
            self.set_attention_mode(mode, trace, policy)
            yield
        finally:
            self.set_attention_mode(AttentionMode.PASSTHROUGH)
            self._hook.step = 0
            self._hook.lock.release()

    def _attention_hook(self, info: AttentionLayerInfo, q: torch.Tensor, k: torch.Tensor):
        st = self._hook
        if st.mode is AttentionMode.PASSTHROUGH:
            return q, k
        if st.mode is AttentionMode.RECORD:
            st.trace.add(st.step, info.layer_id, q.detach().clone(), k.detach().clone())
            return q, k
        if st.policy(st.step, info):
            key = (st.step, info.layer_id)
            if key not in st.trace:
                raise TraceError(f"missing trace entry {key}")
            q_src, k_src = st.trace[key]
            if q_src.shape != q.shape or k_src.shape != k.shape:
                raise TraceError(f"injected shape {tuple(q_src.shape)} does not match {tuple(q.shape)} at {key}")
            st.injected.append(key)
            return q_src, k_src
        return q, k


# ---------------------------------------------------------------------------
# toy backbone


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    resolution: int = 32
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2)
    embed_dim: int = 32
    context_length: int = 77
    heads: int = 1
    head_dim: int = 32
    time_dim: int = 64
    num_train_steps: int = 1000

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        return cls(**d)


def _groups(c: int) -> int:
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, head_dim: int, context_dim: int | None = None):
        super().__init__()
        inner = heads * head_dim
        self.heads, self.head_dim = heads, head_dim
        self.to_q = nn.Linear(dim, inner, bias=False)
        self.to_k = nn.Linear(context_dim or dim, inner, bias=False)
        self.to_v = nn.Linear(context_dim or dim, inner, bias=False)
        self.to_out = nn.Linear(inner, dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, context=None, hook=None):
        ctx = x if context is None else context
        q, k, v = self._split(self.to_q(x)), self._split(self.to_k(ctx)), self._split(self.to_v(ctx))
        if hook is not None:
            q, k = hook(q, k)
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.to_out(out)


class AttnBlock(nn.Module):
    """Optional self-attention followed by cross-attention on the flattened feature map."""

    def __init__(self, channels: int, cfg: BackboneConfig, info: AttentionLayerInfo | None):
        super().__init__()
        self.info = info
        if info is not None:
            self.norm_self = nn.LayerNorm(channels)
            self.self_attn = Attention(channels, cfg.heads, cfg.head_dim)
        self.norm_cross = nn.LayerNorm(channels)
        self.cross_attn = Attention(channels, cfg.heads, cfg.head_dim, cfg.embed_dim)

    def forward(self, x, context, hook):
        b, c, h, w = x.shape
        tok = x.flatten(2).transpose(1, 2)
        if self.info is not None:
            info = self.info
            tok = tok + self.self_attn(self.norm_self(tok), hook=lambda q, k: hook(info, q, k))
        tok = tok + self.cross_attn(self.norm_cross(tok), context=context)
        return tok.transpose(1, 2).reshape(b, c, h, w)


class ToyUNet(HookedEstimatorMixin, nn.Module):
    """Three-level encoder/decoder with cross-attention at every level.

    Self-attention sits in the middle block and in both decoder levels; the layers
    are named ``{down|mid|up}.{level}.{block}.self``.
    """

    def __init__(self, cfg: BackboneConfig = BackboneConfig(), null_embedding: torch.Tensor | None = None):
        nn.Module.__init__(self)
        self._init_hooks()
        self.cfg = cfg
        self.num_train_steps = cfg.num_train_steps
        if len(cfg.channel_mult) != 3:
            raise ValueError("ToyUNet expects exactly three levels")
        c0, c1, c2 = (cfg.base_channels * m for m in cfg.channel_mult)
        r = cfg.resolution
        if r % 4:
            raise ValueError("resolution must be divisible by 4")
        td = cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)

        def info(kind, level):
            return AttentionLayerInfo(f"{kind}.{level}.0.self", level, r >> level)

        self.down0 = ResBlock(c0, c0, td)
        self.down0_attn = AttnBlock(c0, cfg, None)
        self.pool0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.down1 = ResBlock(c0, c1, td)
        self.down1_attn = AttnBlock(c1, cfg, None)
        self.pool1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.mid = ResBlock(c1, c2, td)
        self.mid_attn = AttnBlock(c2, cfg, info("mid", 2))
        self.up1 = ResBlock(c2 + c1, c1, td)
        self.up1_attn = AttnBlock(c1, cfg, info("up", 1))
        self.up0 = ResBlock(c1 + c0, c0, td)
        self.up0_attn = AttnBlock(c0, cfg, info("up", 0))
        self.norm_out = nn.GroupNorm(_groups(c0), c0)
        self.conv_out = nn.Conv2d(c0, cfg.in_channels, 3, padding=1)

        if null_embedding is None:
            from .data import pseudo_caption_embedding

            null_embedding = torch.from_numpy(
                pseudo_caption_embedding("", cfg.context_length, cfg.embed_dim)
            ).float()
        if tuple(null_embedding.shape) != (cfg.context_length, cfg.embed_dim):
            raise ValueError("null embedding shape does not match backbone config")
        self.register_buffer("null_embedding", null_embedding.clone())
        self.frozen = False

    # -- contract -----------------------------------------------------------

    def enumerate_attention_layers(self) -> list[AttentionLayerInfo]:
        blocks = [self.down0_attn, self.down1_attn, self.mid_attn, self.up1_attn, self.up0_attn]
        return [b.info for b in blocks if b.info is not None]

    def null_conditioning(self) -> ConditioningEmbedding:
        return ConditioningEmbedding(self.null_embedding, EmbeddingKind.NULL)

    def forward(self, x: torch.Tensor, t: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(x.dtype))
        hook = self._attention_hook
        h = self.conv_in(x)
        h0 = self.down0_attn(self.down0(h, temb), context, hook)
        h1 = self.down1_attn(self.down1(self.pool0(h0), temb), context, hook)
        h = self.mid_attn(self.mid(self.pool1(h1), temb), context, hook)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up1_attn(self.up1(torch.cat([h, h1], 1), temb), context, hook)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up0_attn(self.up0(torch.cat([h, h0], 1), temb), context, hook)
        return self.conv_out(F.silu(self.norm_out(h)))

    @torch.no_grad()
    def predict(self, z: torch.Tensor, t: int, cond: ConditioningEmbedding) -> torch.Tensor:
        return _predict(self, z, t, cond)

    def freeze(self) -> "ToyUNet":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def unfreeze(self) -> "ToyUNet":
        for p in self.parameters():
            p.requires_grad_(True)
        self.frozen = False
        return self

    def fingerprint(self) -> str:
        return tensors_fingerprint(self.state_dict())


def _predict(model: nn.Module, z: torch.Tensor, t: int, cond: ConditioningEmbedding) -> torch.Tensor:
    cfg = model.cfg
    if not 1 <= t <= model.num_train_steps:
        raise ValueError(f"timestep {t} outside the trained range [1, {model.num_train_steps}]")
    if cond.tokens.shape[-1] != cfg.embed_dim:
        raise ValueError(f"conditioning dim {cond.tokens.shape[-1]} != model embed dim {cfg.embed_dim}")
    single = z.ndim == 3
    x = z[None] if single else z
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"latent has {x.shape[1]} channels, model expects {cfg.in_channels}")
    ctx = cond.tokens.to(x.dtype).expand(x.shape[0], *cond.tokens.shape)
    tt = torch.full((x.shape[0],), t, dtype=torch.long)
    out = model(x, tt, ctx)
    return out[0] if single else out


def tensors_fingerprint(tensors: dict[str, torch.Tensor]) -> str:
    """Content hash over sorted named tensors (name, dtype, shape, bytes)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# analytic estimators used as oracles


class ConstantScoreEstimator(HookedEstimatorMixin):
    """Returns the same noise tensor everywhere; no attention layers."""

    def __init__(self, value: float | torch.Tensor = 0.0, num_train_steps: int = 1000, embed_dim: int = 4,
                 context_length: int = 77):
        self._init_hooks()
        self.value = value
        self.num_train_steps = num_train_steps
        self.null_embedding = torch.zeros(context_length, embed_dim)

    def null_conditioning(self) -> ConditioningEmbedding:
        return ConditioningEmbedding(self.null_embedding, EmbeddingKind.NULL)

    def predict(self, z, t, cond):
        if isinstance(self.value, torch.Tensor):
            return self.value.to(z.dtype).expand_as(z).clone()
        return torch.full_like(z, float(self.value))

    def enumerate_attention_layers(self):
        return []


# ---------------------------------------------------------------------------
# free functions mirroring the operation surface


def predict_noise(model: ScoreEstimator, z: Latent, t: int, cond: ConditioningEmbedding) -> torch.Tensor:
    out = model.predict(z.data, t, cond)
    if out.shape != z.data.shape:
        raise ScoreModelError(f"estimator returned shape {tuple(out.shape)} for input {tuple(z.data.shape)}")
    return out


def record_run(model, z_T: Latent, plan: StepPlan, cond: ConditioningEmbedding,
               sched: NoiseSchedule, trace: AttentionTrace | None = None) -> tuple[Latent, AttentionTrace]:
    """Unconditional DDIM sampling pass that captures every self-attention Q/K."""
    if cond.kind is not EmbeddingKind.NULL:
        raise ValueError("the recording branch runs with null conditioning")
    if len(plan) == 0:
        raise ValueError("incomplete step plan")
    trace = AttentionTrace() if trace is None else trace
    if len(trace) or trace.sealed:
        raise TraceError("trace already holds entries; pass a fresh AttentionTrace")
    z = z_T
    with model.hooked(AttentionMode.RECORD, trace):
        for i, (t, t_prev) in enumerate(plan.pairs()):
            model.set_step(i)
            z = ddim_step(z, predict_noise(model, z, t, cond), t, t_prev, sched)
    trace.seal()
    return z, trace
