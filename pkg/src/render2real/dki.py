"""Domain knowledge injection: target-domain finetuning and negative-domain embedding training."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule, add_noise_batch, sample_timesteps
from .score_model import (
    NEGATIVE_EMBEDDING_TOKENS,
    ConditioningEmbedding,
    EmbeddingKind,
    NegativeDomainEmbedding,
    ToyUNet,
)

log = logging.getLogger(__name__)

EMBEDDING_LR = 5e-4
FINETUNE_LR = 1e-5


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = FINETUNE_LR
    batch_size: int = 16
    max_steps: int = 500
    seed: int = 0
    image_resolution: tuple[int, int] = (32, 32)
    caption_dropout: float = 0.1
    loss: str = "noise_mse"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss != "noise_mse":
            raise ValueError("only the noise-prediction MSE loss is supported")
        if not 0.0 <= self.caption_dropout <= 1.0:
            raise ValueError("caption_dropout must be in [0, 1]")
        self.image_resolution = tuple(self.image_resolution)


@dataclass
class TrainReport:
    loss_curve: list[tuple[int, float]]
    wall_time: float
    param_delta: dict[str, float]
    artifact: str | None = None
    meta: dict = field(default_factory=dict)

    def windowed_means(self, window: int = 100) -> tuple[float, float]:
        losses = [l for _, l in self.loss_curve]
        w = min(window, len(losses))
        return sum(losses[:w]) / w, sum(losses[-w:]) / w

    def to_dict(self) -> dict:
        return asdict(self)


def noise_prediction_loss(model, z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                          context: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``||eps - eps_theta(z_t, t, c)||^2`` averaged over the batch; shared by every training stage."""
    z_t = add_noise_batch(z0, eps, t, sched)
    return F.mse_loss(model(z_t, t, context), eps)


def with_placeholder(null_tokens: torch.Tensor, placeholder: torch.Tensor) -> torch.Tensor:
    """Write ``placeholder`` rows into slots ``1..k`` of the null sequence (slot 0 stays the begin row)."""
    k = placeholder.shape[0]
    if k + 1 > null_tokens.shape[0]:
        raise ValueError(f"{k} placeholder rows do not fit a context of {null_tokens.shape[0]}")
    return torch.cat([null_tokens[:1].to(placeholder.dtype), placeholder, null_tokens[1 + k:].to(placeholder.dtype)], 0)


def negative_conditioning(model, v_nd: NegativeDomainEmbedding) -> ConditioningEmbedding:
    return ConditioningEmbedding(with_placeholder(model.null_embedding, v_nd.tokens), EmbeddingKind.NEGATIVE_DOMAIN)


def _snapshot(named: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in named.items()}


def _deltas(before: dict[str, torch.Tensor], after: dict[str, torch.Tensor]) -> dict[str, float]:
    out = {}
    for k, b in before.items():
        a = after[k]
        # bit-identical tensors count as zero change even when they hold inf (an unset tolerance)
        out[k] = 0.0 if torch.equal(a, b) else float((a.to(torch.float64) - b.to(torch.float64)).abs().max())
    return out


def _named_state(model, codec) -> dict[str, torch.Tensor]:
    named = {f"backbone.{k}": v for k, v in model.state_dict().items()}
    if hasattr(codec, "state_dict"):
        named.update({f"codec.{k}": v for k, v in codec.state_dict().items()})
    return named


@torch.no_grad()
def encode_all(codec, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    return torch.cat([codec.encode(images[i:i + batch_size]).data for i in range(0, images.shape[0], batch_size)])


def _check_loss(loss: torch.Tensor, step: int, t: torch.Tensor) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite loss {value} at step {step} (timesteps {t.tolist()[:8]}...); "
            "lower the learning rate or check the inputs for NaNs"
        )
    return value


def finetune_target(model: ToyUNet, codec, images: torch.Tensor, captions: torch.Tensor | None,
                    cfg: TrainConfig, sched: NoiseSchedule) -> tuple[ToyUNet, TrainReport]:
    """Update the backbone on the noise-prediction loss conditioned on caption embeddings.

    The codec and the stored null embedding are never modified. With probability
    ``cfg.caption_dropout`` a caption is swapped for the null embedding so the
    unconditional branch keeps learning the target domain.
    """
    if images.shape[0] == 0:
        raise TrainingError("empty dataset")
    if captions is not None and captions.shape[0] != images.shape[0]:
        raise TrainingError("captions and images differ in length")
    if model.frozen:
        raise TrainingError("model is frozen; unfreeze() before finetuning")
    gen = torch.Generator().manual_seed(cfg.seed)
    before = _snapshot(_named_state(model, codec))
    z_all = encode_all(codec, images)
    null = model.null_embedding.detach()
    ctx_all = captions if captions is not None else null.expand(images.shape[0], *null.shape)

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    model.train()
    curve, t0 = [], time.perf_counter()
    for step in range(cfg.max_steps):
        idx = torch.randint(0, z_all.shape[0], (cfg.batch_size,), generator=gen)
        z0 = z_all[idx]
        ctx = ctx_all[idx].clone()
        drop = torch.rand(cfg.batch_size, generator=gen) < cfg.caption_dropout
        ctx[drop] = null.to(ctx.dtype)
        t = sample_timesteps(cfg.batch_size, sched.num_train_steps, gen)
        eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
        loss = noise_prediction_loss(model, z0, t, eps, ctx, sched)
        value = _check_loss(loss, step, t)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        curve.append((step, value))
    model.eval()
    after = _named_state(model, codec)
    report = TrainReport(curve, time.perf_counter() - t0, _deltas(before, after),
                         meta={"stage": "finetune_target", "config": asdict(cfg)})
    return model, report


def _optimize_embedding(model: ToyUNet, codec, images: torch.Tensor, init: torch.Tensor,
                        cfg: TrainConfig, sched: NoiseSchedule, stage: str):
    if images.shape[0] == 0:
        raise TrainingError("empty dataset")
    if not getattr(model, "frozen", False):
        raise TrainingError("model must be frozen (call model.freeze()) before embedding training")
    gen = torch.Generator().manual_seed(cfg.seed)
    before = _snapshot(_named_state(model, codec))
    z_all = encode_all(codec, images)
    v = torch.nn.Parameter(init.clone())
    opt = torch.optim.Adam([v], lr=cfg.learning_rate)
    null = model.null_embedding.detach()
    model.eval()
    curve, t0 = [], time.perf_counter()
    for step in range(cfg.max_steps):
        idx = torch.randint(0, z_all.shape[0], (cfg.batch_size,), generator=gen)
        z0 = z_all[idx]
        t = sample_timesteps(cfg.batch_size, sched.num_train_steps, gen)
        eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
        ctx = with_placeholder(null, v).expand(cfg.batch_size, -1, -1)
        loss = noise_prediction_loss(model, z0, t, eps, ctx, sched)
        value = _check_loss(loss, step, t)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        curve.append((step, value))
    after = _named_state(model, codec)
    delta = _deltas(before, after)
    delta["embedding"] = float((v.detach() - init).abs().max())
    report = TrainReport(curve, time.perf_counter() - t0, delta, meta={"stage": stage, "config": asdict(cfg)})
    return v.detach().clone(), report


def init_negative_embedding(model: ToyUNet, seed: int = 0, rows: int = NEGATIVE_EMBEDDING_TOKENS,
                            noise_scale: float = 0.01) -> torch.Tensor:
    """Start from the null-embedding rows after the begin slot plus small Gaussian noise."""
    null = model.null_embedding.detach()
    base = null[1:1 + rows]
    rms = float(null.pow(2).mean().sqrt())
    gen = torch.Generator().manual_seed(seed)
    return base + noise_scale * rms * torch.randn(base.shape, generator=gen, dtype=base.dtype)


def train_negative_embedding(model: ToyUNet, codec, images: torch.Tensor, cfg: TrainConfig | None,
                             sched: NoiseSchedule, dataset_id: str = "rendered") -> tuple[NegativeDomainEmbedding, TrainReport]:
    """Optimize a 75-row embedding on rendered images with every network weight frozen."""
    cfg = cfg or TrainConfig(learning_rate=EMBEDDING_LR)
    init = init_negative_embedding(model, cfg.seed)
    tokens, report = _optimize_embedding(model, codec, images, init, cfg, sched, "negative_embedding")
    meta = {
        "source_dataset": dataset_id,
        "base_fingerprint": model.fingerprint(),
        "optimizer_steps": cfg.max_steps,
    }
    return NegativeDomainEmbedding(tokens, meta), report


def textual_inversion_single_concept(model: ToyUNet, codec, images: torch.Tensor, cfg: TrainConfig | None,
                                     sched: NoiseSchedule, num_tokens: int = 1) -> tuple[ConditioningEmbedding, TrainReport]:
    """Few-image, few-token embedding optimisation; returns the full conditioning sequence."""
    if not 1 <= images.shape[0] <= 10:
        raise TrainingError(f"single-concept inversion expects 1-10 images, got {images.shape[0]}")
    cfg = cfg or TrainConfig(learning_rate=EMBEDDING_LR)
    init = init_negative_embedding(model, cfg.seed, rows=num_tokens)
    tokens, report = _optimize_embedding(model, codec, images, init, cfg, sched, "textual_inversion")
    return ConditioningEmbedding(with_placeholder(model.null_embedding, tokens), EmbeddingKind.CAPTION), report
