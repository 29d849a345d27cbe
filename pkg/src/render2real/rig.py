"""Realistic image generation: DDIM inversion, negative-embedding guidance and
texture-preserving attention control over a two-branch sampler."""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import partial

import torch

from .diffusion import Latent, NoiseSchedule, StepPlan, ddim_invert_step, ddim_step, make_step_plan
from .dki import negative_conditioning
from .score_model import (
    AttentionLayerInfo,
    AttentionMode,
    ConditioningEmbedding,
    NegativeDomainEmbedding,
    record_run,
)

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


class EmbeddingFingerprintError(PipelineError):
    pass


@dataclass
class RIGConfig:
    steps: int = 50
    strength: float = 0.3
    guidance_scale: float = 7.5
    tac_ratio: float = 0.9
    feature_threshold: int | None = None  # None: pick the two shallowest self-attention levels
    disable_tac: bool = False
    disable_negative_embedding: bool = False
    disable_finetuned_weights: bool = False
    tac_window: str = "iterations"  # or "literal_t"
    fingerprint_policy: str = "fail"  # or "warn"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.strength <= 1.0:
            raise ValueError("strength must be in (0, 1]")
        if not 0.0 <= self.tac_ratio <= 1.0:
            raise ValueError("tac_ratio must be in [0, 1]")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.tac_window not in ("iterations", "literal_t"):
            raise ValueError(f"unknown tac_window {self.tac_window!r}")
        if self.fingerprint_policy not in ("fail", "warn"):
            raise ValueError(f"unknown fingerprint_policy {self.fingerprint_policy!r}")


def _ceil(x: float) -> int:
    return math.ceil(round(x, 9))


def default_feature_threshold(layers: list[AttentionLayerInfo]) -> int:
    """Largest feature size below the two shallowest self-attention levels."""
    sizes = sorted({l.feature_size for l in layers}, reverse=True)
    return sizes[2] if len(sizes) > 2 else 0


def tac_window_length(cfg: RIGConfig, n_run: int) -> int:
    return _ceil(cfg.tac_ratio * n_run)


def tac_predicate(step_index: int, t: int, layer: AttentionLayerInfo, cfg: RIGConfig, n_run: int,
                  num_train_steps: int, threshold: int) -> bool:
    """Whether the realistic branch takes the recorded Q/K at this (iteration, layer)."""
    if cfg.disable_tac or layer.feature_size <= threshold:
        return False
    if cfg.tac_window == "literal_t":
        return t < cfg.tac_ratio * num_train_steps
    return step_index < tac_window_length(cfg, n_run)


def tac_select(q_cg, k_cg, q_r, k_r, step_index: int, layer: AttentionLayerInfo, cfg: RIGConfig,
               n_run: int, t: int = 0, num_train_steps: int = 1000, threshold: int | None = None):
    """Pure selection between the recording branch's and the realistic branch's Q/K."""
    if q_cg.shape != q_r.shape or k_cg.shape != k_r.shape:
        raise PipelineError(f"Q/K shape mismatch between branches at {layer.layer_id}")
    thr = cfg.feature_threshold if threshold is None else threshold
    if thr is None:
        raise ValueError("feature threshold unresolved")
    if tac_predicate(step_index, t, layer, cfg, n_run, num_train_steps, thr):
        return q_cg, k_cg
    return q_r, k_r


def guided_epsilon(model, z: torch.Tensor, t: int, neg: ConditioningEmbedding | None, w: float,
                   null: ConditioningEmbedding | None = None) -> torch.Tensor:
    """``w * eps(z, t, null) + (1 - w) * eps(z, t, neg)``."""
    null = null if null is not None else model.null_conditioning()
    e_null = model.predict(z, t, null)
    if neg is None:
        if w != 1:
            raise PipelineError("negative domain embedding required when guidance scale != 1")
        return e_null
    e_neg = model.predict(z, t, neg)
    return w * e_null + (1 - w) * e_neg


def _checksum(x: torch.Tensor) -> str:
    return hashlib.sha256(x.detach().contiguous().numpy().tobytes()).hexdigest()[:16]


def _rms(x: torch.Tensor) -> float:
    return float(x.double().pow(2).mean().sqrt())


@dataclass
class StepRecord:
    step_index: int
    timestep: int
    timestep_prev: int
    injected_layers: list[str]
    r_latent_rms: float
    cg_latent_rms: float | None = None


@dataclass
class RunReport:
    config: dict
    plan: list[int]
    feature_threshold: int
    tac_window: int
    start_checksum_cg: str | None
    start_checksum_r: str
    steps: list[StepRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    inversion_rms: list[float] = field(default_factory=list)

    def injection_set(self) -> set[tuple[int, str]]:
        return {(s.step_index, l) for s in self.steps for l in s.injected_layers}

    def to_dict(self) -> dict:
        return asdict(self)


def check_embedding_fingerprint(model, v_nd: NegativeDomainEmbedding | None, cfg: RIGConfig) -> str | None:
    if v_nd is None or v_nd.base_fingerprint is None or not hasattr(model, "fingerprint"):
        return None
    fp = model.fingerprint()
    if fp == v_nd.base_fingerprint:
        return None
    msg = f"negative embedding was trained on model {v_nd.base_fingerprint[:12]}, got {fp[:12]}"
    if cfg.fingerprint_policy == "fail" and not cfg.disable_finetuned_weights:
        raise EmbeddingFingerprintError(msg)
    warnings.warn(msg, stacklevel=3)
    return msg


@torch.no_grad()
def invert(model, z0: Latent, plan: StepPlan, sched: NoiseSchedule, cond: ConditioningEmbedding,
           rms_log: list | None = None) -> Latent:
    """DDIM inversion of a clean latent up to the plan's noisiest level."""
    z = z0
    for t, t_prev in reversed(plan.pairs()):
        z = ddim_invert_step(z, model.predict(z.data, t, cond), t, t_prev, sched)
        if rms_log is not None:
            rms_log.append(_rms(z.data))
    return z


@dataclass
class TranslateResult:
    image: torch.Tensor
    report: RunReport
    cg_image: torch.Tensor | None = None


@torch.no_grad()
def translate(x_cg: torch.Tensor, model, codec, v_nd: NegativeDomainEmbedding | None, cfg: RIGConfig,
              sched: NoiseSchedule, return_cg: bool = False):
    """Translate a rendered image (or batch) into the realistic domain.

    Returns ``(image, report)``; with ``return_cg`` a :class:`TranslateResult` that
    also carries the recording branch's reconstruction.
    """
    use_neg = not cfg.disable_negative_embedding
    if use_neg and v_nd is None:
        raise PipelineError("negative domain embedding required (or set disable_negative_embedding)")
    notes = []
    msg = check_embedding_fingerprint(model, v_nd if use_neg else None, cfg)
    if msg:
        notes.append(msg)

    T = model.num_train_steps
    plan = make_step_plan(cfg.steps, T, cfg.strength)
    layers = model.enumerate_attention_layers()
    threshold = cfg.feature_threshold if cfg.feature_threshold is not None else default_feature_threshold(layers)
    n_run = len(plan)

    null = model.null_conditioning()
    neg = negative_conditioning(model, v_nd) if use_neg else None
    w = cfg.guidance_scale if use_neg else 1.0

    z0 = codec.encode(x_cg)
    inv_log: list[float] = []
    z_T = invert(model, z0, plan, sched, null, inv_log)

    run_cg = not cfg.disable_tac or return_cg
    trace, z_cg = None, None
    if run_cg:
        z_cg, trace = record_run(model, z_T, plan, null, sched)

    report = RunReport(
        config=asdict(cfg), plan=list(plan.indices), feature_threshold=threshold,
        tac_window=tac_window_length(cfg, n_run) if not cfg.disable_tac else 0,
        start_checksum_cg=_checksum(z_T.data) if run_cg else None, start_checksum_r=_checksum(z_T.data),
        warnings=notes, inversion_rms=inv_log,
    )

    policy = partial(_policy, cfg=cfg, plan=plan, T=T, threshold=threshold)
    z = Latent(z_T.data.clone(), z_T.timestep)
    mode = AttentionMode.PASSTHROUGH if cfg.disable_tac else AttentionMode.INJECT
    with model.hooked(mode, trace if mode is AttentionMode.INJECT else None,
                      policy if mode is AttentionMode.INJECT else None):
        for i, (t, t_prev) in enumerate(plan.pairs()):
            if trace is not None and mode is AttentionMode.INJECT:
                missing = [l.layer_id for l in layers if (i, l.layer_id) not in trace]
                if missing:
                    raise PipelineError(f"trace lacks entries for step {i}: {missing}")
            model.set_step(i)
            eps = guided_epsilon(model, z.data, t, neg, w, null)
            z = ddim_step(z, eps, t, t_prev, sched)
            injected = sorted({l for _, l in model.pop_injected()})
            report.steps.append(StepRecord(i, t, t_prev, injected, _rms(z.data)))

    image = codec.decode(z)
    if not return_cg:
        return image, report
    return TranslateResult(image, report, codec.decode(z_cg) if z_cg is not None else None)


def _policy(step_index: int, layer: AttentionLayerInfo, *, cfg: RIGConfig, plan: StepPlan, T: int,
            threshold: int) -> bool:
    t = plan.indices[step_index]
    return tac_predicate(step_index, t, layer, cfg, len(plan), T, threshold)


def translate_many(images: torch.Tensor, model, codec, v_nd, cfg: RIGConfig, sched: NoiseSchedule,
                   chunk: int = 16) -> tuple[torch.Tensor, list[RunReport]]:
    """Translate a stack of images in chunks (the attention trace is held per chunk)."""
    outs, reports = [], []
    for i in range(0, images.shape[0], chunk):
        img, rep = translate(images[i:i + chunk], model, codec, v_nd, cfg, sched)
        outs.append(img)
        reports.append(rep)
    return torch.cat(outs), reports


@dataclass
class SweepCell:
    tac_ratio: float
    strength: float
    ssim: float
    max_abs_deviation: float
    mean_abs_deviation: float


@dataclass
class SweepResult:
    grid: list[list[torch.Tensor]]  # [len(gammas)][len(strengths)]
    cells: list[SweepCell]

    def table(self) -> list[dict]:
        return [asdict(c) for c in self.cells]

    def contact_sheet(self, pad: int = 1) -> torch.Tensor:
        rows = []
        for row in self.grid:
            imgs = [_pad(img, pad) for img in row]
            rows.append(torch.cat(imgs, dim=-1))
        return torch.cat(rows, dim=-2)


def _pad(img: torch.Tensor, pad: int) -> torch.Tensor:
    return torch.nn.functional.pad(img, (pad, pad, pad, pad), value=1.0)


def sweep(x_cg: torch.Tensor, model, codec, v_nd, gammas, strengths, base_cfg: RIGConfig,
          sched: NoiseSchedule) -> SweepResult:
    """One translation per (TAC ratio, strength) pair with similarity-to-input metrics.

    ``x_cg`` is one image ``(3, H, W)`` or a batch; batch metrics are means over
    images and the contact sheet shows the first image.
    """
    from dataclasses import replace

    from .metrics import ssim_batch

    gammas, strengths = list(gammas), list(strengths)
    if not gammas or not strengths:
        raise ValueError("sweep needs non-empty parameter lists")
    if x_cg.ndim not in (3, 4):
        raise ValueError("sweep takes an image (3, H, W) or a batch (B, 3, H, W)")
    batch = x_cg if x_cg.ndim == 4 else x_cg[None]
    grid, cells = [], []
    for g in gammas:
        row = []
        for s in strengths:
            out, _ = translate(batch, model, codec, v_nd, replace(base_cfg, tac_ratio=g, strength=s), sched)
            row.append(out[0])
            dev = (out - batch).abs()
            cells.append(SweepCell(g, s, float(ssim_batch(out, batch).mean()), float(dev.max()), float(dev.mean())))
        grid.append(row)
    return SweepResult(grid, cells)
