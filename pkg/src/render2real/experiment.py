"""Desk-scale end-to-end experiment on the synthetic two-domain dataset.

A toy backbone is first trained on both domains (standing in for a pretrained
general-purpose model), finetuned on the realistic domain, and then a negative
domain embedding is learned on the rendered domain. Trained artifacts can be
cached on disk so several evaluations share one training run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import IdentityCodec
from .data import pseudo_caption_embedding, synthetic_arrays
from .diffusion import NoiseSchedule, make_schedule
from .dki import EMBEDDING_LR, TrainConfig, finetune_target, train_negative_embedding
from .metrics import DomainClassifier, ssim_batch, train_domain_classifier
from .rig import RIGConfig, translate_many
from .score_model import BackboneConfig, NegativeDomainEmbedding, ToyUNet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToyExperimentConfig:
    n_per_domain: int = 600
    resolution: int = 32
    n_classifier: int = 50
    n_eval: int = 50
    pretrain_steps: int = 1500
    pretrain_lr: float = 1e-3
    finetune_steps: int = 500
    finetune_lr: float = 2e-4
    # The embedding step budget sets how far v_nd drifts from the null embedding,
    # and with it the strength of guidance at a fixed scale.
    embedding_steps: int = 250
    embedding_lr: float = EMBEDDING_LR
    classifier_steps: int = 300
    batch_size: int = 16
    seed: int = 0

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def default_schedule() -> NoiseSchedule:
    return make_schedule("scaled_linear", 1000, 0.00085, 0.012)


@dataclass
class ToyData:
    rendered: torch.Tensor
    real: torch.Tensor
    captions: torch.Tensor
    n_train: int
    n_classifier: int

    @property
    def train(self) -> slice:
        return slice(0, self.n_train)

    @property
    def classifier(self) -> slice:
        return slice(self.n_train, self.n_train + self.n_classifier)

    @property
    def evaluation(self) -> slice:
        return slice(self.n_train + self.n_classifier, None)


def toy_data(cfg: ToyExperimentConfig) -> ToyData:
    n_train = cfg.n_per_domain - cfg.n_classifier - cfg.n_eval
    if n_train < 1:
        raise ValueError("n_per_domain too small for the classifier and evaluation splits")
    ren, rea, specs = synthetic_arrays(cfg.n_per_domain, cfg.resolution, cfg.seed)
    bb = BackboneConfig(resolution=cfg.resolution)
    caps = np.stack([pseudo_caption_embedding(s.caption, bb.context_length, bb.embed_dim) for s in specs])
    return ToyData(torch.from_numpy(ren), torch.from_numpy(rea), torch.from_numpy(caps), n_train, cfg.n_classifier)


@dataclass
class ToyArtifacts:
    config: ToyExperimentConfig
    data: ToyData
    base: ToyUNet
    finetuned: ToyUNet
    v_nd: NegativeDomainEmbedding
    classifier: DomainClassifier
    schedule: NoiseSchedule
    codec: IdentityCodec = field(default_factory=IdentityCodec)
    timings: dict = field(default_factory=dict)


def _train(cfg: ToyExperimentConfig, data: ToyData, sched: NoiseSchedule, timings: dict):
    codec = IdentityCodec()
    torch.manual_seed(cfg.seed)
    model = ToyUNet(BackboneConfig(resolution=cfg.resolution))
    tr = data.train
    t0 = time.perf_counter()
    mixed = torch.cat([data.rendered[tr], data.real[tr]])
    mixed_caps = torch.cat([data.captions[tr], data.captions[tr]])
    model, _ = finetune_target(model, codec, mixed, mixed_caps, TrainConfig(
        learning_rate=cfg.pretrain_lr, max_steps=cfg.pretrain_steps, batch_size=cfg.batch_size,
        seed=cfg.seed, image_resolution=(cfg.resolution, cfg.resolution)), sched)
    timings["pretrain"] = time.perf_counter() - t0
    base = ToyUNet(model.cfg, null_embedding=model.null_embedding.detach().clone())
    base.load_state_dict(model.state_dict())
    base.eval().freeze()

    t0 = time.perf_counter()
    model, _ = finetune_target(model, codec, data.real[tr], data.captions[tr], TrainConfig(
        learning_rate=cfg.finetune_lr, max_steps=cfg.finetune_steps, batch_size=cfg.batch_size,
        seed=cfg.seed + 1, image_resolution=(cfg.resolution, cfg.resolution)), sched)
    timings["finetune"] = time.perf_counter() - t0
    model.freeze()

    t0 = time.perf_counter()
    v_nd, _ = train_negative_embedding(model, codec, data.rendered[tr], TrainConfig(
        learning_rate=cfg.embedding_lr, max_steps=cfg.embedding_steps, batch_size=cfg.batch_size,
        seed=cfg.seed + 2, image_resolution=(cfg.resolution, cfg.resolution)), sched, dataset_id=f"synthetic-rendered-{cfg.seed}")
    timings["embedding"] = time.perf_counter() - t0
    return base, model, v_nd


def build_toy_experiment(cfg: ToyExperimentConfig | None = None, cache_dir: str | Path | None = None) -> ToyArtifacts:
    """Train (or load from ``cache_dir``) the base model, finetuned model, embedding and classifier."""
    cfg = cfg or ToyExperimentConfig()
    data = toy_data(cfg)
    sched = default_schedule()
    timings: dict = {}
    cached = Path(cache_dir) / cfg.key() if cache_dir is not None else None
    if cached is not None and (cached / "finetuned.ckpt").is_file() and (cached / "base.ckpt").is_file():
        base = load_checkpoint(cached / "base.ckpt").model.freeze()
        ck = load_checkpoint(cached / "finetuned.ckpt")
        finetuned, v_nd = ck.model.freeze(), ck.embeddings["negative_domain"]
        timings["loaded_from"] = str(cached)
    else:
        base, finetuned, v_nd = _train(cfg, data, sched, timings)
        if cached is not None:
            cached.mkdir(parents=True, exist_ok=True)
            save_checkpoint(cached / "base.ckpt", model=base, schedule=sched)
            save_checkpoint(cached / "finetuned.ckpt", model=finetuned, schedule=sched,
                            embeddings={"negative_domain": v_nd}, extra={"experiment": asdict(cfg)})
    t0 = time.perf_counter()
    cl = data.classifier
    clf = train_domain_classifier(data.rendered[cl], data.real[cl], steps=cfg.classifier_steps, seed=cfg.seed)
    timings["classifier"] = time.perf_counter() - t0
    return ToyArtifacts(cfg, data, base, finetuned, v_nd, clf, sched, timings=timings)


@dataclass
class EndToEndResult:
    real_probability_input: float
    real_probability_output: float
    ssim_to_input: float
    classifier_accuracy: float
    n_images: int
    seconds: float

    @property
    def realism_gain(self) -> float:
        return self.real_probability_output - self.real_probability_input

    def to_dict(self) -> dict:
        d = asdict(self)
        d["realism_gain"] = self.realism_gain
        return d


def classifier_accuracy(art: ToyArtifacts) -> float:
    ev = art.data.evaluation
    p_real = art.classifier.real_probability(art.data.real[ev])
    p_ren = art.classifier.real_probability(art.data.rendered[ev])
    return float(((p_real > 0.5).float().mean() + (p_ren < 0.5).float().mean()) / 2)


def run_end_to_end(art: ToyArtifacts, rig: RIGConfig | None = None) -> tuple[torch.Tensor, EndToEndResult]:
    """Translate the held-out rendered images and score realism and texture preservation."""
    rig = rig or RIGConfig()
    inputs = art.data.rendered[art.data.evaluation]
    t0 = time.perf_counter()
    outputs, _ = translate_many(inputs, art.finetuned, art.codec, art.v_nd, rig, art.schedule)
    res = EndToEndResult(
        real_probability_input=float(art.classifier.real_probability(inputs).mean()),
        real_probability_output=float(art.classifier.real_probability(outputs).mean()),
        ssim_to_input=float(ssim_batch(outputs, inputs).mean()),
        classifier_accuracy=classifier_accuracy(art),
        n_images=inputs.shape[0],
        seconds=time.perf_counter() - t0,
    )
    return outputs, res


def ablation_outputs(art: ToyArtifacts, images: torch.Tensor, rig: RIGConfig | None = None) -> dict[str, torch.Tensor]:
    """Full method plus the three drop-one-out variants on the same inputs."""
    rig = rig or RIGConfig()
    runs = {
        "full": (art.finetuned, rig),
        "no_finetuned_weights": (art.base, replace(rig, disable_finetuned_weights=True, fingerprint_policy="warn")),
        "no_negative_embedding": (art.finetuned, replace(rig, disable_negative_embedding=True)),
        "no_tac": (art.finetuned, replace(rig, disable_tac=True)),
    }
    out = {}
    for name, (model, cfg) in runs.items():
        out[name], _ = translate_many(images, model, art.codec, art.v_nd, cfg, art.schedule)
    return out
