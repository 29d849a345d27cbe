"""Command-line entry point: ``render2real <command> --config run.yaml``.

Every command reads one YAML file, applies flag overrides, writes its outputs to
a fresh ``<root>/<command>/run-NNN`` directory together with the resolved config
and a ``run.json`` summary, and exits non-zero on failure (2 for config errors).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import types
import typing
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .codec import IdentityCodec
from .data import (
    DataError,
    DatasetManifest,
    load_captions,
    load_image,
    load_images,
    load_manifest,
    make_synthetic_domains,
    save_image,
)
from .diffusion import make_schedule
from .dki import EMBEDDING_LR, TrainConfig, TrainingError, finetune_target, train_negative_embedding
from .metrics import (
    MetricError,
    ToyFeatureExtractor,
    default_kid_subsets,
    kid,
    paired_report,
    perceptual_distance_batch,
    ssim_batch,
    train_domain_classifier,
    user_study_sheets,
)
from .rig import PipelineError, RIGConfig, sweep, translate
from .score_model import BackboneConfig, ScoreModelError, ToyUNet

log = logging.getLogger("render2real")

OUTPUT_ROOT_ENV = "RENDER2REAL_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


# ---------------------------------------------------------------------------
# config schema


@dataclass
class DataSection:
    rendered: str | None = None
    real: str | None = None
    split: str | None = None
    resolution: int = 32
    n_per_domain: int = 600
    classifier_fraction: float = 0.2
    eval_fraction: float = 0.1


@dataclass
class ScheduleSection:
    kind: str = "scaled_linear"
    num_train_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012


@dataclass
class PretrainSection(TrainConfig):
    # used only when no base checkpoint is given: fit a general model on both domains first
    enabled: bool = True


@dataclass
class CheckpointSection:
    base: str | None = None
    finetuned: str | None = None
    embedding: str | None = None


@dataclass
class TranslateSection:
    inputs: str | None = None
    limit: int | None = None
    chunk: int = 16


@dataclass
class SweepSection:
    gammas: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    strengths: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    input_index: int = 0
    fixed_gamma: float = 0.9
    fixed_strength: float = 0.3


@dataclass
class EvaluateSection:
    translations: str | None = None
    baseline: str | None = None
    classifier_steps: int = 300
    kid_subset_size: int | None = None
    kid_num_subsets: int = 100
    user_study_pairs: int = 0


SECTIONS = {
    "data": DataSection,
    "schedule": ScheduleSection,
    "backbone": BackboneConfig,
    "pretrain": PretrainSection,
    "finetune": TrainConfig,
    "embedding": TrainConfig,
    "rig": RIGConfig,
    "checkpoints": CheckpointSection,
    "translate": TranslateSection,
    "sweep": SweepSection,
    "evaluate": EvaluateSection,
}
SECTION_DEFAULTS = {
    "pretrain": {"learning_rate": 1e-3, "max_steps": 1500},
    "finetune": {"learning_rate": 2e-4, "max_steps": 500},
    "embedding": {"learning_rate": EMBEDDING_LR, "max_steps": 250},
}
PATH_KEYS = {("data", "rendered"), ("data", "real"), ("data", "split"), ("checkpoints", "base"),
             ("checkpoints", "finetuned"), ("checkpoints", "embedding"), ("translate", "inputs"),
             ("evaluate", "translations"), ("evaluate", "baseline")}
STAGE_SEED_OFFSETS = {"pretrain": 0, "finetune": 1, "embedding": 2}


def _type_ok(value, hint) -> bool:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if origin is tuple:
        args = typing.get_args(hint)
        if not isinstance(value, (list, tuple)):
            return False
        if len(args) == 2 and args[1] is Ellipsis:
            return all(_type_ok(v, args[0]) for v in value)
        return len(args) == len(value) and all(_type_ok(v, a) for v, a in zip(value, args))
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is str:
        return isinstance(value, str)
    return True


def _coerce(value, hint):
    if isinstance(value, list):
        return tuple(value)
    if hint is float and isinstance(value, int):
        return float(value)
    return value


@dataclass
class RunConfig:
    seed: int
    sections: dict
    source: Path | None

    def section(self, name: str):
        return self.sections[name]

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for k, v in self.sections.items():
            out[k] = {f: (list(x) if isinstance(x, tuple) else x) for f, x in asdict(v).items()}
        return out


def parse_config(raw: dict | None, base_dir: Path | None = None) -> RunConfig:
    """Validate a config mapping; every problem is reported, keyed by its dotted path."""
    raw = raw or {}
    problems = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a mapping"])
    seed = raw.get("seed", 0)
    if not _type_ok(seed, int):
        problems.append(f"seed: expected int, got {seed!r}")
    for key in raw:
        if key != "seed" and key not in SECTIONS:
            problems.append(f"{key}: unknown config key")
    sections = {}
    for name, cls in SECTIONS.items():
        given = raw.get(name) or {}
        if not isinstance(given, dict):
            problems.append(f"{name}: expected a mapping")
            continue
        hints = typing.get_type_hints(cls)
        allowed = {f.name for f in fields(cls)}
        values = dict(SECTION_DEFAULTS.get(name, {}))
        if name in STAGE_SEED_OFFSETS and isinstance(seed, int):
            values["seed"] = seed + STAGE_SEED_OFFSETS[name]
        for key, value in given.items():
            if key not in allowed:
                problems.append(f"{name}.{key}: unknown config key")
                continue
            if not _type_ok(value, hints[key]):
                problems.append(f"{name}.{key}: expected {hints[key]}, got {value!r}")
                continue
            if (name, key) in PATH_KEYS and value is not None and base_dir is not None:
                value = str((base_dir / value).resolve()) if not os.path.isabs(value) else value
            values[key] = _coerce(value, hints[key])
        try:
            sections[name] = cls(**values)
        except (ValueError, TypeError) as e:
            problems.append(f"{name}: {e}")
    if problems:
        raise ConfigError(problems)
    return RunConfig(int(seed), sections, base_dir)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError([f"{path}: not valid YAML ({e})"]) from None
    return parse_config(raw, path.parent.resolve())


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    rig = cfg.sections["rig"]
    updates = {}
    for flag, field_name in (("gamma", "tac_ratio"), ("strength", "strength"), ("guidance_scale", "guidance_scale"),
                             ("steps", "steps")):
        if getattr(args, flag) is not None:
            updates[field_name] = getattr(args, flag)
    for flag in ("disable_tac", "disable_negative_embedding", "disable_finetuned_weights"):
        if getattr(args, flag):
            updates[flag] = True
    if args.allow_fingerprint_mismatch:
        updates["fingerprint_policy"] = "warn"
    try:
        cfg.sections["rig"] = replace(rig, **updates)
    except ValueError as e:
        raise ConfigError([f"rig: {e}"]) from None
    if args.seed is not None:
        cfg.seed = args.seed
        # an explicit --seed drives every stochastic stage
        for stage, off in STAGE_SEED_OFFSETS.items():
            cfg.sections[stage] = replace(cfg.sections[stage], seed=args.seed + off)
    return cfg


# ---------------------------------------------------------------------------
# run directories and small writers


def output_root(args_out: str | None) -> Path:
    return Path(args_out or os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT)


def new_run_dir(root: Path, command: str) -> Path:
    """Next free ``run-NNN`` directory; existing runs are never reused."""
    parent = root / command
    parent.mkdir(parents=True, exist_ok=True)
    taken = [int(p.name[4:]) for p in parent.glob("run-*") if p.name[4:].isdigit()]
    n = max(taken, default=0) + 1
    while True:
        d = parent / f"run-{n:03d}"
        try:
            d.mkdir()
            return d
        except FileExistsError:
            n += 1


def write_loss_csv(path: Path, curve) -> None:
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        w.writerows(curve)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=str))


def _need(value, what: str) -> str:
    if value is None:
        raise ConfigError([f"{what} is required for this command"])
    return value


def _schedule(cfg: RunConfig):
    s = cfg.section("schedule")
    return make_schedule(s.kind, s.num_train_steps, s.beta_start, s.beta_end)


def _load_split(cfg: RunConfig) -> dict | None:
    path = cfg.section("data").split
    if path is None:
        return None
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read split file {path}: {e}") from None


def _subset(manifest: DatasetManifest, split: dict | None, part: str) -> DatasetManifest:
    if split is None or part not in split:
        return manifest
    keep = set(split[part])
    return replace(manifest, items=[it for i, it in enumerate(manifest.items) if i in keep])


def _domain(cfg: RunConfig, which: str, part: str | None) -> DatasetManifest:
    path = _need(getattr(cfg.section("data"), which), f"data.{which}")
    m = load_manifest(path)
    return _subset(m, _load_split(cfg), part) if part else m


def _model_from(path: str | None, what: str) -> ToyUNet:
    ck = load_checkpoint(_need(path, what))
    if ck.model is None:
        raise CheckpointError(f"{path}: holds no backbone")
    return ck.model


def _embedding_from(path: str | None):
    ck = load_checkpoint(_need(path, "checkpoints.embedding"))
    if "negative_domain" not in ck.embeddings:
        raise CheckpointError(f"{path}: holds no negative domain embedding")
    return ck.embeddings["negative_domain"]


# ---------------------------------------------------------------------------
# commands


def cmd_make_toy_data(cfg: RunConfig, out: Path) -> dict:
    d, bb = cfg.section("data"), cfg.section("backbone")
    doms = make_synthetic_domains(out, d.n_per_domain, d.resolution, cfg.seed, bb.embed_dim, bb.context_length,
                                  d.classifier_fraction, d.eval_fraction)
    return {"rendered": str(out / "rendered.csv"), "real": str(out / "real.csv"), "split": str(out / "split.json"),
            "counts": {"rendered": len(doms.rendered), "real": len(doms.real)},
            "split_sizes": {k: len(v) for k, v in doms.classifier_split.items()}}


def cmd_finetune(cfg: RunConfig, out: Path) -> dict:
    sched, codec = _schedule(cfg), IdentityCodec()
    res = cfg.section("data").resolution
    real = _domain(cfg, "real", "train")
    real_imgs, real_caps = load_images(real, res), load_captions(real)
    reports = {}
    ckpts = cfg.section("checkpoints")
    artifacts = {}
    if ckpts.base is not None:
        model = _model_from(ckpts.base, "checkpoints.base").unfreeze()
    else:
        pre = cfg.section("pretrain")
        torch.manual_seed(cfg.seed)
        model = ToyUNet(replace(cfg.section("backbone"), resolution=res))
        if pre.enabled:
            ren = _domain(cfg, "rendered", "train")
            ren_imgs, ren_caps = load_images(ren, res), load_captions(ren)
            caps = torch.cat([ren_caps, real_caps]) if ren_caps is not None and real_caps is not None else None
            tc = TrainConfig(**{f.name: getattr(pre, f.name) for f in fields(TrainConfig)})
            model, rep = finetune_target(model, codec, torch.cat([ren_imgs, real_imgs]), caps, tc, sched)
            write_loss_csv(out / "loss_pretrain.csv", rep.loss_curve)
            reports["pretrain"] = rep.to_dict() | {"loss_curve": len(rep.loss_curve)}
        save_checkpoint(out / "base.ckpt", model=model, schedule=sched, codec=codec)
        artifacts["base"] = str(out / "base.ckpt")
    model, rep = finetune_target(model, codec, real_imgs, real_caps, cfg.section("finetune"), sched)
    write_loss_csv(out / "loss_finetune.csv", rep.loss_curve)
    reports["finetune"] = rep.to_dict() | {"loss_curve": len(rep.loss_curve)}
    save_checkpoint(out / "finetuned.ckpt", model=model.freeze(), schedule=sched, codec=codec)
    artifacts["finetuned"] = str(out / "finetuned.ckpt")
    _write_json(out / "train_report.json", reports)
    first, last = rep.windowed_means()
    return {"artifacts": artifacts, "finetune_loss_window_means": [first, last]}


def cmd_train_embedding(cfg: RunConfig, out: Path) -> dict:
    sched = _schedule(cfg)
    ckpts = cfg.section("checkpoints")
    model = _model_from(ckpts.finetuned, "checkpoints.finetuned").freeze()
    ren = _domain(cfg, "rendered", "train")
    imgs = load_images(ren, cfg.section("data").resolution)
    v_nd, rep = train_negative_embedding(model, IdentityCodec(), imgs, cfg.section("embedding"), sched,
                                         dataset_id=str(ren.source))
    write_loss_csv(out / "loss_embedding.csv", rep.loss_curve)
    _write_json(out / "train_report.json", {"embedding": rep.to_dict() | {"loss_curve": len(rep.loss_curve)}})
    save_checkpoint(out / "embedding.ckpt", schedule=sched, embeddings={"negative_domain": v_nd})
    return {"artifacts": {"embedding": str(out / "embedding.ckpt")}, "max_network_delta":
            max((d for k, d in rep.param_delta.items() if k != "embedding"), default=0.0),
            "embedding_delta": rep.param_delta["embedding"], "embedding_shape": list(v_nd.tokens.shape)}


def _translation_model(cfg: RunConfig) -> tuple[ToyUNet, object]:
    rig, ckpts = cfg.section("rig"), cfg.section("checkpoints")
    if rig.disable_finetuned_weights:
        model = _model_from(ckpts.base, "checkpoints.base (needed by --disable-finetuned-weights)")
    else:
        model = _model_from(ckpts.finetuned, "checkpoints.finetuned")
    v_nd = None if rig.disable_negative_embedding else _embedding_from(ckpts.embedding)
    return model.freeze(), v_nd


def _translation_inputs(cfg: RunConfig) -> DatasetManifest:
    t = cfg.section("translate")
    m = load_manifest(t.inputs) if t.inputs else _domain(cfg, "rendered", "evaluation")
    if t.limit is not None:
        m = replace(m, items=m.items[:t.limit])
    return m


def cmd_translate(cfg: RunConfig, out: Path) -> dict:
    sched, codec = _schedule(cfg), IdentityCodec()
    rig, t = cfg.section("rig"), cfg.section("translate")
    model, v_nd = _translation_model(cfg)
    manifest = _translation_inputs(cfg)
    images = load_images(manifest, cfg.section("data").resolution)
    (out / "outputs").mkdir()
    rows, warnings_seen = [], []
    with (out / "run_reports.jsonl").open("w") as rep_file:
        for start in range(0, len(images), t.chunk):
            batch = images[start:start + t.chunk]
            result, report = translate(batch, model, codec, v_nd, rig, sched)
            rep_file.write(json.dumps(report.to_dict() | {"first_index": start, "count": len(batch)}) + "\n")
            warnings_seen += report.warnings
            for j, img in enumerate(result):
                item = manifest.items[start + j]
                dest = save_image(img, out / "outputs" / f"{start + j:05d}.png")
                rows.append((str(item.path), str(dest.resolve())))
    with (out / "translations.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["input_path", "output_path"])
        w.writerows(rows)
    return {"artifacts": {"translations": str(out / "translations.csv")}, "count": len(rows),
            "ablation": {k: getattr(rig, k) for k in ("disable_tac", "disable_negative_embedding",
                                                       "disable_finetuned_weights")},
            "warnings": sorted(set(warnings_seen))}


def cmd_sweep(cfg: RunConfig, out: Path) -> dict:
    from scipy.stats import spearmanr

    sched, codec = _schedule(cfg), IdentityCodec()
    sw, rig = cfg.section("sweep"), cfg.section("rig")
    model, v_nd = _translation_model(cfg)
    manifest = _translation_inputs(cfg)
    if not 0 <= sw.input_index < len(manifest):
        raise ConfigError([f"sweep.input_index: {sw.input_index} outside [0, {len(manifest)})"])
    res = cfg.section("data").resolution
    x = load_images(replace(manifest, items=[manifest.items[sw.input_index]]), res)[0]
    grid = sweep(x, model, codec, v_nd, sw.gammas, sw.strengths, rig, sched)
    save_image(grid.contact_sheet(), out / "contact_sheet.png")
    table = grid.table()
    with (out / "sweep.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)

    def _rho(rows, key):
        vals = [r[key] for r in rows]
        if len(set(vals)) < 2:
            return None
        rho = spearmanr(vals, [r["ssim"] for r in rows]).statistic
        return None if np.isnan(rho) else float(rho)

    at_gamma = [r for r in table if r["tac_ratio"] == sw.fixed_gamma]
    at_strength = [r for r in table if r["strength"] == sw.fixed_strength]
    summary = {"rank_correlation_ssim_vs_strength": _rho(at_gamma, "strength"),
               "rank_correlation_ssim_vs_gamma": _rho(at_strength, "tac_ratio"),
               "fixed_gamma": sw.fixed_gamma, "fixed_strength": sw.fixed_strength,
               "input": str(manifest.items[sw.input_index].path)}
    _write_json(out / "sweep_summary.json", summary)
    return {"artifacts": {"contact_sheet": str(out / "contact_sheet.png"), "table": str(out / "sweep.csv")}, **summary}


def _read_translations(path: str) -> tuple[torch.Tensor, torch.Tensor]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise DataError(f"{path}: no translations listed")
    ins = torch.stack([load_image(r["input_path"]) for r in rows])
    outs = torch.stack([load_image(r["output_path"]) for r in rows])
    return ins, outs


def cmd_evaluate(cfg: RunConfig, out: Path) -> dict:
    ev, res = cfg.section("evaluate"), cfg.section("data").resolution
    inputs, outputs = _read_translations(_need(ev.translations, "evaluate.translations"))
    extractor = ToyFeatureExtractor(seed=cfg.seed)
    real_all = load_images(_domain(cfg, "real", "train"), res)
    n = min(len(outputs), len(real_all))
    subset = ev.kid_subset_size or default_kid_subsets(n)[0]
    with torch.no_grad():
        f_out, f_in, f_real = (extractor.features(x).double().numpy() for x in (outputs, inputs, real_all))
        lp = perceptual_distance_batch(outputs, inputs, extractor)
    reports = {
        "kid_output_vs_real": kid(f_out, f_real, subset, ev.kid_num_subsets, cfg.seed, extractor.fingerprint()),
        "kid_input_vs_real": kid(f_in, f_real, subset, ev.kid_num_subsets, cfg.seed, extractor.fingerprint()),
        "ssim_to_input": paired_report("ssim", ssim_batch(outputs, inputs)),
        "perceptual_to_input": paired_report("perceptual_distance", lp, extractor.fingerprint()),
    }
    summary = {}
    if cfg.section("data").split is not None:
        cl_ren = load_images(_domain(cfg, "rendered", "classifier"), res)
        cl_real = load_images(_domain(cfg, "real", "classifier"), res)
        clf = train_domain_classifier(cl_ren, cl_real, steps=ev.classifier_steps, seed=cfg.seed)
        p_in, p_out = clf.real_probability(inputs), clf.real_probability(outputs)
        reports["real_probability_input"] = paired_report("real_probability", p_in)
        reports["real_probability_output"] = paired_report("real_probability", p_out)
        summary["realism_gain"] = float(p_out.mean() - p_in.mean())
    if ev.user_study_pairs:
        _, baseline = _read_translations(_need(ev.baseline, "evaluate.baseline"))
        user_study_sheets(list(outputs), list(baseline), ev.user_study_pairs, cfg.seed, out / "user_study")
        summary["user_study"] = str(out / "user_study" / "answer_key.csv")
    metrics = {k: r.to_dict() for k, r in reports.items()}
    _write_json(out / "metrics.json", {"metrics": metrics, **summary})
    return {"artifacts": {"metrics": str(out / "metrics.json")},
            **{k: r.value for k, r in reports.items()}, **summary}


COMMANDS = {
    "make-toy-data": cmd_make_toy_data,
    "finetune": cmd_finetune,
    "train-embedding": cmd_train_embedding,
    "translate": cmd_translate,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
}
MODULE_ERRORS = (PipelineError, TrainingError, CheckpointError, DataError, MetricError, ScoreModelError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="render2real", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="seed for every stochastic stage (overrides the config)")
        p.add_argument("--out", help=f"output root (default: ${OUTPUT_ROOT_ENV} or ./{DEFAULT_OUTPUT_ROOT})")
        p.add_argument("--disable-tac", action="store_true")
        p.add_argument("--disable-negative-embedding", action="store_true")
        p.add_argument("--disable-finetuned-weights", action="store_true")
        p.add_argument("--allow-fingerprint-mismatch", action="store_true",
                       help="warn instead of failing when the embedding was trained on other weights")
        p.add_argument("--gamma", type=float, help="TAC ratio")
        p.add_argument("--strength", type=float, help="denoising strength")
        p.add_argument("--guidance-scale", type=float)
        p.add_argument("--steps", type=int, help="DDIM steps over the full range")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
    except ConfigError as e:
        print(f"render2real: {e}", file=sys.stderr)
        return EXIT_CONFIG
    run_dir = new_run_dir(output_root(args.out), args.command)
    (run_dir / "resolved_config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    t0 = time.perf_counter()
    status, result, code = "ok", {}, EXIT_OK
    try:
        result = COMMANDS[args.command](cfg, run_dir)
    except ConfigError as e:
        status, code, result = "config_error", EXIT_CONFIG, {"error": e.problems}
        print(f"render2real: {e}", file=sys.stderr)
    except MODULE_ERRORS as e:
        status, code, result = "error", EXIT_FAILURE, {"error": f"{type(e).__name__}: {e}"}
        print(f"render2real {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
    _write_json(run_dir / "run.json", {"command": args.command, "status": status, "seed": cfg.seed,
                                       "seconds": time.perf_counter() - t0, "config": str(Path(args.config).resolve()),
                                       **result})
    if code == EXIT_OK:
        print(run_dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
