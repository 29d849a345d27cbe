"""Single-file checkpoint archive: named ``.npy`` tensors plus a JSON manifest.

See ``docs/checkpoint_format.md`` for the byte-level layout.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import ConvAutoencoder, IdentityCodec
from .diffusion import NoiseSchedule
from .score_model import (
    BackboneConfig,
    ConditioningEmbedding,
    EmbeddingKind,
    NegativeDomainEmbedding,
    ToyUNet,
    tensors_fingerprint,
)

FORMAT_NAME = "render2real-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class FingerprintMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: ToyUNet | None
    schedule: NoiseSchedule | None
    embeddings: dict[str, NegativeDomainEmbedding | ConditioningEmbedding] = field(default_factory=dict)
    codec: object | None = None
    manifest: dict = field(default_factory=dict)


def _sha(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path: str | Path, model: ToyUNet | None = None, schedule: NoiseSchedule | None = None,
                    embeddings: dict | None = None, codec=None, extra: dict | None = None) -> dict:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    embeddings = embeddings or {}
    tensors: dict[str, np.ndarray] = {}
    manifest: dict = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "tensors": {}}

    if schedule is not None:
        manifest["schedule"] = schedule.to_config()
    if model is not None:
        sd = model.state_dict()
        for k, v in sd.items():
            tensors[f"backbone.{k}"] = v.detach().cpu().numpy()
        manifest["backbone"] = {
            "config": model.cfg.to_dict(),
            "layers": [
                {"layer_id": i.layer_id, "depth_level": i.depth_level, "feature_size": i.feature_size}
                for i in model.enumerate_attention_layers()
            ],
            "fingerprint": model.fingerprint(),
        }
    if codec is not None:
        if isinstance(codec, IdentityCodec):
            manifest["codec"] = {"kind": "identity", "downsample_factor": 1, "tolerance": 0.0}
        else:
            sd = codec.state_dict()
            for k, v in sd.items():
                tensors[f"codec.{k}"] = v.detach().cpu().numpy()
            manifest["codec"] = {
                "kind": "conv_autoencoder",
                "downsample_factor": codec.downsample_factor,
                "latent_channels": codec.latent_channels,
                "hidden": codec.hidden,
                "tolerance": codec.reconstruction_tolerance,
                "fingerprint": tensors_fingerprint(sd),
            }
    manifest["embeddings"] = {}
    for name, emb in embeddings.items():
        arr = emb.tokens.detach().cpu().numpy()
        tensors[f"embedding.{name}"] = arr
        entry = {"rows": int(arr.shape[0]), "dim": int(arr.shape[1]), "fingerprint": _sha(arr)}
        if isinstance(emb, NegativeDomainEmbedding):
            entry["kind"] = EmbeddingKind.NEGATIVE_DOMAIN.value
            entry["training_meta"] = emb.training_meta
        else:
            entry["kind"] = emb.kind.value
        manifest["embeddings"][name] = entry
    if extra:
        manifest["extra"] = extra

    for name, arr in tensors.items():
        manifest["tensors"][name] = {
            "file": f"tensors/{name}.npy",
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
            "sha256": _sha(arr),
        }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, arr in tensors.items():
            zf.writestr(f"tensors/{name}.npy", _npy_bytes(arr))
    tmp.replace(path)
    return manifest


def read_manifest(path: str | Path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt manifest ({e})") from None
        if manifest.get("format") != FORMAT_NAME:
            raise CheckpointError(f"{path}: not a {FORMAT_NAME} archive")
        if manifest.get("version") != FORMAT_VERSION:
            raise VersionMismatchError(
                f"{path}: format version {manifest.get('version')} unsupported (expected {FORMAT_VERSION})"
            )
        arrays = {}
        for name, meta in manifest["tensors"].items():
            try:
                arr = np.load(io.BytesIO(zf.read(meta["file"])), allow_pickle=False)
            except (KeyError, ValueError) as e:
                raise CheckpointError(f"{path}: corrupt tensor {name} ({e})") from None
            if _sha(arr) != meta["sha256"]:
                raise FingerprintMismatchError(f"{path}: tensor {name} content hash mismatch")
            arrays[name] = arr

    schedule = NoiseSchedule.from_config(manifest["schedule"]) if "schedule" in manifest else None

    model = None
    if "backbone" in manifest:
        bb = manifest["backbone"]
        cfg = BackboneConfig.from_dict(bb["config"])
        sd = {k[len("backbone."):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("backbone.")}
        model = ToyUNet(cfg, null_embedding=sd["null_embedding"])
        model.load_state_dict(sd)
        model.eval()
        if model.fingerprint() != bb["fingerprint"]:
            raise FingerprintMismatchError(f"{path}: backbone fingerprint mismatch")

    codec = None
    if "codec" in manifest:
        cm = manifest["codec"]
        if cm["kind"] == "identity":
            codec = IdentityCodec()
        else:
            codec = ConvAutoencoder(cm["latent_channels"], cm["hidden"])
            sd = {k[len("codec."):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("codec.")}
            codec.load_state_dict(sd)
            codec.eval()
            if tensors_fingerprint(codec.state_dict()) != cm["fingerprint"]:
                raise FingerprintMismatchError(f"{path}: codec fingerprint mismatch")

    embeddings = {}
    for name, meta in manifest.get("embeddings", {}).items():
        arr = arrays[f"embedding.{name}"]
        if _sha(arr) != meta["fingerprint"]:
            raise FingerprintMismatchError(f"{path}: embedding {name} fingerprint mismatch")
        t = torch.from_numpy(arr.copy())
        if meta["kind"] == EmbeddingKind.NEGATIVE_DOMAIN.value:
            embeddings[name] = NegativeDomainEmbedding(t, dict(meta.get("training_meta", {})))
        else:
            embeddings[name] = ConditioningEmbedding(t, EmbeddingKind(meta["kind"]))
    return Checkpoint(model, schedule, embeddings, codec, manifest)
