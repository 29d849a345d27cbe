"""Dataset manifests, image I/O, preprocessing and the synthetic two-domain corpus."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("path", "domain", "caption_path", "category", "view")


class DataError(ValueError):
    pass


class EmptyDatasetError(DataError):
    pass


class Domain(str, Enum):
    RENDERED = "rendered"
    REAL = "real"


@dataclass(frozen=True)
class DatasetItem:
    path: Path
    domain: Domain
    caption_path: Path | None = None
    category: str | None = None
    view: str | None = None


@dataclass
class DatasetManifest:
    items: list[DatasetItem]
    resolution: tuple[int, int] | None = None
    resize_mode: str = "resize"
    duplicates_removed: int = 0
    source: Path | None = None

    def __len__(self) -> int:
        return len(self.items)

    def category_counts(self) -> dict[str, int]:
        return dict(Counter(i.category for i in self.items if i.category is not None))

    def filter(self, domain: Domain | str) -> "DatasetManifest":
        domain = Domain(domain)
        return DatasetManifest([i for i in self.items if i.domain is domain], self.resolution, self.resize_mode)


# ---------------------------------------------------------------------------
# manifests


def _parse_rows(path: Path) -> list[dict]:
    text = path.read_text()
    if path.suffix in (".jsonl", ".ndjson"):
        rows = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{n}: malformed JSON row ({e})") from None
            if not isinstance(row, dict):
                raise DataError(f"{path}:{n}: row is not an object")
            rows.append(row)
        return rows
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames is None:
        return []
    missing = {"path", "domain"} - set(reader.fieldnames)
    if missing:
        raise DataError(f"{path}: missing required columns {sorted(missing)}")
    unknown = set(reader.fieldnames) - set(MANIFEST_COLUMNS)
    if unknown:
        raise DataError(f"{path}: unknown columns {sorted(unknown)}")
    return list(reader)


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Read a CSV or JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    rows = _parse_rows(path)
    if not rows:
        raise EmptyDatasetError(f"{path}: manifest has no items")
    base = path.parent
    items, seen, dupes = [], set(), 0
    for n, row in enumerate(rows, 1):
        if not row.get("path"):
            raise DataError(f"{path}: row {n} has no path")
        try:
            domain = Domain(str(row.get("domain", "")).strip())
        except ValueError:
            raise DataError(f"{path}: row {n} has unknown domain tag {row.get('domain')!r}") from None
        img = Path(os.path.abspath(base / row["path"]))
        cap = row.get("caption_path") or None
        cap = Path(os.path.abspath(base / cap)) if cap else None
        if img in seen:
            dupes += 1
            continue
        seen.add(img)
        if check_files:
            for p in (img, cap):
                if p is not None and not p.exists():
                    raise DataError(f"{path}: row {n} references missing file {p}")
        items.append(DatasetItem(img, domain, cap, row.get("category") or None, row.get("view") or None))
    if dupes:
        log.warning("%s: removed %d duplicate paths", path, dupes)
    return DatasetManifest(items, duplicates_removed=dupes, source=path)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()

    def rel(p):
        if p is None:
            return ""
        p = Path(p).resolve()
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_COLUMNS)
        for it in manifest.items:
            w.writerow([rel(it.path), it.domain.value, rel(it.caption_path), it.category or "", it.view or ""])
    return path


# ---------------------------------------------------------------------------
# images


def load_image(path: str | Path) -> torch.Tensor:
    """8-bit PNG/JPEG -> float tensor (3, H, W) in [0, 1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def to_uint8(x: torch.Tensor) -> np.ndarray:
    return (x.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0 + 0.5).astype(np.uint8)


def save_image(x: torch.Tensor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(x)).save(path)
    return path


def crop_box(height: int, width: int, target: tuple[int, int]) -> tuple[int, int, int, int]:
    """Centered ``(top, left, crop_h, crop_w)`` box with the aspect ratio of ``target`` (h, w)."""
    th, tw = target
    if th * width >= tw * height:
        ch, cw = height, round(height * tw / th)
    else:
        ch, cw = round(width * th / tw), width
    return (height - ch) // 2, (width - cw) // 2, ch, cw


def preprocess(x: torch.Tensor, target: tuple[int, int], mode: str = "resize") -> torch.Tensor:
    """Resize (bilinear) an image ``(3, H, W)`` to ``target = (height, width)``.

    ``crop_resize`` first center-crops to the target aspect ratio.
    """
    th, tw = int(target[0]), int(target[1])
    if th <= 0 or tw <= 0:
        raise DataError(f"invalid target size {target}")
    if mode not in ("resize", "crop_resize"):
        raise DataError(f"unknown preprocess mode {mode!r}")
    if mode == "crop_resize":
        top, left, ch, cw = crop_box(x.shape[-2], x.shape[-1], (th, tw))
        x = x[..., top:top + ch, left:left + cw]
    if tuple(x.shape[-2:]) == (th, tw):
        return x.clone()
    down = th < x.shape[-2] or tw < x.shape[-1]
    out = F.interpolate(x[None], size=(th, tw), mode="bilinear", align_corners=False, antialias=down)[0]
    # convex interpolation weights; clamp only removes float round-off
    return out.clamp(float(x.min()), float(x.max()))


def load_images(manifest: DatasetManifest, resolution: tuple[int, int] | int | None = None,
                mode: str | None = None) -> torch.Tensor:
    res = resolution or manifest.resolution
    if isinstance(res, int):
        res = (res, res)
    mode = mode or manifest.resize_mode
    out = []
    for it in manifest.items:
        img = load_image(it.path)
        if res is not None:
            img = preprocess(img, res, mode)
        out.append(img)
    if not out:
        raise EmptyDatasetError("no images to load")
    return torch.stack(out)


def load_captions(manifest: DatasetManifest) -> torch.Tensor | None:
    """Stacked caption embeddings ``(N, L, d)`` or None when any item lacks a sidecar."""
    if any(it.caption_path is None for it in manifest.items):
        return None
    return torch.from_numpy(np.stack([np.load(it.caption_path) for it in manifest.items])).float()


# ---------------------------------------------------------------------------
# pseudo caption embeddings


def _token_vector(token: str, d: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(token.encode()).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(d).astype(np.float32)


def pseudo_caption_embedding(text: str, length: int = 77, dim: int = 32) -> np.ndarray:
    """Deterministic hash-based stand-in for a text encoder: ``(length, dim)`` float32.

    Layout: a begin row, one row per word (truncated), an end row, then padding rows.
    """
    words = text.lower().split()[: length - 2]
    tokens = ["<bos>"] + words + ["<eos>"]
    tokens += [f"<pad:{i}>" for i in range(length - len(tokens))]
    return np.stack([_token_vector(t, dim) for t in tokens])


# ---------------------------------------------------------------------------
# synthetic two-domain corpus

PATTERNS = ("stripes", "checker", "dots", "plaid")
PALETTE = {
    "red": (0.85, 0.15, 0.15), "blue": (0.15, 0.3, 0.85), "green": (0.2, 0.7, 0.3),
    "yellow": (0.95, 0.85, 0.2), "white": (0.95, 0.95, 0.95), "black": (0.1, 0.1, 0.12),
    "orange": (0.95, 0.55, 0.1), "purple": (0.55, 0.2, 0.7), "teal": (0.1, 0.6, 0.6),
}


@dataclass
class TextureSpec:
    pattern: str
    colors: tuple[str, str]
    period: float
    angle: float
    phase: tuple[float, float]

    @property
    def caption(self) -> str:
        return f"a {self.colors[0]} and {self.colors[1]} {self.pattern} fabric"


def _random_texture(rng: np.random.Generator) -> TextureSpec:
    names = list(PALETTE)
    a, b = rng.choice(len(names), 2, replace=False)
    return TextureSpec(
        pattern=PATTERNS[rng.integers(len(PATTERNS))],
        colors=(names[a], names[b]),
        period=float(rng.uniform(5.0, 11.0)),
        angle=float(rng.uniform(0, math.pi)),
        phase=(float(rng.uniform(0, 1)), float(rng.uniform(0, 1))),
    )


def _texture_mask(spec: TextureSpec, res: int, supersample: int = 1) -> np.ndarray:
    n = res * supersample
    c = (np.arange(n) + 0.5) / supersample
    yy, xx = np.meshgrid(c, c, indexing="ij")
    ca, sa = math.cos(spec.angle), math.sin(spec.angle)
    u = (xx * ca + yy * sa) / spec.period + spec.phase[0]
    v = (-xx * sa + yy * ca) / spec.period + spec.phase[1]
    fu, fv = u - np.floor(u), v - np.floor(v)
    if spec.pattern == "stripes":
        m = fu < 0.5
    elif spec.pattern == "checker":
        m = (fu < 0.5) ^ (fv < 0.5)
    elif spec.pattern == "dots":
        m = (fu - 0.5) ** 2 + (fv - 0.5) ** 2 < 0.09
    else:
        m = (fu < 0.3) | (fv < 0.3)
    m = m.astype(np.float64)
    if supersample > 1:
        m = m.reshape(res, supersample, res, supersample).mean(axis=(1, 3))
    return m


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    return gaussian_filter(img, sigma=(0, sigma, sigma), mode="reflect")


def render_pair(spec: TextureSpec, res: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One texture rendered in both domains, each ``(3, res, res)`` float64 in [0, 1].

    Rendered: flat colours, hard edges. Real: softened edges, smooth shading across
    a fold direction, vignette and fine grain.
    """
    c0, c1 = (np.asarray(PALETTE[c])[:, None, None] for c in spec.colors)
    hard = _texture_mask(spec, res)
    rendered = c0 * hard + c1 * (1 - hard)

    soft = _texture_mask(spec, res, supersample=4)
    base = c0 * soft + c1 * (1 - soft)
    base = _blur(base, 0.6)
    yy, xx = np.meshgrid(np.linspace(-1, 1, res), np.linspace(-1, 1, res), indexing="ij")
    theta = rng.uniform(0, 2 * math.pi)
    fold = np.cos(theta) * xx + np.sin(theta) * yy
    shading = 0.92 + 0.18 * np.sin(math.pi * 0.75 * fold + rng.uniform(0, 2 * math.pi))
    vignette = 1.0 - 0.45 * (xx ** 2 + yy ** 2) / 2.0
    grain = _blur(rng.normal(0.0, 0.035, size=(1, res, res)), 0.5)
    real = base * shading * vignette + grain
    return np.clip(rendered, 0, 1), np.clip(real, 0, 1)


@dataclass
class SyntheticDomains:
    rendered: DatasetManifest
    real: DatasetManifest
    classifier_split: dict = field(default_factory=dict)
    root: Path | None = None


def synthetic_arrays(n: int, res: int, seed: int) -> tuple[np.ndarray, np.ndarray, list[TextureSpec]]:
    """In-memory twin of :func:`make_synthetic_domains`: ``(rendered, real, specs)``."""
    rng = np.random.default_rng(seed)
    specs, ren, rea = [], [], []
    for _ in range(n):
        spec = _random_texture(rng)
        a, b = render_pair(spec, res, rng)
        specs.append(spec)
        ren.append(a)
        rea.append(b)
    return np.stack(ren).astype(np.float32), np.stack(rea).astype(np.float32), specs


def make_synthetic_domains(out_dir: str | Path, n_per_domain: int, resolution: int = 32, seed: int = 0,
                           embed_dim: int = 32, context_length: int = 77,
                           classifier_fraction: float = 0.2, eval_fraction: float = 0.1) -> SyntheticDomains:
    """Write paired rendered/real PNGs with caption sidecars and manifests under ``out_dir``.

    Item ``i`` of both domains shares one underlying texture. A ``classifier_fraction``
    share of indices is reserved for training/evaluating a toy domain classifier and an
    ``eval_fraction`` share is held out as translation inputs.
    """
    if n_per_domain < 1 or resolution < 4:
        raise DataError("n_per_domain must be >= 1 and resolution >= 4")
    out = Path(out_dir)
    rendered, real, specs = synthetic_arrays(n_per_domain, resolution, seed)
    items = {Domain.RENDERED: [], Domain.REAL: []}
    cap_dir = out / "captions"
    cap_dir.mkdir(parents=True, exist_ok=True)
    for i, spec in enumerate(specs):
        cap_path = cap_dir / f"{i:05d}.npy"
        np.save(cap_path, pseudo_caption_embedding(spec.caption, context_length, embed_dim))
        for dom, arr in ((Domain.RENDERED, rendered), (Domain.REAL, real)):
            p = save_image(torch.from_numpy(arr[i]), out / dom.value / f"{i:05d}.png")
            items[dom].append(DatasetItem(p.resolve(), dom, cap_path.resolve(), spec.pattern, "front"))
    manifests = {d: DatasetManifest(v, (resolution, resolution)) for d, v in items.items()}
    for d, m in manifests.items():
        write_manifest(m, out / f"{d.value}.csv")
    perm = np.random.default_rng(seed + 1).permutation(n_per_domain)
    n_cls = max(1, int(round(classifier_fraction * n_per_domain)))
    n_eval = int(round(eval_fraction * n_per_domain))
    split = {
        "classifier": sorted(int(i) for i in perm[:n_cls]),
        "evaluation": sorted(int(i) for i in perm[n_cls:n_cls + n_eval]),
        "train": sorted(int(i) for i in perm[n_cls + n_eval:]),
    }
    (out / "split.json").write_text(json.dumps(split))
    return SyntheticDomains(manifests[Domain.RENDERED], manifests[Domain.REAL], split, out)
