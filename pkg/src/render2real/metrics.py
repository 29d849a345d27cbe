"""KID, SSIM, a pluggable perceptual distance, user-study sheets and a toy domain classifier."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

KID_SCALE = 1000.0


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    metric: str
    value: float
    std: float
    counts: dict[str, int]
    extractor: str | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.std < 0:
            raise MetricError("std must be non-negative")
        if any(c <= 0 for c in self.counts.values()):
            raise MetricError("sample counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# KID


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """U-statistic MMD^2 for equal-size samples; all ``i == j`` terms excluded."""
    n = x.shape[0]
    if y.shape[0] != n or n < 2:
        raise MetricError("mmd2_unbiased needs two equal-size samples of at least 2")
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    off = ~np.eye(n, dtype=bool)
    # fixed-order summation keeps the reduction deterministic
    total = kxx[off].sum() + kyy[off].sum() - kxy[off].sum() - kxy.T[off].sum()
    return float(total / (n * (n - 1)))


def kid(features_a, features_b, subset_size: int = 1000, num_subsets: int = 100, seed: int = 0,
        extractor: str | None = None) -> MetricReport:
    """Mean/std of polynomial-kernel MMD^2 over random equal-size subsets, scaled by 1000."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise MetricError("feature sets must be 2-D with equal feature dimension")
    if subset_size < 2 or min(len(a), len(b)) < subset_size:
        raise MetricError(f"sets of size {len(a)}/{len(b)} too small for subsets of {subset_size}")
    rng = np.random.default_rng(seed)
    scores = np.empty(num_subsets)
    for s in range(num_subsets):
        # equal-size sets share one sorted index draw, so kid(a, b) == kid(b, a) exactly
        ia = np.sort(rng.choice(len(a), subset_size, replace=False))
        ib = ia if len(a) == len(b) else np.sort(rng.choice(len(b), subset_size, replace=False))
        scores[s] = mmd2_unbiased(a[ia], b[ib])
    scores *= KID_SCALE
    return MetricReport(
        "kid", float(scores.mean()), float(scores.std()), {"a": len(a), "b": len(b)}, extractor,
        {"kernel": "poly3(x.y/d+1)", "subset_size": subset_size, "num_subsets": num_subsets,
         "seed": seed, "scale": KID_SCALE, "std_kind": "over_subsets"},
    )


def default_kid_subsets(n: int) -> tuple[int, int]:
    return min(1000, n), 100


# ---------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    c = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(c ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_map(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0, k1: float = 0.01,
             k2: float = 0.03, win: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Per-channel SSIM map over valid window positions, shape ``(..., C, H-win+1, W-win+1)``."""
    if a.shape != b.shape:
        raise MetricError(f"SSIM needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    if min(a.shape[-2:]) < win:
        raise MetricError(f"images smaller than the {win}x{win} window")
    x = a.to(torch.float64).reshape(-1, 1, *a.shape[-2:])
    y = b.to(torch.float64).reshape(-1, 1, *b.shape[-2:])
    w = gaussian_window(win, sigma)[None, None]
    mu_x, mu_y = F.conv2d(x, w), F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x ** 2
    syy = F.conv2d(y * y, w) - mu_y ** 2
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    m = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2))
    return m.reshape(*a.shape[:-2], *m.shape[-2:])


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03, range 1) over channels and positions."""
    return float(ssim_map(a, b).mean())


def ssim_batch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image SSIM for stacks ``(B, C, H, W)``."""
    return ssim_map(a, b).flatten(1).mean(1)


# ---------------------------------------------------------------------------
# feature extractors


class FeatureExtractor(Protocol):
    name: str
    dim: int

    def fingerprint(self) -> str: ...

    def features(self, images: torch.Tensor) -> torch.Tensor: ...

    def layer_features(self, images: torch.Tensor) -> list[torch.Tensor]: ...


class ToyFeatureExtractor(nn.Module):
    """Fixed, seeded random conv stack; stands in for Inception/LPIPS backbones at desk scale."""

    name = "toy-conv3"

    def __init__(self, seed: int = 0, widths: Sequence[int] = (16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, cin = [], 3
        for w in widths:
            conv = nn.Conv2d(cin, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            layers.append(conv)
            cin = w
        self.convs = nn.ModuleList(layers)
        self.dim = sum(widths) * 2
        self.requires_grad_(False)
        self.eval()

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.name.encode())
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(v.numpy().tobytes())
        return h.hexdigest()[:16]

    @torch.no_grad()
    def layer_features(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = images[None] if images.ndim == 3 else images
        x = x.float() * 2 - 1
        feats = []
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x)
        return feats

    @torch.no_grad()
    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Mean- and max-pooled activations of every layer: ``(B, dim)``."""
        feats = self.layer_features(images)
        return torch.cat([torch.cat([f.mean((2, 3)), f.amax((2, 3))], 1) for f in feats], 1)


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, extractor: FeatureExtractor) -> float:
    """Channel-normalised feature difference, spatially averaged and summed over layers."""
    if a.shape != b.shape:
        raise MetricError(f"perceptual distance needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    return float(perceptual_distance_batch(a[None] if a.ndim == 3 else a,
                                           b[None] if b.ndim == 3 else b, extractor).mean())


def perceptual_distance_batch(a: torch.Tensor, b: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    fa, fb = extractor.layer_features(a), extractor.layer_features(b)
    total = torch.zeros(a.shape[0], dtype=torch.float64)
    for x, y in zip(fa, fb):
        x = x / (x.norm(dim=1, keepdim=True) + 1e-10)
        y = y / (y.norm(dim=1, keepdim=True) + 1e-10)
        total += (x - y).pow(2).sum(1).mean((1, 2)).double()
    return total


def paired_report(name: str, values: torch.Tensor, extractor: str | None = None, **config) -> MetricReport:
    """Mean and std over test inputs for a fixed model."""
    v = values.double()
    return MetricReport(name, float(v.mean()), float(v.std(unbiased=False)), {"inputs": len(v)}, extractor,
                        {"std_kind": "over_inputs", **config})


# ---------------------------------------------------------------------------
# user-study sheets


def user_study_sheets(ours: Sequence[torch.Tensor], baseline: Sequence[torch.Tensor], n_pairs: int, seed: int,
                      out_dir: str | Path) -> Path:
    """Write side-by-side sheets in random left/right order plus ``answer_key.csv``."""
    from .data import save_image

    if len(ours) != len(baseline):
        raise MetricError(f"aligned lists required, got {len(ours)} and {len(baseline)}")
    if n_pairs < 1 or n_pairs > len(ours):
        raise MetricError(f"n_pairs must be in [1, {len(ours)}]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(ours), n_pairs, replace=False)
    flips = rng.random(n_pairs) < 0.5
    rows = []
    for sid, (idx, ours_left) in enumerate(zip(picks, flips)):
        a, b = (ours[idx], baseline[idx]) if ours_left else (baseline[idx], ours[idx])
        save_image(torch.cat([a, b], dim=-1), out / f"sheet_{sid:04d}.png")
        rows.append((f"sheet_{sid:04d}", int(idx), "left" if ours_left else "right"))
    with (out / "answer_key.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sheet_id", "item_index", "ours_position"])
        w.writerows(rows)
    return out / "answer_key.csv"


# ---------------------------------------------------------------------------
# toy domain classifier


class DomainClassifier(nn.Module):
    """Small CNN scoring P(real | image) for the synthetic two-domain corpus."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(), nn.AvgPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(), nn.AvgPool2d(2),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(2), nn.Flatten(), nn.Linear(8 * width, 1),
        )

    def forward(self, x):
        return self.net(x * 2 - 1).squeeze(-1)

    @torch.no_grad()
    def real_probability(self, images: torch.Tensor) -> torch.Tensor:
        self.eval()
        return torch.sigmoid(self(images[None] if images.ndim == 3 else images))


def train_domain_classifier(rendered: torch.Tensor, real: torch.Tensor, steps: int = 400, lr: float = 2e-3,
                            batch_size: int = 32, seed: int = 0) -> DomainClassifier:
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    clf = DomainClassifier()
    x = torch.cat([rendered, real])
    y = torch.cat([torch.zeros(len(rendered)), torch.ones(len(real))])
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    clf.train()
    for _ in range(steps):
        idx = torch.randint(0, len(x), (batch_size,), generator=gen)
        loss = F.binary_cross_entropy_with_logits(clf(x[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    clf.eval()
    return clf
