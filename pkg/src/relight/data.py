"""Paired-dataset ingestion, patch sampling, and synthetic degradation.

Datasets live on disk as ``root/low/<id>.png`` and ``root/high/<id>.png``
with filename-matched 8-bit PNGs. The synthetic degradation family
(gamma curve, brightness gain, additive Gaussian noise) gives training
and tests a closed-form ground truth for the learned degradation.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class PairedSample:
    low: np.ndarray
    high: np.ndarray
    id: str

    def __post_init__(self):
        if self.low.shape != self.high.shape:
            raise ValueError(
                f"pair '{self.id}': low {self.low.shape} vs high {self.high.shape}"
            )


@dataclass(frozen=True)
class DegradationSpec:
    gamma: float = 2.2
    gain: float = 0.3
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if not 0.0 < self.gain <= 1.0:
            raise ValueError("gain must be in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DegradationSpec":
        return cls(**json.loads(text))


def read_image(path: Path) -> np.ndarray:
    """Decode an image file to H x W x 3 float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path: Path, x: np.ndarray) -> None:
    """Write a [0,1] float image as 8-bit PNG (v = round(255 x))."""
    q = np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path)


def load_paired_dataset(root: Path | str) -> list[PairedSample]:
    """Load filename-matched low/high pairs, sorted by id."""
    root = Path(root)
    low_dir, high_dir = root / "low", root / "high"
    for d in (low_dir, high_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"missing dataset directory {d}")
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    low_ids = {p.stem: p for p in low_dir.iterdir() if p.suffix.lower() in exts}
    high_ids = {p.stem: p for p in high_dir.iterdir() if p.suffix.lower() in exts}
    missing = sorted(set(low_ids) ^ set(high_ids))
    if missing:
        raise FileNotFoundError(f"unmatched pair ids: {', '.join(missing)}")
    return [
        PairedSample(low=read_image(low_ids[i]), high=read_image(high_ids[i]), id=i)
        for i in sorted(low_ids)
    ]


def sample_patch(pair: PairedSample, size: int, rng: np.random.Generator) -> PairedSample:
    """Crop the same uniformly random window from both images of a pair."""
    h, w = pair.low.shape[:2]
    if size > min(h, w):
        raise ValueError(f"patch size {size} exceeds image size {h}x{w}")
    if size % 8:
        raise ValueError(f"patch size {size} not divisible by 8")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return PairedSample(
        low=pair.low[top : top + size, left : left + size],
        high=pair.high[top : top + size, left : left + size],
        id=pair.id,
    )


def synth_degrade(x: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Apply the synthetic low-light model: clamp(gain * x^gamma + noise)."""
    rng = np.random.default_rng(spec.seed)
    y = spec.gain * np.asarray(x, dtype=np.float64) ** spec.gamma
    if spec.noise_sigma > 0:
        y = y + rng.normal(0.0, spec.noise_sigma, size=y.shape)
    return np.clip(y, 0.0, 1.0)


def make_synth_dataset(
    clean_dir: Path | str, out_root: Path | str, spec: DegradationSpec
) -> list[str]:
    """Build a paired dataset from clean images using the synthetic model.

    Each image gets a per-image noise seed derived from spec.seed so
    noise is independent across the set. The spec is written to
    ``out_root/spec.json``. Returns the ids written.
    """
    clean_dir, out_root = Path(clean_dir), Path(out_root)
    (out_root / "low").mkdir(parents=True, exist_ok=True)
    (out_root / "high").mkdir(parents=True, exist_ok=True)
    ids = []
    files = sorted(p for p in clean_dir.iterdir() if p.is_file())
    for k, path in enumerate(files):
        x = read_image(path)
        per_image = dataclasses.replace(spec, seed=spec.seed + k)
        y = synth_degrade(x, per_image)
        write_image(out_root / "high" / f"{path.stem}.png", x)
        write_image(out_root / "low" / f"{path.stem}.png", y)
        ids.append(path.stem)
    (out_root / "spec.json").write_text(spec.to_json())
    return ids
