"""Rate-distortion sweeps over (lambda, delta) and per-element code-length maps."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .codec import LatentPair, compress, decompress, element_bits, encode_latents
from .data import save_image
from .metrics import max_scales, ms_ssim, psnr
from .model import VariableRateModel

CSV_COLUMNS = ("lambda_index", "lambda", "delta", "bpp", "psnr_db", "ms_ssim", "n_images")


def default_delta_grid(n: int = 9, low: float = 0.5, high: float = 2.0) -> tuple[float, ...]:
    return tuple(float(d) for d in np.geomspace(low, high, n))


@dataclass
class SweepSpec:
    lambda_indices: Sequence[int]
    deltas: Sequence[float] = field(default_factory=default_delta_grid)
    images: Sequence[np.ndarray] = ()
    output: str | Path | None = None
    delta_range: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        lo, hi = self.delta_range
        bad = [d for d in self.deltas if not lo - 1e-12 <= d <= hi + 1e-12]
        if bad:
            raise ValueError(f"bin sizes {bad} fall outside the trained range [{lo}, {hi}]")
        if not len(self.lambda_indices) or not len(self.deltas):
            raise ValueError("sweep needs at least one lambda index and one bin size")


@dataclass
class SweepRow:
    lambda_index: int
    lam: float
    delta: float
    bpp: float
    psnr_db: float
    ms_ssim: float
    n_images: int

    def as_csv(self) -> list:
        return [self.lambda_index, self.lam, self.delta, self.bpp, self.psnr_db, self.ms_ssim, self.n_images]


def evaluate_point(image: np.ndarray, model: VariableRateModel, lambda_index: int, delta: float) -> dict:
    """Compress and decompress one image; bpp comes from the actual stream."""
    stream = compress(image, model, lambda_index, delta)
    data = stream.to_bytes()
    recon = decompress(data, model)
    scales = max_scales(*image.shape[-2:])
    return {
        "bpp": 8 * len(data) / (image.shape[-2] * image.shape[-1]),
        "psnr": psnr(image, recon),
        "ms_ssim": ms_ssim(image, recon, scales) if scales else float("nan"),
        "reconstruction": recon,
    }


def rd_sweep(spec: SweepSpec, model: VariableRateModel, lambdas: Sequence[float] | None = None) -> list[SweepRow]:
    """One aggregated row per (lambda, delta), lambda-major, deltas in the given order."""
    if not len(spec.images):
        raise ValueError("sweep needs at least one image")
    rows = []
    for lam in spec.lambda_indices:
        for delta in spec.deltas:
            points = [evaluate_point(img, model, lam, delta) for img in spec.images]
            rows.append(SweepRow(
                lambda_index=int(lam),
                lam=float(lambdas[lam]) if lambdas is not None else float("nan"),
                delta=float(delta),
                bpp=float(np.mean([p["bpp"] for p in points])),
                psnr_db=float(np.mean([p["psnr"] for p in points])),
                ms_ssim=float(np.mean([p["ms_ssim"] for p in points])),
                n_images=len(points),
            ))
    if spec.output is not None:
        write_sweep(spec.output, rows)
    return rows


def write_sweep(path: str | Path, rows: Sequence[SweepRow]) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.json`` (suffix of ``path`` is replaced)."""
    path = Path(path)
    csv_path, json_path = path.with_suffix(".csv"), path.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv())
    records = [dict(zip(CSV_COLUMNS, row.as_csv())) for row in rows]
    json_path.write_text(json.dumps(records, indent=2))
    return csv_path, json_path


@dataclass
class CodelengthMaps:
    z_bits: np.ndarray  # (Cz, h, w)
    w_bits: np.ndarray  # (Cw, h', w')
    latents: LatentPair

    @property
    def total_bits(self) -> float:
        return float(self.z_bits.sum() + self.w_bits.sum())


def codelength_map(image, model: VariableRateModel, lambda_index: int, delta: float) -> CodelengthMaps:
    latents, _ = encode_latents(image, model, lambda_index, delta)
    z_bits, w_bits = element_bits(model, latents, lambda_index)
    return CodelengthMaps(z_bits, w_bits, latents)


def export_codelength_maps(maps: CodelengthMaps, out_dir: str | Path, max_bits: float = 16.0) -> list[Path]:
    """Raw ``.npy`` arrays plus one grayscale PNG per channel (black = 0 bits, white = ``max_bits``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, bits in (("z", maps.z_bits), ("w", maps.w_bits)):
        raw = out / f"{name}_bits.npy"
        np.save(raw, bits)
        written.append(raw)
        for c, channel in enumerate(bits):
            png = out / f"{name}_c{c:02d}.png"
            save_image(png, channel / max_bits)
            written.append(png)
    summary = out / "summary.json"
    summary.write_text(json.dumps({
        "z_bits": float(maps.z_bits.sum()),
        "w_bits": float(maps.w_bits.sum()),
        "total_bits": maps.total_bits,
        "delta": maps.latents.delta,
    }, indent=2))
    written.append(summary)
    return written
