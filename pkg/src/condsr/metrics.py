"""PSNR / SSIM under an explicit evaluation protocol."""

from __future__ import annotations

import logging
import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import ImageTensor, UNIT, load_image

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class Protocol:
    """``color`` is ``"rgb"`` or ``"y"`` (BT.601 full-range luma of 8-bit RGB);
    ``crop`` pixels are removed from every border before measuring."""

    color: str = "rgb"
    crop: int = 4

    def __post_init__(self):
        if self.color not in ("rgb", "y"):
            raise ValueError(f"unknown color space {self.color!r}")
        if self.crop < 0:
            raise ValueError("crop must be >= 0")

    def describe(self) -> str:
        return f"color={self.color} crop={self.crop}"

    def apply(self, img: ImageTensor) -> np.ndarray:
        if img.range_tag != UNIT:
            raise ValueError("metrics expect unit-range images")
        data = img.data
        if self.color == "y":
            q = np.floor(np.clip(data, 0.0, 1.0) * 255.0 + 0.5)
            if q.shape[0] == 3:
                q = 0.299 * q[0] + 0.587 * q[1] + 0.114 * q[2]
            else:
                q = q[0]
            data = (q / 255.0)[None]
        c = self.crop
        if c:
            if 2 * c >= min(data.shape[1:]):
                raise ValueError(f"crop {c} leaves nothing of a {data.shape[1]}x{data.shape[2]} image")
            data = data[:, c:-c, c:-c]
        return data


def _pair(a: ImageTensor, b: ImageTensor, protocol: Protocol):
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return protocol.apply(a), protocol.apply(b)


def psnr(a: ImageTensor, b: ImageTensor, protocol: Protocol = Protocol(crop=0)) -> float:
    """PSNR in dB with peak 1.0; identical inputs give ``inf``."""
    x, y = _pair(a, b, protocol)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # Separable correlation over valid window positions only.
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim(a: ImageTensor, b: ImageTensor, protocol: Protocol = Protocol(crop=0)) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), L = 1.

    Averaged over valid window positions and channels.
    """
    x, y = _pair(a, b, protocol)
    if min(x.shape[1:]) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape[1]}x{x.shape[2]} smaller than the SSIM window")
    g = gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    scores = []
    for xc, yc in zip(x, y):
        mu_x, mu_y = _filter_valid(xc, g), _filter_valid(yc, g)
        var_x = _filter_valid(xc * xc, g) - mu_x * mu_x
        var_y = _filter_valid(yc * yc, g) - mu_y * mu_y
        cov = _filter_valid(xc * yc, g) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        scores.append(num / den)
    return float(np.mean(scores))


@dataclass
class ImageRecord:
    id: str
    psnr_db: float
    ssim: float
    lpips: float | None = None


@dataclass
class EvalReport:
    protocol: Protocol
    records: list[ImageRecord] = field(default_factory=list)

    @property
    def has_lpips(self) -> bool:
        return any(r.lpips is not None for r in self.records)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr_db for r in self.records])) if self.records else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.records])) if self.records else math.nan

    @property
    def mean_lpips(self) -> float:
        vals = [r.lpips for r in self.records if r.lpips is not None]
        return float(np.mean(vals)) if vals else math.nan

    def machine_text(self) -> str:
        lines = [f"# protocol {self.protocol.describe()}\n"]
        for r in self.records:
            lines.append(self._row(r.id, r.psnr_db, r.ssim, r.lpips))
        lines.append(self._row("MEAN", self.mean_psnr, self.mean_ssim,
                               self.mean_lpips if self.has_lpips else None))
        return "".join(lines)

    def _row(self, id, p, s, lp) -> str:
        cells = [id, _fmt(p), _fmt(s)]
        if self.has_lpips:
            cells.append(_fmt(lp))
        return "\t".join(cells) + "\n"

    def human_text(self) -> str:
        head = ["image", "PSNR (dB)", "SSIM"] + (["LPIPS"] if self.has_lpips else [])
        rows = [[r.id, f"{r.psnr_db:.4f}", f"{r.ssim:.4f}"]
                + ([_fmt(r.lpips, 4)] if self.has_lpips else []) for r in self.records]
        rows.append(["mean", f"{self.mean_psnr:.4f}", f"{self.mean_ssim:.4f}"]
                    + ([f"{self.mean_lpips:.4f}"] if self.has_lpips else []))
        widths = [max(len(str(c)) for c in col) for col in zip(head, *rows)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        out = [f"protocol: {self.protocol.describe()}", fmt.format(*head),
               fmt.format(*("-" * w for w in widths))]
        out += [fmt.format(*r) for r in rows]
        return "\n".join(out) + "\n"


def _fmt(v, digits: int = 6) -> str:
    if v is None:
        return "NA"
    if math.isinf(v):
        return "inf"
    if math.isnan(v):
        return "nan"
    return f"{v:.{digits}f}"


def run_lpips(command, sr_path: Path, hr_path: Path) -> float:
    """Invoke an external LPIPS executable.

    ``command`` (argv list) is run with the SR and HR paths appended and
    must print a single float on stdout.
    """
    out = subprocess.run([*command, str(sr_path), str(hr_path)], check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip())


def evaluate(sr_dir, hr_dir, protocol: Protocol, lpips_command=None) -> EvalReport:
    sr = {p.stem: p for p in sorted(Path(sr_dir).glob("*.png"))}
    hr = {p.stem: p for p in sorted(Path(hr_dir).glob("*.png"))}
    unpaired = sorted(set(sr) ^ set(hr))
    if unpaired:
        raise ValueError("unpaired images: " + ", ".join(unpaired))
    report = EvalReport(protocol)
    if not sr:
        log.warning("no images found in %s and %s", sr_dir, hr_dir)
    for stem in sorted(sr):
        a, b = load_image(sr[stem]), load_image(hr[stem])
        lp = run_lpips(lpips_command, sr[stem], hr[stem]) if lpips_command else None
        report.records.append(ImageRecord(stem, psnr(a, b, protocol), ssim(a, b, protocol), lp))
    return report


def write_report(report: EvalReport, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    machine = out_dir / "report.tsv"
    human = out_dir / "report.txt"
    machine.write_text(report.machine_text(), encoding="utf-8")
    human.write_text(report.human_text(), encoding="utf-8")
    return machine, human
