"""The six evaluation measures: Dice, IoU, MAE, weighted F-measure, structure
measure and max enhanced-alignment, plus per-dataset reports.

Dice/IoU run on predictions binarized at 0.5; MAE and the three
saliency-lineage measures consume the continuous map. Degenerate-mask
conventions are pinned here (empty/full ground truth, identical maps).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

from .data import DatasetManifest, bilinear_resize
from .netpbm import read_image, read_mask, read_pnm, write_image
from .tensor import Tensor, _sigmoid64

__all__ = [
    "binarize",
    "dice",
    "iou",
    "mae",
    "f_beta_w",
    "s_alpha",
    "e_phi_max",
    "SampleMetrics",
    "MetricReport",
    "evaluate_dataset",
]

_EPS = float(np.finfo(np.float64).eps)
_N_THRESHOLDS = 256


def _check_shapes(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def binarize(pred: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Threshold a [0,1] map; pixels >= tau (inclusive) become foreground."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"binarize: tau must be inside (0,1), got {tau}")
    return pred >= tau


def dice(p: np.ndarray, g: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both maps are empty."""
    _check_shapes(p, g, "dice")
    p = p.astype(bool)
    g = g.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def iou(p: np.ndarray, g: np.ndarray) -> float:
    """|P∩G| / |P∪G|; 1.0 when both maps are empty."""
    _check_shapes(p, g, "iou")
    p = p.astype(bool)
    g = g.astype(bool)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def mae(pred: np.ndarray, g: np.ndarray) -> float:
    _check_shapes(pred, g, "mae")
    return float(np.mean(np.abs(pred.astype(np.float64) - g.astype(np.float64))))


# ---------------------------------------------------------------------------
# weighted F-measure


def _nearest_foreground(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact euclidean distance to the nearest foreground pixel plus its
    coordinates. Ties break to the first foreground pixel in row-major order."""
    h, w = g.shape
    fg = np.argwhere(g)
    yy, xx = np.mgrid[0:h, 0:w]
    pix = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    best_d2 = np.full(h * w, np.inf)
    best_i = np.zeros(h * w, dtype=np.int64)
    chunk = 4096
    fgf = fg.astype(np.float64)
    for lo in range(0, pix.shape[0], chunk):
        p = pix[lo:lo + chunk]
        d2 = ((p[:, None, :] - fgf[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)
        best_d2[lo:lo + chunk] = d2[np.arange(p.shape[0]), idx]
        best_i[lo:lo + chunk] = idx
    ny = fg[best_i, 0].reshape(h, w)
    nx = fg[best_i, 1].reshape(h, w)
    return np.sqrt(best_d2).reshape(h, w), ny, nx


def _gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate_zero_pad(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.astype(np.float64), ((ph, ph), (pw, pw)))
    out = np.zeros_like(x, dtype=np.float64)
    h, w = x.shape
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * xp[i:i + h, j:j + w]
    return out


def f_beta_w(pred: np.ndarray, g: np.ndarray) -> float:
    """Weighted F-measure (beta^2 = 1) with dependency- and position-weighted
    errors. Empty ground truth: 1 if the prediction is empty-ish (mean below
    1e-6), else 0."""
    _check_shapes(pred, g, "f_beta_w")
    gt = g.astype(bool)
    if not gt.any():
        return 1.0 if float(pred.mean()) < 1e-6 else 0.0
    d = pred.astype(np.float64)
    dgt = gt.astype(np.float64)
    e = np.abs(d - dgt)
    dist, ny, nx = _nearest_foreground(gt)
    et = e.copy()
    bg = ~gt
    et[bg] = e[ny[bg], nx[bg]]
    ea = _correlate_zero_pad(et, _gaussian_kernel(7, 5.0))
    min_e_ea = e.copy()
    swap = gt & (ea < e)
    min_e_ea[swap] = ea[swap]
    b = np.ones_like(d)
    b[bg] = 2.0 - np.exp(np.log(0.5) / 5.0 * dist[bg])
    ew = min_e_ea * b
    tpw = dgt.sum() - ew[gt].sum()
    fpw = ew[bg].sum()
    rec = 1.0 - ew[gt].mean()
    prec = tpw / (_EPS + tpw + fpw)
    return float(2.0 * prec * rec / (_EPS + prec + rec))


# ---------------------------------------------------------------------------
# structure measure


def _object_score(vals: np.ndarray) -> float:
    if vals.size == 0:
        return 0.0
    x = float(vals.mean())
    sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sd + _EPS)


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = pred[gt]
    bg = (1.0 - pred)[~gt]
    u = float(gt.mean())
    return u * _object_score(fg) + (1.0 - u) * _object_score(bg)


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    """1-based centroid column/row, rounding half up."""
    rows, cols = gt.shape
    total = gt.sum()
    if total == 0:
        return _round_half_up(cols / 2.0), _round_half_up(rows / 2.0)
    i = np.arange(1, cols + 1, dtype=np.float64)
    j = np.arange(1, rows + 1, dtype=np.float64)
    x = _round_half_up(float((gt.sum(axis=0) * i).sum() / total))
    y = _round_half_up(float((gt.sum(axis=1) * j).sum() / total))
    return x, y


def _blocks(arr: np.ndarray, x: int, y: int) -> list[np.ndarray]:
    return [arr[:y, :x], arr[:y, x:], arr[y:, :x], arr[y:, x:]]


def _ssim_block(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x = float(pred.mean())
    y = float(gt.mean())
    sig_x = float(((pred - x) ** 2).sum()) / (n - 1 + _EPS)
    sig_y = float(((gt - y) ** 2).sum()) / (n - 1 + _EPS)
    sig_xy = float(((pred - x) * (gt - y)).sum()) / (n - 1 + _EPS)
    alpha = 4.0 * x * y * sig_xy
    beta = (x * x + y * y) * (sig_x + sig_y)
    if alpha != 0.0:
        return alpha / (beta + _EPS)
    return 1.0 if beta == 0.0 else 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    x, y = _centroid(gt)
    total = gt.size
    gt_blocks = _blocks(gt.astype(np.float64), x, y)
    pr_blocks = _blocks(pred, x, y)
    score = 0.0
    for gb, pb in zip(gt_blocks, pr_blocks):
        w = gb.size / total
        if gb.size:
            score += w * _ssim_block(pb, gb)
    return score


def s_alpha(pred: np.ndarray, g: np.ndarray) -> float:
    """Structure measure: 0.5*object + 0.5*region similarity.

    Pinned degenerate conventions: all-zero G -> 1 - mean(pred); all-one
    G -> mean(pred). Negative scores clamp to 0."""
    _check_shapes(pred, g, "s_alpha")
    gt = g.astype(bool)
    d = pred.astype(np.float64)
    y = float(gt.mean())
    if y == 0.0:
        return 1.0 - float(d.mean())
    if y == 1.0:
        return float(d.mean())
    q = 0.5 * _s_object(d, gt) + 0.5 * _s_region(d, gt)
    return max(q, 0.0)


# ---------------------------------------------------------------------------
# enhanced alignment


def _e_phi_binary(fm: np.ndarray, gt: np.ndarray) -> float:
    if np.array_equal(fm, gt):
        return 1.0
    dfm = fm.astype(np.float64)
    dgt = gt.astype(np.float64)
    if not gt.any():
        enhanced = 1.0 - dfm
    elif gt.all():
        enhanced = dfm
    else:
        afm = dfm - dfm.mean()
        agt = dgt - dgt.mean()
        align = 2.0 * agt * afm / (agt * agt + afm * afm + _EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    score = float(enhanced.sum() / (gt.size - 1 + _EPS))
    return min(score, 1.0)


def e_phi_max(pred: np.ndarray, g: np.ndarray) -> float:
    """Max over 256 thresholds k/255 of the enhanced-alignment value.

    Binarized maps identical to G score exactly 1; scores clamp to [0,1]."""
    _check_shapes(pred, g, "e_phi_max")
    gt = g.astype(bool)
    best = 0.0
    for k in range(_N_THRESHOLDS):
        fm = pred >= (k / (_N_THRESHOLDS - 1))
        best = max(best, _e_phi_binary(fm, gt))
    return best


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class SampleMetrics:
    id: str
    size_ratio: float
    dice: float
    iou: float
    fbw: float
    salpha: float
    ephi: float
    mae: float


_COLUMNS = [f.name for f in fields(SampleMetrics)][1:]
CSV_HEADER = "id," + ",".join(_COLUMNS)


class MetricReport:
    """Per-sample metric rows plus arithmetic-mean aggregates."""

    def __init__(self, rows: list[SampleMetrics]):
        self.rows = list(rows)

    def __len__(self) -> int:
        return len(self.rows)

    def means(self) -> dict[str, float]:
        if not self.rows:
            raise ValueError("empty report has no means")
        return {c: float(np.mean([getattr(r, c) for r in self.rows])) for c in _COLUMNS}

    def to_csv(self, path) -> None:
        m = self.means()
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(CSV_HEADER + "\n")
            for r in self.rows:
                f.write(f"{r.id},{r.size_ratio!r},{r.dice:.6f},{r.iou:.6f},"
                        f"{r.fbw:.6f},{r.salpha:.6f},{r.ephi:.6f},{r.mae:.6f}\n")
            f.write(f"MEAN,{m['size_ratio']!r},{m['dice']:.6f},{m['iou']:.6f},"
                    f"{m['fbw']:.6f},{m['salpha']:.6f},{m['ephi']:.6f},{m['mae']:.6f}\n")

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        rows = []
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().rstrip("\n")
            if header != CSV_HEADER:
                raise ValueError(f"{path}: unexpected report header {header!r}")
            for line in f:
                parts = line.rstrip("\n").split(",")
                if len(parts) != 8:
                    raise ValueError(f"{path}: malformed row {line!r}")
                if parts[0] == "MEAN":
                    continue
                rows.append(SampleMetrics(parts[0], *[float(v) for v in parts[1:]]))
        return cls(rows)


def compute_sample(sid: str, prob: np.ndarray, mask: np.ndarray,
                   tau: float = 0.5) -> SampleMetrics:
    gt = mask.astype(bool)
    pb = binarize(prob, tau)
    return SampleMetrics(
        id=sid,
        size_ratio=float(gt.sum()) / gt.size,
        dice=dice(pb, gt),
        iou=iou(pb, gt),
        fbw=f_beta_w(prob, gt),
        salpha=s_alpha(prob, gt),
        ephi=e_phi_max(prob, gt),
        mae=mae(prob, gt),
    )


def _predict_probs(model, images: np.ndarray, batch_size: int) -> np.ndarray:
    h, w = model.cfg.input_size
    outs = []
    for lo in range(0, images.shape[0], batch_size):
        batch = images[lo:lo + batch_size]
        if batch.shape[2:] != (h, w):
            batch = bilinear_resize(batch, (h, w))
        preds = model.forward(Tensor(batch))
        outs.append(_sigmoid64(preds.final.data.astype(np.float64)))
    return np.concatenate(outs, axis=0)


def evaluate_dataset(source, manifest: DatasetManifest, split: str = "test",
                     batch_size: int = 8, pred_out_dir=None) -> MetricReport:
    """Evaluate a model or a folder of PGM prediction maps against a manifest
    split. Per-sample order follows the manifest; probabilities are resized
    to each mask's extent before scoring."""
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"manifest has no {split!r} samples")
    masks = []
    for e in entries:
        masks.append(read_mask(manifest.resolve(e.mask_path))[0])

    if isinstance(source, (str, os.PathLike)):
        probs = []
        for e, mask in zip(entries, masks):
            path = os.path.join(source, e.id + ".pgm")
            if not os.path.exists(path):
                raise FileNotFoundError(f"missing prediction for sample {e.id}: {path}")
            prob = read_pnm(path).astype(np.float64) / 255.0
            if prob.shape != mask.shape:
                raise ValueError(f"sample {e.id}: prediction extent {prob.shape} "
                                 f"does not match mask extent {mask.shape}")
            probs.append(prob)
    else:
        images = np.stack([read_image(manifest.resolve(e.image_path)) for e in entries])
        raw = _predict_probs(source, images, batch_size)
        probs = [raw[i, 0] for i in range(raw.shape[0])]

    rows = []
    for e, prob, mask in zip(entries, probs, masks):
        if prob.shape != mask.shape:
            prob = bilinear_resize(prob, mask.shape).astype(np.float64)
        rows.append(compute_sample(e.id, np.clip(prob, 0.0, 1.0), mask))
        if pred_out_dir is not None:
            write_image(np.asarray(prob, dtype=np.float64)[None], os.path.join(pred_out_dir, e.id + ".pgm"))
    return MetricReport(rows)
