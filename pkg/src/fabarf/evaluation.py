"""Registration and view-synthesis metrics, records, and report emission."""
from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .se3 import PoseSE3, pose_errors, procrustes_align

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# Convergence thresholds used for time-to-threshold summaries.
TRANS_THRESHOLDS = (1e-2, 5e-3)
ROT_THRESHOLD_DEG = 0.29

CSV_HEADER = ("iter", "wall_seconds", "rot_err_deg", "trans_err", "train_psnr",
              "test_psnr", "test_ssim", "mode")


class ShapeError(ValueError):
    pass


class WindowError(ValueError):
    pass


@dataclass
class ExperimentRecord:
    iter: int
    wall_seconds: float
    rot_err_deg: float
    trans_err: float
    train_psnr: float
    test_psnr: float
    test_ssim: float
    mode: str

    @property
    def trans_err_x100(self) -> float:
        return 100.0 * self.trans_err


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse <= 0 else -10.0 * math.log10(mse)


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return psnr_from_mse(float(np.mean((a - b) ** 2)))


def _gray(img):
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim(a, b) -> float:
    """Mean SSIM of the luma channels over all fully covered 11x11 windows."""
    x, y = _gray(a), _gray(b)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise WindowError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def registration_errors(estimated: Sequence[PoseSE3], reference: Sequence[PoseSE3]):
    """(rotation deg, translation) after similarity pre-alignment on camera centres."""
    sim = procrustes_align(estimated, reference)
    return pose_errors([sim.apply_pose(p) for p in estimated], reference)


def time_to_threshold(records: Iterable[ExperimentRecord], metric: str, threshold: float):
    """First (iter, wall_seconds) whose ``metric`` falls strictly below ``threshold``."""
    for r in records:
        v = getattr(r, metric)
        if v is not None and np.isfinite(v) and v < threshold:
            return r.iter, r.wall_seconds
    return None, None


def testtime_pose_refine(model, image, init_pose: PoseSE3, steps: int, intrinsics, enc_cfg, samp,
                         lr: float = 1e-3, band_weights=None, full_chain: bool = True):
    """Optimize one view's twist against the photometric loss with the field frozen.

    Returns ``(best_pose, history)`` where ``history`` lists the loss of
    every accepted (improving) step, starting with the initial loss.
    """
    from .optim import AdamState, RayBatch, adam_step, loss_and_grads
    from .renderer import CameraState

    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    pix = np.stack([cols.ravel(), rows.ravel()], axis=1)
    batch = RayBatch(np.zeros(len(pix), dtype=int), pix, img.reshape(-1, 3))
    twist = np.zeros(6)
    state = AdamState.for_params([twist])
    best_pose, best_loss, history = init_pose, None, []
    for it in range(steps + 1):
        cam = CameraState(init_pose, twist.copy())
        step = loss_and_grads(batch, [cam], model, enc_cfg, samp, intrinsics, band_weights,
                              need_params=False, full_chain=full_chain)
        if best_loss is None or step.loss < best_loss:
            best_loss, best_pose = step.loss, cam.pose()
            history.append(step.loss)
        if it == steps:
            break
        adam_step(state, [twist], [step.grad_twists[0]], lr)
    return best_pose, history


# ---------------------------------------------------------------------------
# CSV + summary


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_records(records: Sequence[ExperimentRecord], path, wall_clock: bool = True) -> Path:
    """Write the record CSV; ``wall_clock=False`` zeroes the wall-time column."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for r in records:
            row = list(astuple(r))
            if not wall_clock:
                row[1] = 0.0
            wr.writerow([_fmt(v) for v in row])
    return path


def read_records(path) -> list[ExperimentRecord]:
    out = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = tuple(next(rd))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        for row in rd:
            out.append(ExperimentRecord(int(row[0]), *(float(v) for v in row[1:7]), row[7]))
    return out


def summarize(records: Sequence[ExperimentRecord]) -> str:
    modes = list(dict.fromkeys(r.mode for r in records))
    lines = []
    finals = {}
    for mode in modes:
        rs = [r for r in records if r.mode == mode]
        last = rs[-1]
        finals[mode] = last
        lines.append(f"[{mode}]")
        lines.append(f"  final iter        {last.iter}")
        lines.append(f"  rotation error    {last.rot_err_deg:.4f} deg")
        lines.append(f"  translation error {last.trans_err:.5f} (x100: {last.trans_err_x100:.3f})")
        lines.append(f"  train PSNR        {last.train_psnr:.2f} dB")
        if np.isfinite(last.test_psnr):
            lines.append(f"  test PSNR / SSIM  {last.test_psnr:.2f} dB / {last.test_ssim:.4f}")
        for thr in TRANS_THRESHOLDS:
            it, sec = time_to_threshold(rs, "trans_err", thr)
            lines.append(f"  trans < {thr:g}: " + ("never" if it is None else f"iter {it} ({sec:.1f} s)"))
        it, sec = time_to_threshold(rs, "rot_err_deg", ROT_THRESHOLD_DEG)
        lines.append(f"  rot < {ROT_THRESHOLD_DEG} deg: " + ("never" if it is None else f"iter {it} ({sec:.1f} s)"))
    if len(modes) > 1:
        lines.append("[comparison]")
        for mode in modes:
            f = finals[mode]
            lines.append(f"  {mode:14s} rot {f.rot_err_deg:8.4f} deg  trans {f.trans_err:.5f}")
    return "\n".join(lines) + "\n"


def emit_report(records: Sequence[ExperimentRecord], out_dir, wall_clock: bool = True):
    """Write ``records.csv`` and ``summary.txt`` into ``out_dir``."""
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_records(records, out / "records.csv", wall_clock=wall_clock)
    summary_path = out / "summary.txt"
    summary_path.write_text(summarize(records))
    return csv_path, summary_path
