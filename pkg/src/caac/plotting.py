"""Figure output.

Two kinds of files are written:

* Netpbm rasters with a fixed byte layout, so golden tests can compare bytes.
  ``P5`` (grayscale) is ``b"P5\\n<W> <H>\\n255\\n"`` followed by W*H unsigned
  bytes, row-major from the top-left pixel. ``P6`` (false colour) has the
  same header with ``P6`` and 3 bytes (R, G, B) per pixel. Values are mapped
  to bytes by ``floor(255 * clip((v - vmin) / (vmax - vmin), 0, 1) + 0.5)``.
* matplotlib PNG figures for reading by eye.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# black -> blue -> cyan -> yellow -> white
_RAMP = np.array([
    [0.0, 0, 0, 0],
    [0.25, 0, 0, 255],
    [0.5, 0, 255, 255],
    [0.75, 255, 255, 0],
    [1.0, 255, 255, 255],
], dtype=np.float64)


def to_bytes(values: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    span = vmax - vmin
    scaled = np.zeros_like(values) if span <= 0 else np.clip((values - vmin) / span, 0.0, 1.0)
    return np.floor(255.0 * scaled + 0.5).astype(np.uint8)


def false_color(values: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    """[H, W] -> [H, W, 3] uint8 via the fixed five-stop ramp."""
    span = vmax - vmin
    t = np.zeros(np.shape(values)) if span <= 0 else np.clip((np.asarray(values) - vmin) / span, 0, 1)
    rgb = np.stack([np.interp(t, _RAMP[:, 0], _RAMP[:, c]) for c in (1, 2, 3)], axis=-1)
    return np.floor(rgb + 0.5).astype(np.uint8)


def pgm_bytes(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, dtype=np.uint8).tobytes()


def ppm_bytes(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def read_netpbm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, body = data.split(b"\n", 3)
    w, h = (int(x) for x in dims.split())
    if magic == b"P5":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    raise ValueError(f"{path}: unsupported netpbm magic {magic!r}")


def write_pgm(path, values, vmin, vmax) -> None:
    Path(path).write_bytes(pgm_bytes(to_bytes(values, vmin, vmax)))


def write_ppm(path, values, vmin, vmax) -> None:
    Path(path).write_bytes(ppm_bytes(false_color(values, vmin, vmax)))


def _style():
    plt.rcParams.update({
        "font.size": 9,
        "axes.titlesize": 9,
        "axes.labelsize": 9,
        "legend.fontsize": 8,
        "figure.dpi": 100,
    })


def _save(fig, path) -> None:
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def scene_maps(out_dir, truth: np.ndarray, pred: np.ndarray, tau_max: float,
               err_max: float | None = None, title: str = "") -> list[Path]:
    """Truth, prediction and absolute-error maps as PGM/PPM plus one PNG panel."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    err = np.abs(pred - truth)
    emax = float(err_max) if err_max is not None else max(float(err.max()), 1.0)
    vmax = max(float(truth.max()), float(pred.max()), 1.0)
    written = []
    for name, arr, hi in (("tau_truth", truth, vmax), ("tau_pred", pred, vmax), ("tau_error", err, emax)):
        write_pgm(out / f"{name}.pgm", arr, 0.0, hi)
        write_ppm(out / f"{name}.ppm", arr, 0.0, hi)
        written += [out / f"{name}.pgm", out / f"{name}.ppm"]

    _style()
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2), constrained_layout=True)
    for ax, (label, arr, hi, cmap) in zip(axes, (
        ("truth", truth, vmax, "viridis"),
        ("retrieved", pred, vmax, "viridis"),
        ("|error|", err, emax, "magma"),
    )):
        im = ax.imshow(arr, vmin=0, vmax=hi, cmap=cmap, interpolation="nearest")
        ax.set_title(f"COT {label}")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, shrink=0.8)
    if title:
        fig.suptitle(title)
    _save(fig, out / "scene.png")
    written.append(out / "scene.png")
    return written


def error_vs_angle(out_dir, metrics_list) -> list[Path]:
    """One CSV row per evaluated geometry (per method) and a PNG of RMSE vs solar zenith."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "sza", "vza", "raz", "rmse_tau", "mae_tau", "rmse_log"])
    for m in metrics_list:
        for r in m.per_geometry:
            w.writerow([m.method] + [repr(float(r[k])) for k in ("sza", "vza", "raz")]
                       + [repr(round(float(r[k]), 10)) for k in ("rmse_tau", "mae_tau", "rmse_log")])
    csv_path = out / "error_vs_angle.csv"
    csv_path.write_text(buf.getvalue())

    _style()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2), constrained_layout=True)
    for m in metrics_list:
        for ax, bins in ((ax1, m.sza_bins), (ax2, m.vza_bins)):
            if bins:
                ax.plot([b["lo"] for b in bins], [b["rmse_tau"] for b in bins], marker="o", label=m.method)
    ax1.set_xlabel("solar zenith bin start (deg)")
    ax2.set_xlabel("viewing zenith bin start (deg)")
    for ax in (ax1, ax2):
        ax.set_ylabel("RMSE of COT")
        ax.grid(alpha=0.3)
    ax1.legend()
    png = out / "error_vs_angle.png"
    _save(fig, png)
    return [csv_path, png]


def history_plot(path, history: list[dict]) -> None:
    _style()
    fig, ax = plt.subplots(figsize=(4.5, 3.2), constrained_layout=True)
    ep = [h["epoch"] for h in history]
    ax.plot(ep, [h["train_loss"] for h in history], label="train")
    ax.plot(ep, [h["val_loss"] for h in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE of log1p(COT)")
    ax.set_yscale("log")
    ax.legend()
    _save(fig, path)
