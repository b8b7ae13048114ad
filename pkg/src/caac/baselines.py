"""Reference retrievals: IPA lookup-table inversion and a per-pixel MLP."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .scene import TAU_MAX, CotField, RadianceField, ViewGeometry, ipa_reflectance


class LutError(ValueError):
    pass


def default_tau_grid(n: int = 256, tau_max: float = TAU_MAX) -> np.ndarray:
    """Zero followed by ``n - 1`` log-spaced knots from 1e-3 to ``tau_max``."""
    if n < 2:
        raise LutError("tau grid needs at least 2 knots")
    if n == 2:
        return np.array([0.0, tau_max])
    return np.concatenate([[0.0], np.geomspace(1e-3, tau_max, n - 1)])


def default_mu0_grid(n: int = 64) -> np.ndarray:
    return np.linspace(math.cos(math.radians(70.0)), 1.0, n)


@dataclass(frozen=True)
class IpaLut:
    tau_grid: np.ndarray
    mu0_grid: np.ndarray
    table: np.ndarray  # [len(mu0_grid), len(tau_grid)]
    g: float

    @property
    def tau_max(self) -> float:
        return float(self.tau_grid[-1])


def build_lut(g: float = 0.85, tau_grid=None, mu0_grid=None) -> IpaLut:
    tau_grid = default_tau_grid() if tau_grid is None else np.asarray(tau_grid, dtype=np.float64)
    mu0_grid = default_mu0_grid() if mu0_grid is None else np.asarray(mu0_grid, dtype=np.float64)
    for name, grid in (("tau", tau_grid), ("mu0", mu0_grid)):
        if grid.ndim != 1 or grid.size == 0:
            raise LutError(f"{name} grid must be a non-empty 1-D array")
        if np.any(np.diff(grid) <= 0):
            raise LutError(f"{name} grid must be strictly ascending")
    table = ipa_reflectance(tau_grid[None, :], mu0_grid[:, None], g)
    if tau_grid.size > 1 and np.any(np.diff(table, axis=1) <= 0):
        raise LutError("reflectance table is not strictly increasing in tau")
    return IpaLut(tau_grid=tau_grid, mu0_grid=mu0_grid, table=table, g=g)


def _invert_row(row: np.ndarray, tau_grid: np.ndarray, r: np.ndarray) -> np.ndarray:
    # binary search for the bracketing knots, then linear interpolation
    j = np.clip(np.searchsorted(row, r, side="right") - 1, 0, row.size - 2)
    r0, r1 = row[j], row[j + 1]
    t = (r - r0) / (r1 - r0)
    return tau_grid[j] + t * (tau_grid[j + 1] - tau_grid[j])


def retrieve_ipa(r: RadianceField, lut: IpaLut) -> tuple[CotField, np.ndarray]:
    """Invert each pixel independently; returns (tau field, saturation mask)."""
    tau, mask = invert_reflectance(r.reflectance, r.geometry.mu0, lut)
    return CotField(tau=tau), mask


def invert_reflectance(refl: np.ndarray, mu0: float, lut: IpaLut) -> tuple[np.ndarray, np.ndarray]:
    grid = lut.mu0_grid
    lo, hi = grid[0], grid[-1]
    tol = 1e-12
    if not lo - tol <= mu0 <= hi + tol:
        raise LutError(f"mu0 = {mu0:.6f} outside LUT range [{lo:.6f}, {hi:.6f}]")
    refl = np.asarray(refl, dtype=np.float64)
    if grid.size == 1:
        i, w = 0, 0.0
    else:
        i = int(np.clip(np.searchsorted(grid, mu0, side="right") - 1, 0, grid.size - 2))
        w = float(np.clip((mu0 - grid[i]) / (grid[i + 1] - grid[i]), 0.0, 1.0))
    rows = [(lut.table[i], 1.0 - w)]
    if grid.size > 1:
        rows.append((lut.table[i + 1], w))
    tau = np.zeros_like(refl)
    rmax = 0.0
    for row, weight in rows:
        if lut.tau_grid.size == 1:
            continue
        tau += weight * _invert_row(row, lut.tau_grid, refl)
        rmax += weight * row[-1]
    saturated = refl >= rmax
    tau = np.where(refl <= 0, 0.0, tau)
    tau = np.where(saturated, lut.tau_max, np.clip(tau, 0.0, lut.tau_max))
    return tau, saturated


class IpaRetriever:
    """Batch adapter used by the evaluation harness."""

    name = "ipa"

    def __init__(self, lut: IpaLut | None = None):
        self.lut = lut or build_lut()

    def __call__(self, refl: np.ndarray, geoms: list[ViewGeometry]) -> np.ndarray:
        return np.stack([invert_reflectance(r, g.mu0, self.lut)[0] for r, g in zip(refl, geoms)])


# -- per-pixel MLP ---------------------------------------------------------


def angle_features(geoms) -> np.ndarray:
    """[cos sza, sin sza, cos vza, sin vza, cos raz, sin raz] per geometry."""
    rows = []
    for g in geoms:
        s, v, a = (math.radians(x) for x in (g.sza_deg, g.vza_deg, g.raz_deg))
        rows.append([math.cos(s), math.sin(s), math.cos(v), math.sin(v), math.cos(a), math.sin(a)])
    return np.array(rows, dtype=np.float64).reshape(len(rows), 6)


LOGIT_EPS = 1e-3


def logit_channel(refl: np.ndarray) -> np.ndarray:
    """log(r + eps) - log(1 - r + eps).

    Under the two-stream law r / (1 - r) is proportional to tau, so this extra
    input channel is close to linear in log tau where the raw reflectance
    saturates.
    """
    return np.log(refl + LOGIT_EPS) - np.log1p(LOGIT_EPS - refl)


@dataclass(frozen=True)
class MlpConfig:
    hidden1: int = 32
    hidden2: int = 32
    angle_features: bool = True
    logit_input: bool = True
    tau_max: float = TAU_MAX

    def to_dict(self) -> dict:
        return asdict(self)


def _xavier(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class PixelMlp:
    """Context-blind regressor: one pixel (plus optional angle features) to log1p(tau)."""

    kind = "mlp"
    predict_log = True

    def __init__(self, config: MlpConfig = MlpConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        n_in = (2 if config.logit_input else 1) + (6 if config.angle_features else 0)
        c = config
        self.params: OrderedDict[str, ad.Tensor] = OrderedDict()
        for name, arr in (
            ("l1.w", _xavier(rng, n_in, c.hidden1)),
            ("l1.b", np.zeros(c.hidden1)),
            ("l2.w", _xavier(rng, c.hidden1, c.hidden2)),
            ("l2.b", np.zeros(c.hidden2)),
            ("out.w", 0.1 * _xavier(rng, c.hidden2, 1)),
            ("out.b", np.zeros(1)),
        ):
            self.params[name] = ad.Tensor(arr, requires_grad=True)

    def forward_log(self, refl: np.ndarray, geoms) -> ad.Tensor:
        b, h, w = refl.shape
        feats = refl.reshape(b, h * w, 1)
        if self.config.logit_input:
            feats = np.concatenate([feats, logit_channel(feats)], axis=2)
        if self.config.angle_features:
            ang = np.repeat(angle_features(geoms)[:, None, :], h * w, axis=1)
            feats = np.concatenate([feats, ang], axis=2)
        p = self.params
        x = ad.constant(feats)
        x = ad.gelu(ad.add(ad.matmul(x, p["l1.w"]), p["l1.b"]))
        x = ad.gelu(ad.add(ad.matmul(x, p["l2.w"]), p["l2.b"]))
        y = ad.add(ad.matmul(x, p["out.w"]), p["out.b"])
        return ad.reshape(y, (b, h, w))

    def predict(self, refl: np.ndarray, geoms, batch_size: int = 64) -> np.ndarray:
        from .model import decode_tau

        outs = []
        for s in range(0, len(refl), batch_size):
            y = self.forward_log(refl[s:s + batch_size], geoms[s:s + batch_size]).data
            outs.append(decode_tau(y, self.config.tau_max, True))
        return np.concatenate(outs)

    __call__ = predict
