"""Multi-angle training loop.

Every epoch each training scene is re-rendered at a freshly drawn geometry
(with 3D effects and noise), so the network never sees a scene twice under
the same view. The ``fixed`` strategy pins one geometry and exists as the
control for angle-invariance comparisons.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import SceneSet
from .model import loss_mse_log
from .scene import SZA_RANGE, VZA_RANGE, SceneParams, ViewGeometry, render_scene

log = logging.getLogger(__name__)

STRATEGIES = ("multi", "fixed")
SCHEDULES = ("constant", "cosine")


class TrainConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 4e-3
    lr_schedule: str = "cosine"
    seed: int = 0
    angle_strategy: str = "multi"
    fixed_sza: float = 30.0
    fixed_vza: float = 0.0
    fixed_raz: float = 0.0
    sza_range: tuple[float, float] = (0.0, 60.0)
    vza_range: tuple[float, float] = (0.0, 45.0)
    raz_range: tuple[float, float] = (0.0, 0.0)
    cloud_top_km: float = 1.0
    noise_sigma: float = 0.01
    effects: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise TrainConfigError("lr must be positive")
        if self.lr_schedule not in SCHEDULES:
            raise TrainConfigError(f"lr_schedule must be one of {SCHEDULES}")
        if self.angle_strategy not in STRATEGIES:
            raise TrainConfigError(f"angle_strategy must be one of {STRATEGIES}")
        _check_range("sza_range", self.sza_range, SZA_RANGE)
        _check_range("vza_range", self.vza_range, VZA_RANGE)
        _check_range("raz_range", self.raz_range, (0.0, 360.0))
        # validates the fixed geometry too
        self.fixed_geometry()

    def fixed_geometry(self) -> ViewGeometry:
        return ViewGeometry(self.fixed_sza, self.fixed_vza, self.fixed_raz, self.cloud_top_km)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_range(name, rng, bounds):
    lo, hi = rng
    if not lo <= hi:
        raise TrainConfigError(f"{name} is empty: {rng}")
    if lo < bounds[0] or hi > bounds[1]:
        raise TrainConfigError(f"{name} {rng} exceeds {bounds}")


def sample_uniform_geometry(rng: np.random.Generator, sza_range, vza_range, raz_range,
                            cloud_top_km: float = 1.0) -> ViewGeometry:
    for name, (lo, hi) in (("sza", sza_range), ("vza", vza_range), ("raz", raz_range)):
        if hi < lo:
            raise TrainConfigError(f"empty {name} range ({lo}, {hi})")
    sza = rng.uniform(*sza_range)
    vza = rng.uniform(*vza_range)
    raz = rng.uniform(*raz_range) % 360.0
    return ViewGeometry(float(sza), float(vza), float(raz), cloud_top_km)


def sample_geometry(rng: np.random.Generator, config: TrainConfig) -> ViewGeometry:
    if config.angle_strategy == "fixed":
        return config.fixed_geometry()
    return sample_uniform_geometry(rng, config.sza_range, config.vza_range, config.raz_range,
                                   config.cloud_top_km)


def render_batch(scenes: SceneSet, idx, geoms, params: SceneParams, config: TrainConfig,
                 noise_seeds) -> np.ndarray:
    return np.stack([
        render_scene(scenes.cot(i), g, params, effects=config.effects,
                     noise_sigma=config.noise_sigma, noise_seed=ns).reflectance
        for i, g, ns in zip(idx, geoms, noise_seeds)
    ])


def batch_loss(model, refl, geoms, tau) -> ad.Tensor:
    pred = model.forward_log(refl, geoms)
    if model.predict_log:
        return loss_mse_log(pred, tau)
    diff = ad.sub(pred, tau)
    return ad.mean(ad.mul(diff, diff))


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.lr_schedule == "cosine" and total_steps > 0:
        return 0.5 * config.lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
    return config.lr


@dataclass
class TrainResult:
    model: object
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")


def _validation_set(val: SceneSet, params, config: TrainConfig):
    rng = np.random.default_rng([config.seed, 99])
    geoms = [sample_geometry(rng, config) for _ in range(len(val))]
    seeds = [[s, 99] for s in val.seeds]
    refl = render_batch(val, range(len(val)), geoms, params, config, seeds)
    return refl, geoms


def evaluate_loss(model, refl, geoms, tau, batch_size: int = 64) -> float:
    total = 0.0
    for s in range(0, len(refl), batch_size):
        sl = slice(s, s + batch_size)
        total += batch_loss(model, refl[sl], geoms[sl], tau[sl]).data[0] * len(refl[sl])
    return float(total / max(len(refl), 1))


def train(model, train_set: SceneSet, val_set: SceneSet | None, config: TrainConfig,
          start_epoch: int = 0, progress=None) -> TrainResult:
    """Fit ``model`` in place; the returned model carries the best-validation weights.

    Epoch ``e`` draws its shuffle, geometries and noise from ``rng([seed, e])``
    so a resumed run continues the same stream.
    """
    params = train_set.params
    names = list(model.params)
    opt = ad.Adam([model.params[k] for k in names], lr=config.lr)
    val = _validation_set(val_set, params, config) if val_set is not None and len(val_set) else None
    result = TrainResult(model=model)
    best = None
    n = len(train_set)
    total_steps = config.epochs * -(-n // config.batch_size)
    step = 0
    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        epoch_lr = opt.state.lr = learning_rate(config, step, total_steps)
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            geoms = [sample_geometry(rng, config) for _ in idx]
            noise = [[train_set.seeds[i], epoch, int(k)] for k, i in enumerate(idx)]
            refl = render_batch(train_set, idx, geoms, params, config, noise)
            tau = train_set.tau[idx]
            try:
                with ad.Tape() as tape:
                    loss = batch_loss(model, refl, geoms, tau)
                    if not np.isfinite(loss.data).all():
                        raise ad.NonFiniteError("loss is not finite")
            except ad.NonFiniteError as err:
                seeds = [train_set.seeds[i] for i in idx]
                log.error("non-finite loss in epoch %d, scene seeds %s", epoch, seeds)
                raise TrainingError(f"non-finite loss at epoch {epoch} (scene seeds {seeds})") from err
            opt.zero_grad()
            tape.backward(loss)
            opt.state.lr = learning_rate(config, step, total_steps)
            opt.step()
            step += 1
            losses.append(loss.data[0] * len(idx))
        train_loss = float(np.sum(losses) / n)
        val_loss = evaluate_loss(model, val[0], val[1], val_set.tau) if val else train_loss
        result.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                               "lr": epoch_lr})
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if progress:
            progress(result.history[-1])
        if val_loss < result.best_val:
            result.best_val = val_loss
            result.best_epoch = epoch
            best = {k: v.data.copy() for k, v in model.params.items()}
    if best is not None:
        for k, arr in best.items():
            model.params[k].data = arr
    return result


def clone(model):
    return copy.deepcopy(model)
