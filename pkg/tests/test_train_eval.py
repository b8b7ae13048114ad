import math
from dataclasses import replace

import numpy as np
import pytest

from caac.baselines import IpaRetriever, build_lut
from caac.dataset import DataConfig, build_split
from caac.evaluate import (
    ErrorStats,
    GridSyntaxError,
    HygieneError,
    OracleRetriever,
    compare,
    evaluate,
    flatness_of,
    parse_angle_grid,
    read_metrics,
    write_metrics,
)
from caac.model import CaacConfig, CaacModel
from caac.scene import SceneParams
from caac.train import TrainConfig, TrainConfigError, learning_rate, sample_geometry, train

TINY_MODEL = CaacConfig(patch=4, d_model=16, heads=2, layers=1, d_ff=16, angle_mlp=8)
CFG = DataConfig(height=16, width=16)


@pytest.fixture(scope="module")
def scenes():
    params = SceneParams()
    return {
        "train": build_split(list(range(100, 108)), CFG, params, 0),
        "val": build_split(list(range(200, 204)), CFG, params, 1),
        "test": build_split(list(range(300, 306)), CFG, params, 2),
    }


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"lr": 0.0}, {"angle_strategy": "sometimes"},
                                    {"sza_range": (0.0, 80.0)}, {"vza_range": (30.0, 10.0)},
                                    {"lr_schedule": "step"}])
    def test_rejects(self, kw):
        with pytest.raises(TrainConfigError):
            TrainConfig(**kw)

    def test_uniform_sampling_mean(self):
        rng = np.random.default_rng(0)
        cfg = TrainConfig()
        sza = [sample_geometry(rng, cfg).sza_deg for _ in range(10_000)]
        assert abs(np.mean(sza) - 30.0) < 1.0
        assert 0.0 <= min(sza) and max(sza) <= 60.0

    def test_fixed_strategy(self):
        cfg = TrainConfig(angle_strategy="fixed", fixed_sza=40.0, fixed_vza=5.0)
        rng = np.random.default_rng(0)
        gs = {(g.sza_deg, g.vza_deg, g.raz_deg) for g in (sample_geometry(rng, cfg) for _ in range(20))}
        assert gs == {(40.0, 5.0, 0.0)}

    def test_cosine_schedule(self):
        cfg = TrainConfig(lr=1e-3, lr_schedule="cosine")
        assert learning_rate(cfg, 0, 100) == pytest.approx(1e-3)
        assert learning_rate(cfg, 50, 100) == pytest.approx(5e-4)
        assert learning_rate(cfg, 100, 100) == pytest.approx(0.0, abs=1e-18)
        assert learning_rate(TrainConfig(lr=1e-3, lr_schedule="constant"), 70, 100) == 1e-3


class TestTraining:
    def test_deterministic(self, scenes):
        cfg = TrainConfig(epochs=2, batch_size=4, lr=1e-3)
        runs = []
        for _ in range(2):
            m = CaacModel(TINY_MODEL, seed=0)
            res = train(m, scenes["train"], scenes["val"], cfg)
            runs.append((m, res.history))
        assert runs[0][1] == runs[1][1]
        for k in runs[0][0].params:
            assert runs[0][0].params[k].data.tobytes() == runs[1][0].params[k].data.tobytes()

    def test_loss_decreases(self, scenes):
        m = CaacModel(TINY_MODEL, seed=0)
        res = train(m, scenes["train"], None, TrainConfig(epochs=6, batch_size=4, lr=3e-3))
        assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]

    def test_resume_numbering(self, scenes):
        m = CaacModel(TINY_MODEL, seed=0)
        res = train(m, scenes["train"], scenes["val"], TrainConfig(epochs=2, batch_size=4), start_epoch=3)
        assert [h["epoch"] for h in res.history] == [4, 5]

    def test_keeps_best_weights(self, scenes):
        m = CaacModel(TINY_MODEL, seed=0)
        res = train(m, scenes["train"], scenes["val"], TrainConfig(epochs=3, batch_size=4, lr=1e-3))
        best = min(res.history, key=lambda h: h["val_loss"])
        assert res.best_epoch == best["epoch"]


class TestAngleGrid:
    def test_sweep(self):
        grid = parse_angle_grid("sza=0:60:15,vza=0:45:15")
        assert len(grid) == 20
        assert [(g.sza_deg, g.vza_deg) for g in grid[:5]] == [(0, 0), (0, 15), (0, 30), (0, 45), (15, 0)]

    def test_single_values(self):
        grid = parse_angle_grid("sza=30,vza=10,raz=90")
        assert len(grid) == 1 and grid[0].raz_deg == 90.0

    @pytest.mark.parametrize("text", ["sza=0:60", "sza=a:b:c", "zenith=10", "sza=60:0:15",
                                      "sza=0:90:15", "vza=0:45:0"])
    def test_errors(self, text):
        with pytest.raises(GridSyntaxError):
            parse_angle_grid(text)


class TestMetrics:
    def test_stats_are_additive(self):
        rng = np.random.default_rng(0)
        truth = rng.uniform(0, 50, size=(4, 8, 8))
        pred = np.clip(truth + rng.normal(0, 2, size=truth.shape), 0, None)
        whole = ErrorStats.from_arrays(pred, truth, 158.0).summary()
        parts = ErrorStats.from_arrays(pred[:1], truth[:1], 158.0).add(
            ErrorStats.from_arrays(pred[1:], truth[1:], 158.0)).summary()
        for k in whole:
            assert whole[k] == pytest.approx(parts[k], rel=1e-12)
        assert whole["rmse_tau"] == pytest.approx(math.sqrt(np.mean((pred - truth) ** 2)))

    def test_flatness(self):
        assert flatness_of([2.0, 4.0, 3.0]) == 2.0
        assert flatness_of([0.0, 0.0]) == 1.0

    def test_oracle_is_exact(self, scenes):
        m = evaluate(OracleRetriever(), scenes["test"], parse_angle_grid("sza=0:60:15,vza=0:45:15"))
        assert m.rmse_tau == 0.0 and m.flatness == 1.0
        assert m.overall["saturation_fraction"] == 0.0

    def test_ipa_clean_is_near_exact(self, scenes):
        grid = parse_angle_grid("sza=0:60:30,vza=0")
        m = evaluate(IpaRetriever(build_lut()), scenes["test"], grid, effects=False, noise_sigma=0.0)
        assert m.overall["rmse_log"] < 1e-3

    def test_bins(self, scenes):
        m = evaluate(OracleRetriever(), scenes["test"], parse_angle_grid("sza=0:60:15,vza=0:45:15"))
        assert [b["lo"] for b in m.sza_bins] == [0, 10, 30, 40, 60]
        assert [b["lo"] for b in m.vza_bins] == [0, 10, 30, 40]

    def test_hygiene(self, scenes):
        with pytest.raises(HygieneError):
            evaluate(OracleRetriever(), scenes["test"], parse_angle_grid("sza=0"),
                     exclude_seeds=[300])

    def test_csv_round_trip(self, scenes, tmp_path):
        grid = parse_angle_grid("sza=0:60:30,vza=0:30:30")
        m = evaluate(IpaRetriever(), scenes["test"], grid, method="ipa", config_hash="abc")
        write_metrics(tmp_path / "ipa.csv", m)
        back = read_metrics(tmp_path / "ipa.csv")
        assert back.method == "ipa" and back.testset_id == m.testset_id and back.config_hash == "abc"
        assert back.rmse_tau == pytest.approx(m.rmse_tau, rel=1e-9)
        assert len(back.per_geometry) == len(grid)

    def test_compare(self, scenes):
        grid = parse_angle_grid("sza=0:60:30,vza=0")
        ipa = evaluate(IpaRetriever(), scenes["test"], grid, method="ipa")
        oracle = evaluate(OracleRetriever(), scenes["test"], grid, method="oracle")
        comp = compare([ipa, oracle], reference="ipa")
        assert comp.rows[0]["rmse_ratio"] == 1.0 and comp.rows[0]["rmse_log_ratio"] == 1.0
        assert comp.rows[1]["rmse_ratio"] == 0.0
        other = evaluate(OracleRetriever(), scenes["val"], grid, method="val")
        with pytest.raises(HygieneError):
            compare([ipa, other])
        other_noise = evaluate(OracleRetriever(), scenes["test"], grid, method="n", noise_sigma=0.05)
        with pytest.raises(HygieneError):
            compare([ipa, other_noise])

    def test_model_evaluates(self, scenes):
        m = evaluate(CaacModel(replace(TINY_MODEL), seed=0), scenes["test"], parse_angle_grid("sza=15"))
        assert np.isfinite(m.rmse_tau)
