import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caac.dataset import (
    DataConfig,
    DatasetError,
    audit_manifest,
    make_dataset,
    read_sceneset,
    write_sceneset,
)
from caac.scene import (
    CotField,
    RadianceField,
    SceneError,
    SceneParams,
    ViewGeometry,
    add_noise,
    apply_3d_effects,
    gaussian_blur,
    generate_cot_field,
    ipa_reflectance,
    parallax_shift,
    render_ipa,
)

NO_EFFECTS = SceneParams(kappa=0.0, eta=0.0)


class TestCotField:
    def test_deterministic(self):
        a = generate_cot_field(7, 32, 32)
        b = generate_cot_field(7, 32, 32)
        assert a.tau.tobytes() == b.tau.tobytes()

    def test_different_seeds_differ(self):
        assert not np.array_equal(generate_cot_field(1).tau, generate_cot_field(2).tau)

    def test_degenerate_variance_is_constant(self):
        p = SceneParams(sigma_ln=0.0, f_clear=0.0)
        tau = generate_cot_field(3, 16, 16, p).tau
        np.testing.assert_allclose(tau, 8.0, rtol=1e-12)

    def test_lognormal_mean(self):
        p = SceneParams(f_clear=0.0)
        means = [generate_cot_field(s, 32, 32, p).tau.mean() for s in range(200)]
        target = 8.0 * math.exp(0.32)
        assert abs(np.mean(means) - target) < 0.1 * target

    def test_bounds_and_clear_fraction(self):
        p = SceneParams(f_clear=0.25, mu_ln=math.log(60.0), sigma_ln=1.5)
        tau = generate_cot_field(11, 32, 32, p).tau
        assert tau.min() >= 0 and tau.max() <= p.tau_max
        assert np.isclose((tau == 0).mean(), 0.25, atol=1 / 1024)

    @pytest.mark.parametrize("shape", [(12, 16), (16, 24), (4, 4)])
    def test_rejects_bad_dimensions(self, shape):
        with pytest.raises(SceneError):
            generate_cot_field(0, *shape)

    def test_param_validation(self):
        with pytest.raises(SceneError):
            SceneParams(beta=0.0)
        with pytest.raises(SceneError):
            SceneParams(g=1.0)
        with pytest.raises(SceneError):
            SceneParams(f_clear=1.0)


class TestGeometry:
    def test_ranges(self):
        with pytest.raises(SceneError):
            ViewGeometry(sza_deg=75.0)
        with pytest.raises(SceneError):
            ViewGeometry(vza_deg=61.0)
        assert ViewGeometry(raz_deg=370.0).raz_deg == pytest.approx(10.0)


class TestIpaReflectance:
    def test_examples(self):
        assert ipa_reflectance(0.0, 1.0, 0.85) == 0.0
        assert ipa_reflectance(10.0, 1.0, 0.85) == pytest.approx(1.5 / 3.5, rel=1e-14)
        assert ipa_reflectance(10.0, 0.5, 0.85) == pytest.approx(0.6, rel=1e-14)

    @pytest.mark.parametrize("mu0", [math.cos(math.radians(70)), 0.5, 0.8, 1.0])
    @pytest.mark.parametrize("g", [0.0, 0.5, 0.85, 0.95])
    def test_strictly_monotone(self, mu0, g):
        tau = np.linspace(0.0, 158.0, 1000)
        r = ipa_reflectance(tau, mu0, g)
        assert np.all(np.diff(r) > 0)
        assert r.min() >= 0 and r.max() < 1


class TestRender:
    def test_constant_field(self):
        cot = CotField(np.full((8, 8), 12.0))
        r = render_ipa(cot, ViewGeometry(30.0))
        assert np.all(r.reflectance == r.reflectance[0, 0])

    def test_brighter_at_low_sun(self):
        cot = generate_cot_field(5)
        r0 = render_ipa(cot, ViewGeometry(0.0)).reflectance
        r60 = render_ipa(cot, ViewGeometry(60.0)).reflectance
        cloudy = cot.tau > 0
        assert np.all(r60[cloudy] > r0[cloudy])


class TestEffects:
    def test_zero_effects_identity(self):
        cot = generate_cot_field(2)
        r = render_ipa(cot, ViewGeometry(0.0, 0.0))
        out = apply_3d_effects(r, cot, ViewGeometry(0.0, 0.0), SceneParams(eta=0.0))
        assert out.reflectance.tobytes() == r.reflectance.tobytes()
        # gains zero with oblique sun is identity too
        g = ViewGeometry(50.0, 0.0)
        r = render_ipa(cot, g)
        out = apply_3d_effects(r, cot, g, NO_EFFECTS)
        assert out.reflectance.tobytes() == r.reflectance.tobytes()

    def test_parallax_worked_example(self):
        n, dy, dx = parallax_shift(ViewGeometry(0.0, 45.0, 0.0, cloud_top_km=1.0), 0.1)
        assert (n, dy, dx) == (10, 0, 10)
        n, dy, dx = parallax_shift(ViewGeometry(0.0, 45.0, 90.0, cloud_top_km=1.0), 0.1)
        assert (n, dy, dx) == (10, 10, 0)

    def test_parallax_moves_field(self):
        cot = generate_cot_field(4)
        g = ViewGeometry(0.0, 45.0, 0.0)
        r = render_ipa(cot, g)
        out = apply_3d_effects(r, cot, g, NO_EFFECTS)
        np.testing.assert_array_equal(out.reflectance, np.roll(r.reflectance, 10, axis=1))

    def test_constant_field_has_no_shadow(self):
        cot = CotField(np.full((16, 16), 9.0))
        g = ViewGeometry(60.0, 0.0)
        r = render_ipa(cot, g)
        with_shadow = apply_3d_effects(r, cot, g, SceneParams(kappa=0.3, eta=0.0))
        np.testing.assert_array_equal(with_shadow.reflectance, r.reflectance)

    def test_shadow_darkens_down_sun_slopes(self):
        x = np.arange(32)
        tau = np.tile(10.0 + 5.0 * np.sin(2 * np.pi * x / 32), (32, 1))
        cot = CotField(tau)
        g = ViewGeometry(45.0, 0.0)
        r = render_ipa(cot, g)
        out = apply_3d_effects(r, cot, g, SceneParams(kappa=0.3, eta=0.0)).reflectance
        rising, falling = 1, 16 + 1  # d(tau)/dx > 0 near x=0, < 0 near x=16
        assert out[0, rising] > r.reflectance[0, rising]
        assert out[0, falling] < r.reflectance[0, falling]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 5.0))
    def test_blur_preserves_mean(self, seed, sigma):
        f = np.random.default_rng(seed).uniform(0, 1, size=(32, 16))
        assert abs(gaussian_blur(f, sigma).mean() - f.mean()) < 1e-6

    def test_output_in_unit_interval(self):
        p = SceneParams(kappa=2.0, eta=0.5)
        for s in range(5):
            cot = generate_cot_field(s)
            g = ViewGeometry(70.0, 30.0, 45.0)
            out = apply_3d_effects(render_ipa(cot, g, p), cot, g, p).reflectance
            assert out.min() >= 0 and out.max() <= 1


class TestNoise:
    def _field(self):
        return RadianceField(np.random.default_rng(0).uniform(0.2, 0.8, size=(64, 64)))

    def test_zero_sigma_identity(self):
        r = self._field()
        assert add_noise(r, 0.0, 1).reflectance is r.reflectance

    def test_sample_std(self):
        r = self._field()
        diff = add_noise(r, 0.02, 3).reflectance - r.reflectance
        assert abs(diff.std() - 0.02) < 0.002

    def test_deterministic(self):
        r = self._field()
        a, b = add_noise(r, 0.05, 9), add_noise(r, 0.05, 9)
        assert a.reflectance.tobytes() == b.reflectance.tobytes()

    def test_negative_sigma(self):
        with pytest.raises(SceneError):
            add_noise(self._field(), -0.1, 0)


SMALL = DataConfig(n_train=2, n_val=2, n_test=2, height=16, width=16)


class TestDataset:
    def test_two_scene_round_trip(self, tmp_path):
        cfg = replace(SMALL, n_train=2, n_val=0, n_test=0)
        make_dataset(tmp_path, cfg, SceneParams(), master_seed=1)
        ss = read_sceneset(tmp_path / "train.caacds")
        assert len(ss) == 2 and all(r.shape == (1, 16, 16) for r in ss.reflectance)
        write_sceneset(tmp_path / "again.caacds", ss)
        again = read_sceneset(tmp_path / "again.caacds")
        assert again.tau.tobytes() == ss.tau.tobytes()
        assert all(a.tobytes() == b.tobytes() for a, b in zip(again.reflectance, ss.reflectance))
        assert again.geometries == ss.geometries and again.seeds == ss.seeds

    def test_file_layout(self, tmp_path):
        make_dataset(tmp_path, SMALL, SceneParams())
        raw = (tmp_path / "test.caacds").read_bytes()
        assert raw[:8] == b"CAACDS1\n"
        meta_end = raw.index(b"\n", 8)
        payload = raw[meta_end + 1:]
        assert len(payload) == 2 * 2 * 16 * 16 * 4

    def test_byte_identical(self, tmp_path):
        make_dataset(tmp_path / "a", SMALL, SceneParams(), master_seed=3)
        make_dataset(tmp_path / "b", SMALL, SceneParams(), master_seed=3)
        for name in ("train.caacds", "val.caacds", "test.caacds", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_splits_disjoint(self, tmp_path):
        manifest = make_dataset(tmp_path, SMALL, SceneParams(), master_seed=5)
        seeds = [s for e in manifest["splits"].values() for s in e["seeds"]]
        assert len(seeds) == len(set(seeds)) == 6
        manifest["splits"]["test"]["seeds"][0] = manifest["splits"]["train"]["seeds"][0]
        with pytest.raises(DatasetError):
            audit_manifest(manifest)

    def test_values_in_range(self, tmp_path):
        make_dataset(tmp_path, SMALL, SceneParams())
        ss = read_sceneset(tmp_path / "train.caacds")
        assert ss.tau.min() >= 0 and ss.tau.max() <= 158
        assert all(r.min() >= 0 and r.max() <= 1 for r in ss.reflectance)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.caacds").write_bytes(b"NOTADATA\n{}\n")
        with pytest.raises(DatasetError):
            read_sceneset(tmp_path / "x.caacds")

    def test_invalid_config(self):
        with pytest.raises(DatasetError):
            DataConfig(n_train=-1)

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            make_dataset(blocker / "sub", SMALL, SceneParams())
