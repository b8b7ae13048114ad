"""Synthetic cloud scenes and their rendering to top-of-scene reflectance.

The forward law per pixel is the conservative-scattering two-stream
reflectance ``R = (1-g) tau / (2 mu0 + (1-g) tau)`` over a black surface.
Cross-pixel ("3D") effects are layered on top as three independent knobs:
slope shadowing, radiative smoothing and view parallax. All spatial
operations wrap toroidally.

The COT ranges and scene statistics here are stand-ins chosen for a
desk-scale benchmark, not values taken from any LES or satellite corpus.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

TAU_MAX = 158.0

SZA_RANGE = (0.0, 70.0)
VZA_RANGE = (0.0, 60.0)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class ViewGeometry:
    sza_deg: float = 0.0
    vza_deg: float = 0.0
    raz_deg: float = 0.0
    cloud_top_km: float = 1.0

    def __post_init__(self):
        if not SZA_RANGE[0] <= self.sza_deg <= SZA_RANGE[1]:
            raise SceneError(f"solar zenith {self.sza_deg} outside {SZA_RANGE}")
        if not VZA_RANGE[0] <= self.vza_deg <= VZA_RANGE[1]:
            raise SceneError(f"viewing zenith {self.vza_deg} outside {VZA_RANGE}")
        if not 0.0 <= self.raz_deg < 360.0:
            object.__setattr__(self, "raz_deg", float(self.raz_deg % 360.0))
        if self.cloud_top_km <= 0:
            raise SceneError("cloud_top_km must be positive")

    @property
    def mu0(self) -> float:
        return math.cos(math.radians(self.sza_deg))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SceneParams:
    """Knobs of the synthetic scene generator and the 3D perturbation."""

    beta: float = 3.0
    mu_ln: float = math.log(8.0)
    sigma_ln: float = 0.8
    g: float = 0.85
    kappa: float = 0.3
    eta: float = 0.5
    f_clear: float = 0.1
    tau_max: float = TAU_MAX

    def __post_init__(self):
        if self.beta <= 0:
            raise SceneError("beta must be positive")
        if self.sigma_ln < 0:
            raise SceneError("sigma_ln must be non-negative")
        if not 0 <= self.g < 1:
            raise SceneError("asymmetry parameter g must lie in [0, 1)")
        if not 0 <= self.f_clear < 1:
            raise SceneError("f_clear must lie in [0, 1)")
        if self.kappa < 0 or self.eta < 0:
            raise SceneError("effect gains must be non-negative")
        if self.tau_max <= 0:
            raise SceneError("tau_max must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CotField:
    tau: np.ndarray
    pixel_size_km: float = 0.1
    seed: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.tau.shape


@dataclass
class RadianceField:
    reflectance: np.ndarray
    geometry: ViewGeometry = field(default_factory=ViewGeometry)
    noise_sigma: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.reflectance.shape


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def gaussian_random_field(rng: np.random.Generator, h: int, w: int, beta: float) -> np.ndarray:
    """Zero-mean, unit-variance field with isotropic power spectrum ~ k^-beta."""
    white = rng.standard_normal((h, w))
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    k = np.hypot(ky, kx)
    amp = np.zeros_like(k)
    nz = k > 0
    amp[nz] = k[nz] ** (-beta / 2.0)
    z = np.fft.ifft2(np.fft.fft2(white) * amp).real
    z -= z.mean()
    std = z.std()
    return z / std if std > 0 else z


def generate_cot_field(seed: int, h: int = 32, w: int = 32, params: SceneParams = SceneParams(),
                       pixel_size_km: float = 0.1) -> CotField:
    if not (_is_pow2(h) and _is_pow2(w)) or h < 8 or w < 8:
        raise SceneError(f"scene dimensions must be powers of two >= 8, got {h}x{w}")
    rng = np.random.default_rng(seed)
    z = gaussian_random_field(rng, h, w, params.beta)
    tau = np.exp(params.mu_ln + params.sigma_ln * z)
    if params.f_clear > 0:
        # lowest-z pixels form contiguous clear regions
        n_clear = int(round(params.f_clear * z.size))
        if n_clear:
            order = np.argsort(z, axis=None, kind="stable")
            tau.reshape(-1)[order[:n_clear]] = 0.0
    tau = np.clip(tau, 0.0, params.tau_max)
    return CotField(tau=tau, pixel_size_km=pixel_size_km, seed=seed)


def ipa_reflectance(tau, mu0, g: float = 0.85):
    """Two-stream conservative-scattering reflectance; works on scalars or arrays."""
    scaled = (1.0 - g) * np.asarray(tau, dtype=np.float64)
    r = scaled / (2.0 * mu0 + scaled)
    return float(r) if np.ndim(r) == 0 else r


def ipa_tau(r, mu0, g: float = 0.85):
    """Closed-form inverse of :func:`ipa_reflectance` (the test oracle)."""
    r = np.asarray(r, dtype=np.float64)
    tau = 2.0 * mu0 * r / ((1.0 - g) * (1.0 - r))
    return float(tau) if np.ndim(tau) == 0 else tau


def render_ipa(cot: CotField, geom: ViewGeometry, params: SceneParams = SceneParams()) -> RadianceField:
    r = ipa_reflectance(cot.tau, geom.mu0, params.g)
    return RadianceField(reflectance=np.asarray(r, dtype=np.float64), geometry=geom)


def sun_slope(tau: np.ndarray) -> np.ndarray:
    """Directional derivative of tau along +x (toroidal central difference), max-abs normalized.

    Sunlight is taken to travel along +x, so positive values mark slopes that
    face the sun.
    """
    d = 0.5 * (np.roll(tau, -1, axis=1) - np.roll(tau, 1, axis=1))
    peak = np.abs(d).max()
    return d / peak if peak > 0 else np.zeros_like(d)


def gaussian_blur(field: np.ndarray, sigma_px: float) -> np.ndarray:
    """Toroidal Gaussian blur via the FFT; the DC gain is exactly one."""
    if sigma_px <= 0:
        return field
    h, w = field.shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    transfer = np.exp(-2.0 * (math.pi * sigma_px) ** 2 * (fx**2 + fy**2))
    return np.fft.ifft2(np.fft.fft2(field) * transfer).real


def parallax_shift(geom: ViewGeometry, pixel_size_km: float) -> tuple[int, int, int]:
    """Return (n, dy, dx): the pixel displacement along the view azimuth."""
    n = int(round(geom.cloud_top_km * math.tan(math.radians(geom.vza_deg)) / pixel_size_km))
    az = math.radians(geom.raz_deg)
    dx = int(round(n * math.cos(az)))
    dy = int(round(n * math.sin(az)))
    return n, dy, dx


def apply_3d_effects(r: RadianceField, cot: CotField, geom: ViewGeometry | None = None,
                     params: SceneParams = SceneParams()) -> RadianceField:
    """Shadowing, then radiative smoothing, then parallax, then clamp to [0, 1]."""
    geom = geom or r.geometry
    if r.shape != cot.shape:
        raise SceneError(f"radiance {r.shape} and COT {cot.shape} shapes differ")
    out = r.reflectance
    tan_sza = math.tan(math.radians(geom.sza_deg))
    if params.kappa > 0 and tan_sza > 0:
        out = out * (1.0 + params.kappa * tan_sza * sun_slope(cot.tau))
    if params.eta > 0:
        out = gaussian_blur(out, params.eta * math.sqrt(cot.tau.mean()))
    _, dy, dx = parallax_shift(geom, cot.pixel_size_km)
    if dy or dx:
        out = np.roll(out, (dy, dx), axis=(0, 1))
    if out is not r.reflectance:
        out = np.clip(out, 0.0, 1.0)
    return RadianceField(reflectance=out, geometry=geom, noise_sigma=r.noise_sigma)


def add_noise(r: RadianceField, sigma: float, seed) -> RadianceField:
    if sigma < 0:
        raise SceneError("noise sigma must be non-negative")
    if sigma == 0:
        return r
    rng = np.random.default_rng(seed)
    noisy = np.clip(r.reflectance + sigma * rng.standard_normal(r.shape), 0.0, 1.0)
    return RadianceField(reflectance=noisy, geometry=r.geometry, noise_sigma=sigma)


def render_scene(cot: CotField, geom: ViewGeometry, params: SceneParams = SceneParams(),
                 effects: bool = True, noise_sigma: float = 0.0, noise_seed=None) -> RadianceField:
    """Full rendering chain: IPA law, optional 3D effects, optional noise."""
    r = render_ipa(cot, geom, params)
    if effects:
        r = apply_3d_effects(r, cot, geom, params)
    if noise_sigma > 0:
        r = add_noise(r, noise_sigma, noise_seed)
    return r


def without_effects(params: SceneParams) -> SceneParams:
    return replace(params, kappa=0.0, eta=0.0)
