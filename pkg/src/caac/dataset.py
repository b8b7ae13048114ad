"""CAACDS1 dataset files and the scene-set generator.

Byte layout of a ``.caacds`` file::

    b"CAACDS1\\n"                      8-byte magic
    <UTF-8 JSON metadata>\\n           one line, keys sorted
    float32 little-endian payloads    per scene: tau (H*W), then each
                                      reflectance field (H*W) in order

The JSON line carries ``schema``, ``n``, ``height``, ``width``,
``pixel_size_km``, ``field_order``, ``geometries`` (per scene list),
``seeds`` and the scene parameters. A sibling ``manifest.json`` lists every
split with its seeds and geometries.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import (
    CotField,
    SceneParams,
    ViewGeometry,
    generate_cot_field,
    render_scene,
)

MAGIC = b"CAACDS1\n"
SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass
class SceneSet:
    """One split held in memory."""

    tau: np.ndarray  # [N, H, W]
    reflectance: list[np.ndarray]  # per scene: [G, H, W]
    geometries: list[list[ViewGeometry]]
    seeds: list[int]
    pixel_size_km: float = 0.1
    params: SceneParams = field(default_factory=SceneParams)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.seeds)

    @property
    def height(self) -> int:
        return self.tau.shape[1]

    @property
    def width(self) -> int:
        return self.tau.shape[2]

    def cot(self, i: int) -> CotField:
        return CotField(tau=self.tau[i], pixel_size_km=self.pixel_size_km, seed=self.seeds[i])


def _metadata(ss: SceneSet, extra: dict | None = None) -> dict:
    n, h, w = ss.tau.shape
    meta = {
        "schema": SCHEMA_VERSION,
        "n": n,
        "height": h,
        "width": w,
        "pixel_size_km": ss.pixel_size_km,
        "field_order": ["tau", "reflectance*"],
        "geometries": [[g.to_dict() for g in gs] for gs in ss.geometries],
        "seeds": [int(s) for s in ss.seeds],
        "scene_params": ss.params.to_dict(),
    }
    meta.update(ss.meta)
    if extra:
        meta.update(extra)
    return meta


def write_sceneset(path, ss: SceneSet, extra: dict | None = None) -> None:
    meta = _metadata(ss, extra)
    line = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    le = np.dtype("<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(line + b"\n")
        for i in range(len(ss)):
            fh.write(ss.tau[i].astype(le).tobytes())
            for r in ss.reflectance[i]:
                fh.write(np.asarray(r).astype(le).tobytes())


def read_sceneset(path) -> SceneSet:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DatasetError(f"{path}: not a CAACDS1 file")
        meta = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if meta.get("schema") != SCHEMA_VERSION:
        raise DatasetError(f"{path}: unsupported schema {meta.get('schema')}")
    n, h, w = meta["n"], meta["height"], meta["width"]
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    counts = [len(g) for g in meta["geometries"]]
    expected = h * w * sum(1 + c for c in counts)
    if values.size != expected or len(counts) != n:
        raise DatasetError(f"{path}: payload has {values.size} values, expected {expected}")
    tau = np.empty((n, h, w))
    refl = []
    pos = 0
    for i, c in enumerate(counts):
        tau[i] = values[pos:pos + h * w].reshape(h, w)
        pos += h * w
        refl.append(values[pos:pos + c * h * w].reshape(c, h, w))
        pos += c * h * w
    core = {"schema", "n", "height", "width", "pixel_size_km", "field_order", "geometries",
            "seeds", "scene_params"}
    return SceneSet(
        tau=tau,
        reflectance=refl,
        geometries=[[ViewGeometry(**g) for g in gs] for gs in meta["geometries"]],
        seeds=list(meta["seeds"]),
        pixel_size_km=meta["pixel_size_km"],
        params=SceneParams(**meta["scene_params"]),
        meta={k: v for k, v in meta.items() if k not in core},
    )


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 800
    n_val: int = 100
    n_test: int = 100
    height: int = 32
    width: int = 32
    pixel_size_km: float = 0.1
    cloud_top_km: float = 1.0
    geometries_per_scene: int = 1
    sza_range: tuple[float, float] = (0.0, 60.0)
    vza_range: tuple[float, float] = (0.0, 45.0)
    raz_range: tuple[float, float] = (0.0, 360.0)
    noise_sigma: float = 0.01
    effects: bool = True

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise DatasetError(f"{name} must be non-negative")
        if self.geometries_per_scene < 1:
            raise DatasetError("geometries_per_scene must be >= 1")
        if self.noise_sigma < 0:
            raise DatasetError("noise_sigma must be non-negative")

    def counts(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


def split_seeds(master_seed: int, cfg: DataConfig) -> dict[str, list[int]]:
    """Disjoint contiguous seed ranges per split."""
    base = int(master_seed) * 1_000_000
    out, start = {}, base
    for split, n in cfg.counts().items():
        out[split] = list(range(start, start + n))
        start += n
    return out


def build_split(seeds: list[int], cfg: DataConfig, params: SceneParams, split_index: int) -> SceneSet:
    from .train import sample_uniform_geometry

    taus, refls, geoms = [], [], []
    for seed in seeds:
        cot = generate_cot_field(seed, cfg.height, cfg.width, params, cfg.pixel_size_km)
        rng = np.random.default_rng([seed, split_index, 1])
        gs, rs = [], []
        for k in range(cfg.geometries_per_scene):
            g = sample_uniform_geometry(rng, cfg.sza_range, cfg.vza_range, cfg.raz_range,
                                        cfg.cloud_top_km)
            r = render_scene(cot, g, params, effects=cfg.effects, noise_sigma=cfg.noise_sigma,
                             noise_seed=[seed, k, 2])
            gs.append(g)
            rs.append(r.reflectance)
        taus.append(cot.tau)
        geoms.append(gs)
        refls.append(np.stack(rs))
    tau = np.stack(taus) if taus else np.zeros((0, cfg.height, cfg.width))
    return SceneSet(tau=tau, reflectance=refls, geometries=geoms, seeds=list(seeds),
                    pixel_size_km=cfg.pixel_size_km, params=params)


def make_dataset(out_dir, cfg: DataConfig, params: SceneParams, master_seed: int = 0,
                 config_hash: str = "") -> dict:
    """Generate train/val/test splits under ``out_dir``; return the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create dataset directory {out}: {err}") from err
    if not os.access(out, os.W_OK):
        raise OSError(f"dataset directory {out} is not writable")
    seeds = split_seeds(master_seed, cfg)
    manifest = {"schema": SCHEMA_VERSION, "master_seed": master_seed, "config_hash": config_hash,
                "splits": {}}
    for idx, split in enumerate(SPLITS):
        ss = build_split(seeds[split], cfg, params, idx)
        fname = f"{split}.caacds"
        write_sceneset(out / fname, ss, {"split": split, "config_hash": config_hash,
                                         "noise_sigma": cfg.noise_sigma, "effects": cfg.effects})
        manifest["splits"][split] = {
            "file": fname,
            "n": len(ss),
            "seeds": seeds[split],
            "geometries": [[g.to_dict() for g in gs] for gs in ss.geometries],
        }
    audit_manifest(manifest)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def audit_manifest(manifest: dict) -> None:
    """Raise if any seed appears in more than one split."""
    seen: dict[int, str] = {}
    for split, entry in manifest["splits"].items():
        for s in entry["seeds"]:
            if s in seen:
                raise DatasetError(f"seed {s} appears in both {seen[s]} and {split}")
            seen[s] = split


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    with open(path) as fh:
        return json.load(fh)


def load_split(data_dir, split: str) -> SceneSet:
    path = Path(data_dir)
    if path.is_file():
        return read_sceneset(path)
    return read_sceneset(path / f"{split}.caacds")
