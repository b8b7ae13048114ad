"""Angle-sweep evaluation, metrics and method comparison."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import SceneSet
from .scene import SceneParams, ViewGeometry, render_scene

REL_TAU_MIN = 0.1
BIN_WIDTH_DEG = 10.0
METRIC_FIELDS = ("n_pixels", "rmse_tau", "mae_tau", "rmse_log", "mre", "saturation_fraction")


class HygieneError(ValueError):
    """Train and test scenes overlap, or compared metrics come from different testsets."""


class GridSyntaxError(ValueError):
    pass


# -- angle grid ------------------------------------------------------------


def _axis_values(spec: str) -> list[float]:
    parts = spec.split(":")
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        raise GridSyntaxError(f"bad number in {spec!r}") from None
    if len(nums) == 1:
        return nums
    if len(nums) != 3:
        raise GridSyntaxError(f"expected start:stop:step, got {spec!r}")
    start, stop, step = nums
    if step <= 0 or stop < start:
        raise GridSyntaxError(f"empty or ill-formed range {spec!r}")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [start + i * step for i in range(n)]


def parse_angle_grid(text: str, cloud_top_km: float = 1.0) -> list[ViewGeometry]:
    """Parse ``"sza=0:60:15,vza=0:45:15[,raz=...]"``; stops are inclusive.

    Missing axes default to 0. Geometries are ordered sza-major, then vza, then raz.
    """
    axes = {"sza": [0.0], "vza": [0.0], "raz": [0.0]}
    for item in filter(None, (t.strip() for t in text.split(","))):
        m = re.fullmatch(r"(sza|vza|raz)\s*=\s*(\S+)", item)
        if not m:
            raise GridSyntaxError(f"cannot parse angle spec {item!r}")
        axes[m.group(1)] = _axis_values(m.group(2))
    try:
        return [ViewGeometry(s, v, r, cloud_top_km)
                for s in axes["sza"] for v in axes["vza"] for r in axes["raz"]]
    except ValueError as err:
        raise GridSyntaxError(str(err)) from err


def format_angle_grid(grid: list[ViewGeometry]) -> str:
    return ";".join(f"{g.sza_deg:g}/{g.vza_deg:g}/{g.raz_deg:g}" for g in grid)


# -- statistics ------------------------------------------------------------


@dataclass
class ErrorStats:
    """Additive sufficient statistics for every metric."""

    n: int = 0
    sq: float = 0.0
    abs: float = 0.0
    sq_log: float = 0.0
    rel: float = 0.0
    n_rel: int = 0
    saturated: int = 0

    def add(self, other: "ErrorStats") -> "ErrorStats":
        return ErrorStats(*(getattr(self, f) + getattr(other, f) for f in self.__dataclass_fields__))

    @classmethod
    def from_arrays(cls, pred: np.ndarray, truth: np.ndarray, tau_max: float) -> "ErrorStats":
        err = pred - truth
        dlog = np.log1p(pred) - np.log1p(truth)
        thick = truth > REL_TAU_MIN
        return cls(
            n=int(err.size),
            sq=float(np.sum(err * err)),
            abs=float(np.sum(np.abs(err))),
            sq_log=float(np.sum(dlog * dlog)),
            rel=float(np.sum(np.abs(err[thick]) / truth[thick])),
            n_rel=int(thick.sum()),
            saturated=int(np.sum(pred >= tau_max)),
        )

    def summary(self) -> dict:
        n = max(self.n, 1)
        return {
            "n_pixels": self.n,
            "rmse_tau": math.sqrt(self.sq / n),
            "mae_tau": self.abs / n,
            "rmse_log": math.sqrt(self.sq_log / n),
            "mre": self.rel / self.n_rel if self.n_rel else 0.0,
            "saturation_fraction": self.saturated / n,
        }


def flatness_of(rmses: list[float]) -> float:
    """Worst over best per-bin RMSE; 1 when all bins agree (including all-zero)."""
    if not rmses:
        return 1.0
    hi, lo = max(rmses), min(rmses)
    if hi == lo:
        return 1.0
    return hi / lo if lo > 0 else math.inf


@dataclass
class Metrics:
    method: str
    overall: dict
    sza_bins: list[dict] = field(default_factory=list)
    vza_bins: list[dict] = field(default_factory=list)
    per_geometry: list[dict] = field(default_factory=list)
    testset_id: str = ""
    config_hash: str = ""

    @property
    def rmse_tau(self) -> float:
        return self.overall["rmse_tau"]

    @property
    def flatness(self) -> float:
        return flatness_of([b["rmse_tau"] for b in self.sza_bins])

    @property
    def worst_bin_rmse(self) -> float:
        return max((b["rmse_tau"] for b in self.sza_bins), default=self.rmse_tau)

    @property
    def flatness_vza(self) -> float:
        return flatness_of([b["rmse_tau"] for b in self.vza_bins])


def _bin_lo(angle: float) -> float:
    return math.floor(angle / BIN_WIDTH_DEG) * BIN_WIDTH_DEG


def metrics_from_stats(method: str, per_geom: list[tuple[ViewGeometry, ErrorStats]],
                       testset_id: str = "", config_hash: str = "") -> Metrics:
    total = ErrorStats()
    sza: dict[float, ErrorStats] = {}
    vza: dict[float, ErrorStats] = {}
    rows = []
    for g, st in per_geom:
        total = total.add(st)
        ks, kv = _bin_lo(g.sza_deg), _bin_lo(g.vza_deg)
        sza[ks] = sza.get(ks, ErrorStats()).add(st)
        vza[kv] = vza.get(kv, ErrorStats()).add(st)
        rows.append({"sza": g.sza_deg, "vza": g.vza_deg, "raz": g.raz_deg, **st.summary()})

    def bins(d):
        return [{"lo": k, "hi": k + BIN_WIDTH_DEG, **d[k].summary()} for k in sorted(d)]

    return Metrics(method=method, overall=total.summary(), sza_bins=bins(sza), vza_bins=bins(vza),
                   per_geometry=rows, testset_id=testset_id, config_hash=config_hash)


# -- evaluation ------------------------------------------------------------


class OracleRetriever:
    """Returns the truth; checks that the evaluation plumbing adds no error."""

    name = "oracle"
    oracle = True

    def __call__(self, refl, geoms, truth=None):
        return np.array(truth, dtype=np.float64, copy=True)


def testset_identifier(testset: SceneSet, grid, effects: bool, noise_sigma: float) -> str:
    blob = json.dumps({
        "seeds": [int(s) for s in testset.seeds],
        "params": testset.params.to_dict(),
        "shape": [testset.height, testset.width, testset.pixel_size_km],
        "grid": [g.to_dict() for g in grid],
        "effects": bool(effects),
        "noise": float(noise_sigma),
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def worker_count() -> int:
    env = os.environ.get("CAAC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def render_testset(testset: SceneSet, geom: ViewGeometry, k: int, params: SceneParams,
                   effects: bool, noise_sigma: float, workers: int = 1) -> np.ndarray:
    """All test scenes rendered at one grid geometry (index ``k`` seeds the noise)."""

    def one(i):
        return render_scene(testset.cot(i), geom, params, effects=effects, noise_sigma=noise_sigma,
                            noise_seed=[int(testset.seeds[i]), k, 7]).reflectance

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return np.stack(list(pool.map(one, range(len(testset)))))
    return np.stack([one(i) for i in range(len(testset))])


def evaluate(retriever, testset: SceneSet, grid: list[ViewGeometry], *, method: str | None = None,
             effects: bool = True, noise_sigma: float = 0.01, params: SceneParams | None = None,
             exclude_seeds=None, batch_size: int = 64, tau_max: float | None = None,
             config_hash: str = "") -> Metrics:
    """Render every test scene at every grid geometry, retrieve, and score."""
    if exclude_seeds is not None:
        overlap = set(int(s) for s in testset.seeds) & set(int(s) for s in exclude_seeds)
        if overlap:
            raise HygieneError(f"{len(overlap)} test scenes also used in training, e.g. {min(overlap)}")
    params = params or testset.params
    tau_max = params.tau_max if tau_max is None else tau_max
    workers = worker_count()
    is_oracle = getattr(retriever, "oracle", False)
    per_geom = []
    for k, g in enumerate(grid):
        refl = render_testset(testset, g, k, params, effects, noise_sigma, workers)
        stats = ErrorStats()
        for s in range(0, len(refl), batch_size):
            sl = slice(s, s + batch_size)
            geoms = [g] * len(refl[sl])
            if is_oracle:
                pred = retriever(refl[sl], geoms, truth=testset.tau[sl])
            else:
                pred = retriever(refl[sl], geoms)
            stats = stats.add(ErrorStats.from_arrays(pred, testset.tau[sl], tau_max))
        per_geom.append((g, stats))
    name = method or getattr(retriever, "name", None) or getattr(retriever, "kind", "model")
    return metrics_from_stats(name, per_geom, testset_identifier(testset, grid, effects, noise_sigma),
                              config_hash)


# -- CSV -------------------------------------------------------------------

_HEADER = ("method", "bin", "lo", "hi") + METRIC_FIELDS + ("flatness",)
_GEOM_HEADER = ("method", "sza", "vza", "raz") + METRIC_FIELDS


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(float(v), 10)) if math.isfinite(v) else str(float(v))
    return str(v)


def metrics_to_csv(m: Metrics) -> str:
    buf = io.StringIO()
    buf.write(f"# caac-metrics v1\n# method={m.method}\n# config_hash={m.config_hash}\n"
              f"# testset={m.testset_id}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_HEADER)
    w.writerow([m.method, "overall", "", ""] + [_fmt(m.overall[f]) for f in METRIC_FIELDS]
               + [_fmt(m.flatness)])
    for kind, bins in (("sza", m.sza_bins), ("vza", m.vza_bins)):
        for b in bins:
            w.writerow([m.method, kind, _fmt(b["lo"]), _fmt(b["hi"])]
                       + [_fmt(b[f]) for f in METRIC_FIELDS] + [""])
    return buf.getvalue()


def geometry_csv(m: Metrics) -> str:
    buf = io.StringIO()
    buf.write(f"# caac-geometry-errors v1\n# method={m.method}\n# config_hash={m.config_hash}\n"
              f"# testset={m.testset_id}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_GEOM_HEADER)
    for r in m.per_geometry:
        w.writerow([m.method] + [_fmt(r[k]) for k in ("sza", "vza", "raz")]
                   + [_fmt(r[f]) for f in METRIC_FIELDS])
    return buf.getvalue()


def geometry_path(metrics_path) -> Path:
    p = Path(metrics_path)
    return p.with_name(p.stem + ".geometry.csv")


def write_metrics(path, m: Metrics) -> None:
    Path(path).write_text(metrics_to_csv(m))
    geometry_path(path).write_text(geometry_csv(m))


def _read_commented(path) -> tuple[dict, list[dict]]:
    meta, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, sep, val = line[1:].strip().partition("=")
            if sep:
                meta[key.strip()] = val.strip()
        elif line.strip():
            lines.append(line)
    return meta, list(csv.DictReader(lines))


def _num(row, keys) -> dict:
    out = {}
    for k in keys:
        v = row[k]
        out[k] = int(v) if k == "n_pixels" else float(v)
    return out


def read_metrics(path) -> Metrics:
    meta, rows = _read_commented(path)
    if not rows or "bin" not in rows[0]:
        raise ValueError(f"{path}: not a metrics CSV")
    overall, sza, vza = None, [], []
    for r in rows:
        vals = _num(r, METRIC_FIELDS)
        if r["bin"] == "overall":
            overall = vals
        else:
            (sza if r["bin"] == "sza" else vza).append({"lo": float(r["lo"]), "hi": float(r["hi"]), **vals})
    if overall is None:
        raise ValueError(f"{path}: no overall row")
    per_geom = []
    gp = geometry_path(path)
    if gp.exists():
        _, grows = _read_commented(gp)
        per_geom = [{**{k: float(r[k]) for k in ("sza", "vza", "raz")}, **_num(r, METRIC_FIELDS)}
                    for r in grows]
    return Metrics(method=meta.get("method", rows[0]["method"]), overall=overall, sza_bins=sza,
                   vza_bins=vza, per_geometry=per_geom, testset_id=meta.get("testset", ""),
                   config_hash=meta.get("config_hash", ""))


# -- comparison ------------------------------------------------------------


@dataclass
class Comparison:
    reference: str
    rows: list[dict]
    testset_id: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# caac-compare v1\n# reference={self.reference}\n# testset={self.testset_id}\n")
        cols = ["method", "rmse_tau", "mae_tau", "rmse_log", "mre", "flatness", "worst_bin_rmse",
                "rmse_ratio", "rmse_log_ratio"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in cols])
        return buf.getvalue()

    def table(self) -> str:
        head = f"{'method':<16}{'RMSE tau':>10}{'MAE tau':>10}{'RMSE log':>10}{'flatness':>10}" \
               f"{'worst bin':>11}{'ratio':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r['method']:<16}{r['rmse_tau']:>10.3f}{r['mae_tau']:>10.3f}"
                         f"{r['rmse_log']:>10.4f}{r['flatness']:>10.3f}{r['worst_bin_rmse']:>11.3f}"
                         f"{r['rmse_ratio']:>8.2f}")
        lines.append(f"ratio = method RMSE / {self.reference} RMSE")
        return "\n".join(lines)


def compare(metrics: list[Metrics], reference: str | None = None) -> Comparison:
    if not metrics:
        raise ValueError("nothing to compare")
    ids = {m.testset_id for m in metrics}
    if len(ids) > 1:
        raise HygieneError(f"metrics come from different testsets: {sorted(ids)}")
    names = [m.method for m in metrics]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate method labels: {names}")
    ref_name = reference or names[0]
    try:
        ref = metrics[names.index(ref_name)]
    except ValueError:
        raise ValueError(f"reference {ref_name!r} not among {names}") from None

    def ratio(a, b):
        if a == b:
            return 1.0
        return a / b if b > 0 else math.inf

    rows = []
    for m in metrics:
        rows.append({
            "method": m.method,
            **{k: m.overall[k] for k in ("rmse_tau", "mae_tau", "rmse_log", "mre")},
            "flatness": m.flatness,
            "worst_bin_rmse": m.worst_bin_rmse,
            "rmse_ratio": ratio(m.rmse_tau, ref.rmse_tau),
            "rmse_log_ratio": ratio(m.overall["rmse_log"], ref.overall["rmse_log"]),
        })
    return Comparison(reference=ref_name, rows=rows, testset_id=ids.pop())
