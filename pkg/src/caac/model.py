"""Cloud-Attention-Net with Angle Coding.

A radiance field is cut into non-overlapping ``patch x patch`` tiles, each
tile is linearly embedded and given a sinusoidal position code, the viewing
geometry is coded by a small MLP and injected into the token stream, and a
stack of pre-norm self-attention blocks mixes spatial context. A linear head
maps each token back to ``patch**2`` per-pixel values of ``log1p(tau)``.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .baselines import MlpConfig, PixelMlp, angle_features, logit_channel
from .scene import TAU_MAX

ANGLE_MODES = ("additive", "concat", "off")
POSITIONAL_MODES = ("grid", "flat", "off")
CKPT_MAGIC = b"CAACCKPT1\n"


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CaacConfig:
    patch: int = 4
    d_model: int = 64
    heads: int = 8
    layers: int = 3
    d_ff: int = 128
    angle_mlp: int = 64
    angle_mode: str = "additive"
    predict_log: bool = True
    positional: str = "grid"
    logit_input: bool = True
    tau_max: float = TAU_MAX

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ModelConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 2:
            raise ModelConfigError("d_model must be even for sinusoidal positions")
        if self.positional not in POSITIONAL_MODES:
            raise ModelConfigError(f"positional must be one of {POSITIONAL_MODES}")
        if self.positional == "grid" and self.d_model % 4:
            raise ModelConfigError("grid positions need d_model divisible by 4")
        if self.angle_mode not in ANGLE_MODES:
            raise ModelConfigError(f"angle_mode must be one of {ANGLE_MODES}")
        if min(self.patch, self.layers + 1, self.d_ff, self.angle_mlp) < 1:
            raise ModelConfigError("sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """pe[t, 2i] = sin(t / 10000^(2i/d)), pe[t, 2i+1] = cos(same)."""
    pos = np.arange(n)[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2) / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def grid_positions(rows: int, cols: int, d: int) -> np.ndarray:
    """Row code in the first d/2 channels, column code in the rest; [rows*cols, d]."""
    r = sinusoidal_positions(rows, d // 2)
    c = sinusoidal_positions(cols, d // 2)
    return np.concatenate([np.repeat(r, cols, axis=0), np.tile(c, (rows, 1))], axis=1)


def patchify(refl: np.ndarray, patch: int) -> np.ndarray:
    """[B, H, W] -> [B, T, patch**2], tiles in row-major order."""
    b, h, w = refl.shape
    if h % patch or w % patch:
        raise ModelConfigError(f"patch {patch} does not divide field {h}x{w}")
    x = refl.reshape(b, h // patch, patch, w // patch, patch)
    return x.transpose(0, 1, 3, 2, 4).reshape(b, (h // patch) * (w // patch), patch * patch)


def unpatchify(tokens: np.ndarray, h: int, w: int, patch: int) -> np.ndarray:
    b = tokens.shape[0]
    x = tokens.reshape(b, h // patch, w // patch, patch, patch)
    return x.transpose(0, 1, 3, 2, 4).reshape(b, h, w)


def decode_tau(y: np.ndarray, tau_max: float, predict_log: bool) -> np.ndarray:
    tau = np.expm1(y) if predict_log else y
    return np.clip(tau, 0.0, tau_max)


def loss_mse_log(pred: ad.Tensor, tau: np.ndarray) -> ad.Tensor:
    """Mean squared error between predicted log1p(tau) and the truth's log1p."""
    if pred.shape != np.shape(tau):
        raise ad.ShapeError(f"prediction {pred.shape} vs target {np.shape(tau)}")
    diff = ad.sub(pred, np.log1p(tau))
    return ad.mean(ad.mul(diff, diff))


def _xavier(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _linear(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.matmul(x, w), b)


def self_attention(x: ad.Tensor, p: dict, heads: int):
    """Multi-head scaled dot-product self-attention on [B, T, d]; returns (out, weights)."""
    bsz, t, d = x.shape
    dh = d // heads

    def split(z):
        return ad.transpose(ad.reshape(z, (bsz, t, heads, dh)), (0, 2, 1, 3))

    q = split(_linear(x, p["q.w"], p["q.b"]))
    k = split(_linear(x, p["k.w"], p["k.b"]))
    v = split(_linear(x, p["v.w"], p["v.b"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = ad.softmax(scores)
    ctx = ad.matmul(weights, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (bsz, t, d))
    return _linear(ctx, p["o.w"], p["o.b"]), weights.data


def encoder_block(x: ad.Tensor, p: dict, heads: int):
    """Pre-norm block: x + attn(LN(x)), then + ffn(LN(.)). Returns (tokens, attention)."""
    attn, weights = self_attention(ad.layer_norm(x, p["ln1.g"], p["ln1.b"]), p, heads)
    x = ad.add(x, attn)
    hdn = ad.gelu(_linear(ad.layer_norm(x, p["ln2.g"], p["ln2.b"]), p["ff1.w"], p["ff1.b"]))
    x = ad.add(x, _linear(hdn, p["ff2.w"], p["ff2.b"]))
    return x, weights


class CaacModel:
    kind = "caac"

    def __init__(self, config: CaacConfig = CaacConfig(), seed: int = 0):
        self.config = config
        self.predict_log = config.predict_log
        self.last_attention: list[np.ndarray] = []
        self.params: OrderedDict[str, ad.Tensor] = OrderedDict()
        rng = np.random.default_rng(seed)
        c = config
        p2, d = c.patch * c.patch, c.d_model

        def put(name, arr):
            self.params[name] = ad.Tensor(arr, requires_grad=True)

        n_in = 2 * p2 if c.logit_input else p2
        put("embed.w", _xavier(rng, n_in, d))
        put("embed.b", np.zeros(d))
        if c.angle_mode != "off":
            put("angle.w1", _xavier(rng, 6, c.angle_mlp))
            put("angle.b1", np.zeros(c.angle_mlp))
            put("angle.w2", _xavier(rng, c.angle_mlp, d))
            put("angle.b2", np.zeros(d))
        for i in range(c.layers):
            pre = f"blocks.{i}."
            put(pre + "ln1.g", np.ones(d))
            put(pre + "ln1.b", np.zeros(d))
            for proj in "qkvo":
                put(pre + f"{proj}.w", _xavier(rng, d, d))
                put(pre + f"{proj}.b", np.zeros(d))
            put(pre + "ln2.g", np.ones(d))
            put(pre + "ln2.b", np.zeros(d))
            put(pre + "ff1.w", _xavier(rng, d, c.d_ff))
            put(pre + "ff1.b", np.zeros(c.d_ff))
            put(pre + "ff2.w", _xavier(rng, c.d_ff, d))
            put(pre + "ff2.b", np.zeros(d))
        put("lnf.g", np.ones(d))
        put("lnf.b", np.zeros(d))
        put("head.w", 0.1 * _xavier(rng, d, p2))
        put("head.b", np.zeros(p2))

    def layer_params(self, i: int) -> dict:
        pre = f"blocks.{i}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def angle_code(self, geoms) -> ad.Tensor:
        """Geometry code of width d_model per geometry, shape [B, d]."""
        feats = angle_features(geoms)
        if self.config.angle_mode == "off":
            return ad.constant(np.zeros((len(feats), self.config.d_model)))
        p = self.params
        hdn = ad.gelu(_linear(ad.constant(feats), p["angle.w1"], p["angle.b1"]))
        return _linear(hdn, p["angle.w2"], p["angle.b2"])

    def tokenize(self, refl: np.ndarray) -> ad.Tensor:
        c = self.config
        refl = np.asarray(refl, dtype=np.float64)
        patches = patchify(refl, c.patch)
        b, t, _ = patches.shape
        if c.logit_input:
            patches = np.concatenate([patches, logit_channel(patches)], axis=2)
        tokens = _linear(ad.constant(patches), self.params["embed.w"], self.params["embed.b"])
        if c.positional != "off":
            if c.positional == "grid":
                pe = grid_positions(refl.shape[1] // c.patch, refl.shape[2] // c.patch, c.d_model)
            else:
                pe = sinusoidal_positions(t, c.d_model)
            tokens = ad.add(tokens, ad.constant(np.broadcast_to(pe, (b, t, c.d_model))))
        return tokens

    def encode(self, tokens: ad.Tensor) -> ad.Tensor:
        self.last_attention = []
        for i in range(self.config.layers):
            tokens, weights = encoder_block(tokens, self.layer_params(i), self.config.heads)
            self.last_attention.append(weights)
        return tokens

    def forward_log(self, refl: np.ndarray, geoms) -> ad.Tensor:
        """Network output (log1p tau when predict_log) on the pixel grid, [B, H, W]."""
        c = self.config
        refl = np.asarray(refl, dtype=np.float64)
        if refl.ndim == 2:
            refl = refl[None]
        b, h, w = refl.shape
        tokens = self.tokenize(refl)
        t = tokens.shape[1]
        if c.angle_mode == "additive":
            tokens = ad.add(tokens, ad.expand(self.angle_code(geoms), 1, t))
        elif c.angle_mode == "concat":
            code = ad.reshape(self.angle_code(geoms), (b, 1, c.d_model))
            tokens = ad.concat([tokens, code], axis=1)
        tokens = self.encode(tokens)
        if c.angle_mode == "concat":
            tokens = ad.take(tokens, 1, 0, t)
        tokens = ad.layer_norm(tokens, self.params["lnf.g"], self.params["lnf.b"])
        y = _linear(tokens, self.params["head.w"], self.params["head.b"])
        y = ad.reshape(y, (b, h // c.patch, w // c.patch, c.patch, c.patch))
        return ad.reshape(ad.transpose(y, (0, 1, 3, 2, 4)), (b, h, w))

    def predict(self, refl: np.ndarray, geoms, batch_size: int = 64) -> np.ndarray:
        outs = []
        for s in range(0, len(refl), batch_size):
            y = self.forward_log(refl[s:s + batch_size], geoms[s:s + batch_size]).data
            outs.append(decode_tau(y, self.config.tau_max, self.config.predict_log))
        return np.concatenate(outs)

    __call__ = predict

    def forward(self, r, geom=None):
        """Single-field convenience wrapper: RadianceField -> decoded tau [H, W]."""
        geom = geom or r.geometry
        return self.predict(r.reflectance[None], [geom])[0]


def parameter_count(model) -> int:
    return int(sum(p.size for p in model.params.values()))


# -- checkpoints -----------------------------------------------------------


def _config_from(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ModelConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def build_model(kind: str, config: dict, seed: int = 0):
    if kind == "caac":
        return CaacModel(_config_from(CaacConfig, config), seed)
    if kind == "mlp":
        return PixelMlp(_config_from(MlpConfig, config), seed)
    raise ModelConfigError(f"unknown model kind {kind!r}")


def write_checkpoint(path, model, provenance: dict | None = None) -> None:
    """CAACCKPT1: magic line, JSON line, float32 little-endian parameters in order."""
    header = {
        "kind": model.kind,
        "config": model.config.to_dict(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
        "provenance": provenance or {},
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for v in model.params.values():
            fh.write(v.data.astype("<f4").tobytes())


def read_checkpoint(path):
    """Return (model, provenance). Parameters come back rounded to float32."""
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ModelConfigError(f"{path}: not a CAACCKPT1 file")
        header = json.loads(fh.readline().decode())
        payload = np.frombuffer(fh.read(), dtype="<f4")
    model = build_model(header["kind"], header["config"])
    pos = 0
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in model.params or model.params[name].shape != shape:
            raise ModelConfigError(f"{path}: parameter {name}{shape} does not fit the config")
        n = int(np.prod(shape))
        model.params[name].data = payload[pos:pos + n].astype(np.float64).reshape(shape)
        pos += n
    if pos != payload.size:
        raise ModelConfigError(f"{path}: {payload.size - pos} trailing values")
    return model, header["provenance"]
