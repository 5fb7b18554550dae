"""Residual MLP option pricer in plain numpy (float64), with exact gradients.

Architecture (features are standardized with training-split statistics)::

    x -> FC(5,h) -> BN -> LReLU                      = a1   (block 1)
    a1 -> FC(h,h) -> BN -> LReLU                     = a2   (block 2)
    r = a2 + a1                                             (skip)
    r -> Dropout -> FC(h,h) -> BN -> LReLU -> Dropout = d3  (block 3)
    y = d3 @ W_head + b_head
    price = target_mean + target_scale * y

Weights are stored as (fan_in, fan_out) so a layer is ``x @ W + b``.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

INPUT_DIM = 5
LAYERS = ("fc1", "fc2", "fc3")
PARAM_NAMES = (
    "fc1.weight", "fc1.bias", "bn1.gamma", "bn1.beta",
    "fc2.weight", "fc2.bias", "bn2.gamma", "bn2.beta",
    "fc3.weight", "fc3.bias", "bn3.gamma", "bn3.beta",
    "head.weight", "head.bias",
)  # fmt: skip
BUFFER_NAMES = (
    "bn1.running_mean", "bn1.running_var",
    "bn2.running_mean", "bn2.running_var",
    "bn3.running_mean", "bn3.running_var",
)  # fmt: skip
MARKET_THRESHOLD = 0.1


@dataclass(frozen=True)
class NetConfig:
    hidden_size: int = 256
    dropout_p: float = 0.2414
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    input_dim: int = INPUT_DIM

    def __post_init__(self):
        if self.input_dim != INPUT_DIM:
            raise ValueError(f"input_dim must be {INPUT_DIM}")
        if int(self.hidden_size) != self.hidden_size or self.hidden_size <= 0:
            raise ValueError("hidden_size must be a positive integer")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if not 0 < self.bn_momentum < 1:
            raise ValueError("bn_momentum must be in (0, 1)")
        if self.bn_epsilon <= 0:
            raise ValueError("bn_epsilon must be positive")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h = self.hidden_size
        out = {"feature.mean": (INPUT_DIM,), "feature.std": (INPUT_DIM,)}
        for i, fan_in in zip((1, 2, 3), (INPUT_DIM, h, h)):
            out[f"fc{i}.weight"] = (fan_in, h)
            out[f"fc{i}.bias"] = (h,)
            for name in ("gamma", "beta", "running_mean", "running_var"):
                out[f"bn{i}.{name}"] = (h,)
        out["head.weight"] = (h, 1)
        out["head.bias"] = (1,)
        return out


@dataclass
class ModelArtifact:
    config: NetConfig
    feature_mean: np.ndarray
    feature_std: np.ndarray
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    target_mean: float = 0.0
    target_scale: float = 1.0
    step_count: int = 0

    def copy(self) -> "ModelArtifact":
        return ModelArtifact(
            self.config,
            self.feature_mean.copy(),
            self.feature_std.copy(),
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.target_mean,
            self.target_scale,
            self.step_count,
        )


def feature_stats(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and std; constant columns get std 1."""
    X = np.asarray(X, dtype=np.float64)
    std = X.std(axis=0)
    return X.mean(axis=0), np.where(std > 0, std, 1.0)


def init_model(
    config: NetConfig,
    seed: int,
    stats: Optional[tuple[np.ndarray, np.ndarray]] = None,
    target_stats: tuple[float, float] = (0.0, 1.0),
) -> ModelArtifact:
    """Kaiming-uniform weights (LeakyReLU gain), PyTorch-style bias bounds."""
    if stats is None:
        stats = (np.zeros(INPUT_DIM), np.ones(INPUT_DIM))
    mean, std = (np.asarray(s, dtype=np.float64).copy() for s in stats)
    if mean.shape != (INPUT_DIM,) or std.shape != (INPUT_DIM,) or np.any(~(std > 0)):
        raise ValueError("feature stats must be 5 means and 5 positive stds")
    if not target_stats[1] > 0:
        raise ValueError("target scale must be positive")

    rng = np.random.default_rng(seed)
    gain = math.sqrt(2.0 / (1.0 + config.leaky_slope**2))
    h = config.hidden_size
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for i, fan_in in zip((1, 2, 3), (INPUT_DIM, h, h)):
        bound = gain * math.sqrt(3.0 / fan_in)
        params[f"fc{i}.weight"] = rng.uniform(-bound, bound, size=(fan_in, h))
        params[f"fc{i}.bias"] = rng.uniform(-1 / math.sqrt(fan_in), 1 / math.sqrt(fan_in), size=h)
        params[f"bn{i}.gamma"] = np.ones(h)
        params[f"bn{i}.beta"] = np.zeros(h)
        buffers[f"bn{i}.running_mean"] = np.zeros(h)
        buffers[f"bn{i}.running_var"] = np.ones(h)
    bound = 1 / math.sqrt(h)
    params["head.weight"] = rng.uniform(-bound, bound, size=(h, 1))
    params["head.bias"] = rng.uniform(-bound, bound, size=1)
    params = {k: params[k] for k in PARAM_NAMES}
    return ModelArtifact(config, mean, std, params, buffers, float(target_stats[0]), float(target_stats[1]))


# ------------------------------------------------------------------- forward


def _lrelu(x, slope):
    return np.where(x > 0, x, slope * x)


def _bn_forward(model: ModelArtifact, i: int, z: np.ndarray, train: bool, update_stats: bool):
    cfg = model.config
    gamma, beta = model.params[f"bn{i}.gamma"], model.params[f"bn{i}.beta"]
    rm, rv = model.buffers[f"bn{i}.running_mean"], model.buffers[f"bn{i}.running_var"]
    if train:
        n = z.shape[0]
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        if update_stats:
            mom = cfg.bn_momentum
            rm *= 1 - mom
            rm += mom * mu
            rv *= 1 - mom
            rv += mom * var * (n / (n - 1))
    else:
        mu, var = rm, rv
    inv = 1.0 / np.sqrt(var + cfg.bn_epsilon)
    xhat = (z - mu) * inv
    return gamma * xhat + beta, (xhat, inv)


def draw_masks(config: NetConfig, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two inverted-dropout masks, already scaled by 1/(1-p)."""
    p = config.dropout_p
    h = config.hidden_size
    if p == 0:
        return np.ones((n, h)), np.ones((n, h))
    scale = 1.0 / (1.0 - p)
    return ((rng.random((n, h)) >= p) * scale, (rng.random((n, h)) >= p) * scale)


def forward(
    model: ModelArtifact,
    features: np.ndarray,
    mode: str = "eval",
    dropout_seed=None,
    masks: Optional[tuple[np.ndarray, np.ndarray]] = None,
    update_stats: bool = True,
    return_cache: bool = False,
):
    """Predict call prices for a (n, 5) batch of raw features.

    ``mode="train"`` uses batch statistics (updating running stats unless
    ``update_stats=False``) and inverted dropout; masks are drawn from
    ``dropout_seed`` (an int or a ``numpy.random.Generator``) unless given
    explicitly. ``mode="eval"`` is deterministic.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != INPUT_DIM:
        raise ValueError(f"features must have shape (n, {INPUT_DIM}), got {X.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    train = mode == "train"
    n = X.shape[0]
    if train and n < 2:
        raise ValueError("train mode needs a batch of at least 2 samples")
    cfg, P = model.config, model.params
    slope = cfg.leaky_slope

    x = (X - model.feature_mean) / model.feature_std
    z1 = x @ P["fc1.weight"] + P["fc1.bias"]
    n1, bn1 = _bn_forward(model, 1, z1, train, update_stats)
    a1 = _lrelu(n1, slope)
    z2 = a1 @ P["fc2.weight"] + P["fc2.bias"]
    n2, bn2 = _bn_forward(model, 2, z2, train, update_stats)
    a2 = _lrelu(n2, slope)
    res = a2 + a1
    if train and cfg.dropout_p > 0:
        if masks is None:
            rng = dropout_seed if isinstance(dropout_seed, np.random.Generator) else np.random.default_rng(dropout_seed)
            masks = draw_masks(cfg, n, rng)
        m1, m2 = masks
        d1 = res * m1
    else:
        m1 = m2 = None
        d1 = res
    z3 = d1 @ P["fc3.weight"] + P["fc3.bias"]
    n3, bn3 = _bn_forward(model, 3, z3, train, update_stats)
    a3 = _lrelu(n3, slope)
    d3 = a3 * m2 if m2 is not None else a3
    y = (d3 @ P["head.weight"] + P["head.bias"])[:, 0]
    pred = model.target_mean + model.target_scale * y
    if not return_cache:
        return pred
    cache = dict(
        train=train, x=x, a1=a1, n1=n1, bn1=bn1, a2=a2, n2=n2, bn2=bn2,
        res=res, d1=d1, n3=n3, bn3=bn3, d3=d3, m1=m1, m2=m2,
    )  # fmt: skip
    return pred, cache


def predict(model: ModelArtifact, features: np.ndarray, batch_size: int = 8192) -> np.ndarray:
    """Eval-mode predictions, computed in chunks."""
    X = np.asarray(features, dtype=np.float64)
    if len(X) == 0:
        return np.empty(0)
    return np.concatenate([forward(model, X[i : i + batch_size]) for i in range(0, len(X), batch_size)])


# ---------------------------------------------------------------------- loss


@dataclass
class HybridLossBreakdown:
    total: float
    market_term_count: int
    bs_term_count: int
    per_sample: Optional[np.ndarray] = None


def _loss_targets(pred, market, bs):
    pred, market, bs = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (pred, market, bs))
    if not (len(pred) == len(market) == len(bs)):
        raise ValueError("pred, market and bs must have equal length")
    if len(pred) == 0:
        raise ValueError("empty batch")
    gamma = market > MARKET_THRESHOLD
    return pred, np.where(gamma, market, bs), gamma


def hybrid_loss(pred, market, bs, keep_per_sample: bool = True) -> HybridLossBreakdown:
    """Squared error against the market premium where it exceeds 0.1, else
    against the Black-Scholes price; averaged over the batch."""
    pred, target, gamma = _loss_targets(pred, market, bs)
    per_sample = (pred - target) ** 2
    n_market = int(gamma.sum())
    return HybridLossBreakdown(
        float(per_sample.mean()), n_market, len(pred) - n_market, per_sample if keep_per_sample else None
    )


def hybrid_loss_grad(pred, market, bs) -> np.ndarray:
    """d(mean hybrid loss)/d(pred)."""
    pred, target, _ = _loss_targets(pred, market, bs)
    return 2.0 * (pred - target) / len(pred)


# ------------------------------------------------------------------ backward


def _bn_backward(model, i, dout, bn_cache, train):
    xhat, inv = bn_cache
    gamma = model.params[f"bn{i}.gamma"]
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if train:
        n = dout.shape[0]
        dz = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dz = dxhat * inv
    return dz, dgamma, dbeta


def backward(model: ModelArtifact, cache: dict, dpred: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dloss/dpred."""
    if cache is None or "d3" not in cache:
        raise ValueError("backward needs the cache from forward(..., return_cache=True)")
    P, slope, train = model.params, model.config.leaky_slope, cache["train"]
    g: dict[str, np.ndarray] = {}

    dy = (np.asarray(dpred, dtype=np.float64) * model.target_scale)[:, None]
    g["head.weight"] = cache["d3"].T @ dy
    g["head.bias"] = dy.sum(axis=0)
    da3 = dy @ P["head.weight"].T
    if cache["m2"] is not None:
        da3 = da3 * cache["m2"]

    dn3 = da3 * np.where(cache["n3"] > 0, 1.0, slope)
    dz3, g["bn3.gamma"], g["bn3.beta"] = _bn_backward(model, 3, dn3, cache["bn3"], train)
    g["fc3.weight"] = cache["d1"].T @ dz3
    g["fc3.bias"] = dz3.sum(axis=0)
    dres = dz3 @ P["fc3.weight"].T
    if cache["m1"] is not None:
        dres = dres * cache["m1"]

    dn2 = dres * np.where(cache["n2"] > 0, 1.0, slope)
    dz2, g["bn2.gamma"], g["bn2.beta"] = _bn_backward(model, 2, dn2, cache["bn2"], train)
    g["fc2.weight"] = cache["a1"].T @ dz2
    g["fc2.bias"] = dz2.sum(axis=0)
    da1 = dres + dz2 @ P["fc2.weight"].T

    dn1 = da1 * np.where(cache["n1"] > 0, 1.0, slope)
    dz1, g["bn1.gamma"], g["bn1.beta"] = _bn_backward(model, 1, dn1, cache["bn1"], train)
    g["fc1.weight"] = cache["x"].T @ dz1
    g["fc1.bias"] = dz1.sum(axis=0)
    return {k: g[k] for k in PARAM_NAMES}


def loss_and_grads(model, features, market, bs, mode="train", dropout_seed=None, masks=None, update_stats=True):
    """One forward/backward pass under the hybrid loss."""
    pred, cache = forward(model, features, mode, dropout_seed, masks, update_stats, return_cache=True)
    loss = hybrid_loss(pred, market, bs, keep_per_sample=False)
    grads = backward(model, cache, hybrid_loss_grad(pred, market, bs))
    return loss, grads


# ---------------------------------------------------------------------- adam


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    """Adam with bias correction, L2 weight decay folded into the gradient.

    Updates ``params`` in place and returns ``state`` (also updated in place).
    """
    if state.step < 0:
        raise ValueError("negative step counter")
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if weight_decay:
            g = g + weight_decay * p
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ----------------------------------------------------------------- artifacts

MAGIC = b"B3RESNET"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sII")  # magic, version, header length


class ArtifactError(Exception):
    pass


class ArtifactVersionError(ArtifactError):
    pass


class ArtifactCorruptError(ArtifactError):
    pass


class ArtifactShapeError(ArtifactError):
    pass


def _blocks(model: ModelArtifact) -> dict[str, np.ndarray]:
    out = {"feature.mean": model.feature_mean, "feature.std": model.feature_std}
    out.update(model.params)
    out.update(model.buffers)
    return out


def dump_artifact(model: ModelArtifact) -> bytes:
    """Serialize to the versioned container described in docs/artifact_format.md."""
    blocks, table, offset = [], [], 0
    for name, arr in _blocks(model).items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blocks.append(raw)
        offset += len(raw)
    payload = b"".join(blocks)
    header = {
        "config": asdict(model.config),
        "target_mean": model.target_mean,
        "target_scale": model.target_scale,
        "step_count": model.step_count,
        "dtype": "<f8",
        "blocks": table,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(hdr)) + hdr + payload


def save_artifact(model: ModelArtifact, path) -> None:
    Path(path).write_bytes(dump_artifact(model))


def parse_artifact(data: bytes) -> ModelArtifact:
    if len(data) < _PREAMBLE.size:
        raise ArtifactCorruptError("file too short")
    magic, version, hlen = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise ArtifactCorruptError("not a model artifact (bad magic)")
    if version != FORMAT_VERSION:
        raise ArtifactVersionError(f"unsupported artifact version {version}")
    start = _PREAMBLE.size + hlen
    if len(data) < start:
        raise ArtifactCorruptError("truncated header")
    try:
        header = json.loads(data[_PREAMBLE.size : start].decode("utf-8"))
        config = NetConfig(**header["config"])
        table = header["blocks"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ArtifactCorruptError(f"unreadable header: {exc}") from exc
    payload = data[start:]
    if len(payload) != header.get("payload_bytes"):
        raise ArtifactCorruptError(f"payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise ArtifactCorruptError("payload checksum mismatch")

    expected = config.shapes()
    arrays: dict[str, np.ndarray] = {}
    for entry in table:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise ArtifactShapeError(f"unexpected block {name!r}")
        if shape != expected[name]:
            raise ArtifactShapeError(f"block {name!r} has shape {shape}, config implies {expected[name]}")
        nbytes = 8 * math.prod(shape)
        if entry["nbytes"] != nbytes or entry["offset"] + nbytes > len(payload):
            raise ArtifactShapeError(f"block {name!r} size disagrees with its shape")
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=math.prod(shape), offset=entry["offset"]).reshape(shape).astype(np.float64)
    missing = set(expected) - set(arrays)
    if missing:
        raise ArtifactShapeError(f"missing blocks: {sorted(missing)}")
    return ModelArtifact(
        config=config,
        feature_mean=arrays["feature.mean"],
        feature_std=arrays["feature.std"],
        params={k: arrays[k] for k in PARAM_NAMES},
        buffers={k: arrays[k] for k in BUFFER_NAMES},
        target_mean=float(header["target_mean"]),
        target_scale=float(header["target_scale"]),
        step_count=int(header["step_count"]),
    )


def load_artifact(path) -> ModelArtifact:
    return parse_artifact(Path(path).read_bytes())
