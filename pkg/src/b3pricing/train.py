"""Minibatch training with early stopping, and seeded random hyperparameter search."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import net
from .dataset import DatasetRow, feature_matrix, targets
from .net import MARKET_THRESHOLD, AdamState, ModelArtifact, NetConfig

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/inf loss."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5.74e-5
    weight_decay: float = 1.93e-4
    batch_size: int = 1024
    max_epochs: int = 25
    early_stop_patience: int = 5
    shuffle_seed: int = 0
    scale_target: bool = True
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if self.max_epochs < 1 or self.early_stop_patience < 1 or self.batch_size < 2:
            raise ValueError("need max_epochs >= 1, early_stop_patience >= 1, batch_size >= 2")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.update(d.pop("net"))
        return d


_NET_KEYS = {f.name for f in dataclasses.fields(NetConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"net"}
_ALIASES = {"patience": "early_stop_patience", "learning_rate": "lr", "hidden": "hidden_size", "dropout": "dropout_p"}


def _coerce(value: str):
    low = value.strip().lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    raise ValueError(f"not a number or boolean: {value!r}")


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in _NET_KEYS | _TRAIN_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value)
    return out


def make_config(overrides: Optional[dict] = None, base: TrainConfig = TrainConfig()) -> TrainConfig:
    overrides = {_ALIASES.get(k, k): v for k, v in (overrides or {}).items()}
    net_kw = {k: v for k, v in overrides.items() if k in _NET_KEYS}
    train_kw = {k: v for k, v in overrides.items() if k in _TRAIN_KEYS}
    unknown = set(overrides) - _NET_KEYS - _TRAIN_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "hidden_size" in net_kw:
        net_kw["hidden_size"] = int(net_kw["hidden_size"])
    for k in ("batch_size", "max_epochs", "early_stop_patience", "shuffle_seed"):
        if k in train_kw:
            train_kw[k] = int(train_kw[k])
    return dataclasses.replace(base, net=dataclasses.replace(base.net, **net_kw), **train_kw)


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------- train


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    wall_seconds: float = 0.0
    artifact_path: Optional[str] = None

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1] if self.best_epoch else math.inf

    def records(self) -> list[dict]:
        """One record per epoch plus a summary (no wall-clock, so reruns compare equal)."""
        out = [
            {"kind": "epoch", "epoch": i + 1, "train_loss": t, "val_loss": v}
            for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss))
        ]
        out.append(
            {
                "kind": "summary",
                "best_epoch": self.best_epoch,
                "best_val_loss": self.best_val_loss,
                "epochs_run": len(self.val_loss),
                "stopped_early": self.stopped_early,
            }
        )
        return out


def hybrid_targets(market: np.ndarray, bs: np.ndarray) -> np.ndarray:
    return np.where(market > MARKET_THRESHOLD, market, bs)


def evaluate_loss(model: ModelArtifact, X: np.ndarray, market: np.ndarray, bs: np.ndarray) -> float:
    """Hybrid loss in eval mode (running BN stats, no dropout)."""
    return net.hybrid_loss(net.predict(model, X), market, bs, keep_per_sample=False).total


def _arrays(rows: Sequence[DatasetRow], what: str):
    if not rows:
        raise ValueError(f"{what} split is empty")
    X = feature_matrix(rows)
    m, bs = targets(rows)
    if np.any(~np.isfinite(bs)):
        raise ValueError(f"{what} split has rows without bs_price")
    return X, m, bs


def train(
    train_rows: Sequence[DatasetRow],
    val_rows: Sequence[DatasetRow],
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
) -> tuple[ModelArtifact, TrainReport]:
    """Fit a fresh network; return the best-validation snapshot and the loss curves.

    Raises:
        ValueError: if either split is empty or lacks Black-Scholes prices.
        NonFiniteLossError: if a minibatch loss becomes NaN or infinite.
    """
    t0 = time.perf_counter()
    X, m, bs = _arrays(train_rows, "train")
    Xv, mv, bsv = _arrays(val_rows, "validation")

    target_stats = (0.0, 1.0)
    if config.scale_target:
        y = hybrid_targets(m, bs)
        target_stats = (float(y.mean()), float(y.std()) if y.std() > 0 else 1.0)
    model = net.init_model(config.net, seed, net.feature_stats(X), target_stats)
    state = AdamState()
    shuffle_rng = np.random.default_rng(config.shuffle_seed)
    dropout_rng = np.random.default_rng([seed, 1])

    report = TrainReport()
    best: Optional[ModelArtifact] = None
    best_loss = math.inf
    since_best = 0
    n = len(X)
    for epoch in range(1, config.max_epochs + 1):
        perm = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two samples
            loss, grads = net.loss_and_grads(model, X[idx], m[idx], bs[idx], "train", dropout_rng)
            if not math.isfinite(loss.total):
                raise NonFiniteLossError(f"non-finite training loss at epoch {epoch}, step {state.step + 1}")
            net.adam_step(model.params, grads, state, config.lr, weight_decay=config.weight_decay)
            total += loss.total * len(idx)
            seen += len(idx)
        model.step_count = state.step
        val = evaluate_loss(model, Xv, mv, bsv)
        if not math.isfinite(val):
            raise NonFiniteLossError(f"non-finite validation loss at epoch {epoch}")
        report.train_loss.append(total / max(seen, 1))
        report.val_loss.append(val)
        logger.info("epoch %d train %.6g val %.6g", epoch, report.train_loss[-1], val)
        if val < best_loss:
            best_loss, best, since_best = val, model.copy(), 0
            report.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                report.stopped_early = epoch < config.max_epochs
                break
    report.wall_seconds = time.perf_counter() - t0
    return best, report


# -------------------------------------------------------------------- search


@dataclass(frozen=True)
class SearchSpace:
    lr: tuple[float, float] = (1e-5, 1e-3)
    hidden_size: tuple[int, ...] = (64, 128, 256, 512)
    dropout_p: tuple[float, float] = (0.1, 0.5)
    weight_decay: tuple[float, float] = (1e-6, 1e-3)
    trials: int = 20
    epochs_per_trial: int = 10

    def sample(self, rng: np.random.Generator) -> dict:
        return {
            "lr": float(math.exp(rng.uniform(math.log(self.lr[0]), math.log(self.lr[1])))),
            "hidden_size": int(rng.choice(self.hidden_size)),
            "dropout_p": float(rng.uniform(*self.dropout_p)),
            "weight_decay": float(math.exp(rng.uniform(math.log(self.weight_decay[0]), math.log(self.weight_decay[1])))),
        }


@dataclass
class TrialRecord:
    trial: int
    params: dict
    status: str = "ok"
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_val_loss: float = math.inf
    error: Optional[str] = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if not math.isfinite(d["best_val_loss"]):
            d["best_val_loss"] = None
        return d


def hyperparameter_search(
    space: SearchSpace,
    train_rows: Sequence[DatasetRow],
    val_rows: Sequence[DatasetRow],
    seed: int = 0,
    base: TrainConfig = TrainConfig(),
    workers: int = 1,
) -> tuple[TrainConfig, list[TrialRecord]]:
    """Random search; each trial trains ``epochs_per_trial`` epochs without early stopping.

    Diverging trials are recorded as failed. The winner has the lowest
    validation loss among successful trials.
    """
    if space.trials < 1:
        raise ValueError("need at least one trial")
    if not train_rows or not val_rows:
        raise ValueError("train and validation splits must be non-empty")
    rng = np.random.default_rng(seed)
    sampled = [space.sample(rng) for _ in range(space.trials)]

    def run(i: int) -> tuple[TrialRecord, TrainConfig]:
        cfg = make_config(
            dict(sampled[i], max_epochs=space.epochs_per_trial, early_stop_patience=space.epochs_per_trial),
            base,
        )
        rec = TrialRecord(i, sampled[i])
        try:
            _, rep = train(train_rows, val_rows, cfg, seed=seed + i)
        except NonFiniteLossError as exc:
            rec.status, rec.error = "failed", str(exc)
            logger.warning("trial %d diverged: %s", i, exc)
        else:
            rec.train_loss, rec.val_loss, rec.best_val_loss = rep.train_loss, rep.val_loss, rep.best_val_loss
        return rec, cfg

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(space.trials)))
    else:
        results = [run(i) for i in range(space.trials)]

    ok = [(rec, cfg) for rec, cfg in results if rec.status == "ok"]
    if not ok:
        raise NonFiniteLossError("every trial diverged")
    _, best_cfg = min(ok, key=lambda rc: (rc[0].best_val_loss, rc[0].trial))
    # the winner is meant for a full-length run with the base schedule
    best_cfg = dataclasses.replace(best_cfg, max_epochs=base.max_epochs, early_stop_patience=base.early_stop_patience)
    return best_cfg, [rec for rec, _ in results]
