"""Joint optimisation of the PE, DE and LP networks plus checkpoint I/O."""
from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from pedenet.checkpoint import read_container, write_container
from pedenet.dataset import ClassDataset, sample_pair_batch, sample_patch_batch
from pedenet.density import NORMALIZERS, OBJECTIVES, GmmParams, den_loss, reg_loss
from pedenet.errors import IncompatibleCheckpointError, InvalidArgumentError, SingularMatrixError
from pedenet.location import lp_loss, predict_location
from pedenet.model import PedeNet
from pedenet.numerics import AdamState, Tensor, adam_step, cast, concatenate, no_grad

log = logging.getLogger(__name__)

MAX_SINGULAR_RETRIES = 3


# L_DEN sums over the Z = 64 embedding dimensions and L_reg over the K * Z = 320
# covariance diagonals, so their weights are scaled per dimension (1/64 and
# 0.005/320) to keep the location term from being drowned out under Adam
DEFAULT_LAMBDA1 = 1.0 / 64
DEFAULT_LAMBDA3 = 0.005 / 320


@dataclass
class TrainConfig:
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = 1.0
    lambda3: float = DEFAULT_LAMBDA3
    K: int = 5
    batch_den: int = 128
    batch_lp_pairs: int = 36
    learning_rate: float = 1e-4
    steps: int = 5000
    seed: int = 0
    jitter: int = 8
    dtype: int = 32
    den_objective: str = "mean_nll"
    normalizer: str = "standard"
    cov_eps: float = 1e-6
    ema_decay: float = 0.99

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.batch_den < 2 or self.batch_lp_pairs < 2:
            raise InvalidArgumentError("batch sizes must be >= 2")
        if self.steps < 1:
            raise InvalidArgumentError("steps must be >= 1")
        if self.K < 1:
            raise InvalidArgumentError("K must be >= 1")
        if self.dtype not in (32, 64):
            raise InvalidArgumentError("dtype must be 32 or 64")
        if self.den_objective not in OBJECTIVES:
            raise InvalidArgumentError(f"den_objective must be one of {OBJECTIVES}")
        if self.normalizer not in NORMALIZERS:
            raise InvalidArgumentError(f"normalizer must be one of {NORMALIZERS}")
        if self.jitter < 0:
            raise InvalidArgumentError("jitter must be >= 0")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == 32 else np.float64

    def to_meta(self) -> dict[str, str]:
        return {f"config.{f.name}": repr(getattr(self, f.name)) if f.type == "float" else str(getattr(self, f.name))
                for f in dataclasses.fields(self)}

    @classmethod
    def from_mapping(cls, values: dict[str, object]) -> "TrainConfig":
        """Build from string or typed values, ignoring unknown keys."""
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in values and values[f.name] is not None:
                kwargs[f.name] = _coerce(f.type, values[f.name])
        return cls(**kwargs)

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "TrainConfig":
        return cls.from_mapping({k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")})


def _coerce(type_name, value):
    if type_name in ("float", float):
        return float(value)
    if type_name in ("int", int):
        return int(value)
    return str(value)


@dataclass
class TrainBatch:
    den_patches: np.ndarray
    pair_a: np.ndarray
    pair_b: np.ndarray
    pair_labels: np.ndarray


@dataclass
class LossBreakdown:
    total: Tensor
    l_den: Tensor
    l_lpn: Tensor
    l_reg: Tensor
    gmm: GmmParams


@dataclass
class LossRecord:
    step: int
    total: float
    l_den: float
    l_lpn: float
    l_reg: float

    HEADER = "# step, L, L_DEN, L_LPN, L_reg"

    def line(self) -> str:
        return f"{self.step}, {self.total:.10g}, {self.l_den:.10g}, {self.l_lpn:.10g}, {self.l_reg:.10g}"

    @classmethod
    def parse(cls, line: str) -> "LossRecord":
        parts = [p.strip() for p in line.split(",")]
        return cls(int(parts[0]), *(float(p) for p in parts[1:5]))


@dataclass
class ModelState:
    model: PedeNet
    adam: AdamState
    config: TrainConfig
    rng: np.random.Generator
    step: int = 0
    ema_gmm: dict[str, np.ndarray] | None = None
    history: list[LossRecord] = field(default_factory=list)


def sample_batch(images: list[np.ndarray], config: TrainConfig, rng: np.random.Generator) -> TrainBatch:
    dt = config.np_dtype
    den = sample_patch_batch(images, config.batch_den, rng).astype(dt, copy=False)
    a, b, labels = sample_pair_batch(images, config.batch_lp_pairs, rng, jitter=config.jitter)
    return TrainBatch(den, a.astype(dt, copy=False), b.astype(dt, copy=False), labels)


def _grad_scope(enabled: bool):
    return contextlib.nullcontext() if enabled else no_grad()


def total_loss(model: PedeNet, batch: TrainBatch, config: TrainConfig) -> LossBreakdown:
    """L = lambda1 * L_DEN + lambda2 * L_LPN + lambda3 * L_reg, plus the raw terms.

    Branches whose weights are all zero are evaluated without recording a
    graph; their terms are still reported.
    """
    use_den = config.lambda1 != 0 or config.lambda3 != 0
    use_lp = config.lambda2 != 0
    n_den, n_pair = len(batch.den_patches), len(batch.pair_a)
    if use_den and use_lp:
        z = model.embed(np.concatenate([batch.den_patches, batch.pair_a, batch.pair_b]))
        z_den, z_a, z_b = z[:n_den], z[n_den : n_den + n_pair], z[n_den + n_pair :]
    else:
        with _grad_scope(use_den):
            z_den = model.embed(batch.den_patches)
        with _grad_scope(use_lp):
            z_pairs = model.embed(np.concatenate([batch.pair_a, batch.pair_b]))
            z_a, z_b = z_pairs[:n_pair], z_pairs[n_pair:]

    with _grad_scope(use_den):
        l_den, gmm = den_loss(model.de, model.params, z_den, config.den_objective, config.normalizer, config.cov_eps)
        l_reg = reg_loss(gmm)
    with _grad_scope(use_lp):
        l_hat = predict_location(model.lp, model.params, z_a, z_b)
        l_lpn = cast(lp_loss(l_hat, batch.pair_labels), np.float64)

    total = l_den * config.lambda1 + l_lpn * config.lambda2 + l_reg * config.lambda3
    return LossBreakdown(total, l_den, l_lpn, l_reg, gmm)


def init_state(config: TrainConfig) -> ModelState:
    init_seq, sample_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = PedeNet.initialize(init_seq, config.K, config.np_dtype)
    adam = AdamState(learning_rate=config.learning_rate)
    return ModelState(model, adam, config, np.random.default_rng(sample_seq))


def _update_ema(state: ModelState, gmm: GmmParams) -> None:
    batch = gmm.arrays()
    if state.ema_gmm is None:
        state.ema_gmm = batch
        return
    d = state.config.ema_decay
    for key, value in batch.items():
        state.ema_gmm[key] = d * state.ema_gmm[key] + (1.0 - d) * value


def train_step(state: ModelState, images: list[np.ndarray]) -> LossRecord:
    """Sample one DE batch and one LP batch, backpropagate once, take one joint Adam step."""
    cfg = state.config
    for attempt in range(MAX_SINGULAR_RETRIES + 1):
        batch = sample_batch(images, cfg, state.rng)
        try:
            parts = total_loss(state.model, batch, cfg)
            break
        except SingularMatrixError as exc:
            log.warning("step %d: %s; resampling (attempt %d)", state.step + 1, exc, attempt + 1)
            if attempt == MAX_SINGULAR_RETRIES:
                raise

    params = state.model.params
    for p in params.values():
        p.grad = None
    if parts.total.requires_grad:
        parts.total.backward()
    # parameters not reached by the loss (zero-weighted branches) get zero gradient
    grads = {n: p.grad if p.grad is not None else np.zeros_like(p.data) for n, p in params.items()}
    adam_step(params, state.adam, grads)
    _update_ema(state, parts.gmm)
    state.step += 1
    record = LossRecord(state.step, float(parts.total.data), float(parts.l_den.data),
                        float(parts.l_lpn.data), float(parts.l_reg.data))
    state.history.append(record)
    return record


def train(
    dataset: ClassDataset | list[np.ndarray],
    config: TrainConfig,
    log_path=None,
    callback: Callable[[ModelState, LossRecord], None] | None = None,
    state: ModelState | None = None,
) -> ModelState:
    """Run until ``config.steps`` steps have been taken (resuming ``state`` if given)."""
    images = dataset.train_images if isinstance(dataset, ClassDataset) else list(dataset)
    state = state or init_state(config)
    state.config = config
    # line-buffered so an interrupted run keeps every completed step
    log_file = open(log_path, "a" if state.step else "w", buffering=1) if log_path else None
    try:
        if log_file and not state.step:
            log_file.write(LossRecord.HEADER + "\n")
        while state.step < config.steps:
            record = train_step(state, images)
            if log_file:
                log_file.write(record.line() + "\n")
            if record.step % 100 == 0 or record.step == config.steps:
                log.info("step %d  L=%.4f  L_DEN=%.4f  L_LPN=%.4f  L_reg=%.4f",
                         record.step, record.total, record.l_den, record.l_lpn, record.l_reg)
            if callback:
                callback(state, record)
    finally:
        if log_file:
            log_file.close()
    return state


def lp_accuracy(model: PedeNet, images: list[np.ndarray], n_pairs: int = 1000, seed: int = 0,
                jitter: int = 8, batch_size: int = 200) -> float:
    """Fraction of freshly sampled neighbour pairs whose relative position the LP head gets right."""
    rng = np.random.default_rng(seed)
    correct = 0
    with no_grad():
        for start in range(0, n_pairs, batch_size):
            n = min(batch_size, n_pairs - start)
            a, b, labels = sample_pair_batch(images, n, rng, jitter=jitter)
            za = model.embed(a.astype(model.dtype, copy=False))
            zb = model.embed(b.astype(model.dtype, copy=False))
            pred = predict_location(model.lp, model.params, za, zb).data.argmax(axis=1)
            correct += int((pred == labels).sum())
    return correct / n_pairs


def read_loss_log(path) -> list[LossRecord]:
    lines = Path(path).read_text().splitlines()
    return [LossRecord.parse(line) for line in lines if line.strip() and not line.startswith("#")]


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(state: ModelState, path) -> None:
    meta: dict[str, object] = {"kind": "model", "step": state.step}
    meta.update(state.config.to_meta())
    meta.update({
        "adam.step_count": state.adam.step_count,
        "adam.learning_rate": repr(state.adam.learning_rate),
        "adam.beta1": repr(state.adam.beta1),
        "adam.beta2": repr(state.adam.beta2),
        "adam.epsilon": repr(state.adam.epsilon),
        "rng_state": json.dumps(state.rng.bit_generator.state, sort_keys=True),
    })
    tensors: dict[str, np.ndarray] = {name: p.data for name, p in state.model.params.items()}
    for name, m in state.adam.first_moment.items():
        tensors[f"adam.m.{name}"] = m
    for name, v in state.adam.second_moment.items():
        tensors[f"adam.v.{name}"] = v
    if state.ema_gmm is not None:
        for key, value in state.ema_gmm.items():
            tensors[f"gmm.{key}"] = value
    write_container(path, meta, tensors)


def load_checkpoint(path) -> ModelState:
    meta, tensors = read_container(path)
    if meta.get("kind") != "model":
        raise IncompatibleCheckpointError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    try:
        config = TrainConfig.from_meta(meta)
        model = PedeNet(config.K, dtype=config.np_dtype)
        model.load_arrays(tensors)
        adam = AdamState(
            learning_rate=float(meta["adam.learning_rate"]),
            beta1=float(meta["adam.beta1"]),
            beta2=float(meta["adam.beta2"]),
            epsilon=float(meta["adam.epsilon"]),
            step_count=int(meta["adam.step_count"]),
        )
        for key, value in tensors.items():
            if key.startswith("adam.m."):
                adam.first_moment[key[len("adam.m."):]] = value
            elif key.startswith("adam.v."):
                adam.second_moment[key[len("adam.v."):]] = value
        ema = {k[len("gmm."):]: v for k, v in tensors.items() if k.startswith("gmm.")} or None
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(meta["rng_state"])
        step = int(meta["step"])
    except (KeyError, ValueError, InvalidArgumentError) as exc:
        raise IncompatibleCheckpointError(f"{path}: {exc}") from exc
    return ModelState(model, adam, config, rng, step, ema)
