"""Training and evaluation: MSE loss, Adam, deterministic epoch loops,
five-metric reports, and a bit-exact binary checkpoint format.

Targets are z-scored against the training set by default (metrics and
predictions are always reported back in degrees Celsius). The loop is
bit-deterministic given (config, seed, dataset): shuffling and dropout
masks derive from the seed, epoch, and batch index alone.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .data import SpecklegramSample
from .errors import CheckpointError, ContractError, TrainingAbort
from .models import Model, ModelConfig
from .tensor import ParameterStore, Tensor, mean, record

CHECKPOINT_MAGIC = b"SPKF"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    target_standardization: bool = True
    shuffle_each_epoch: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class MetricsReport:
    """MSE, MAE, RMSE, maximum error (degC) and R^2 over one prediction
    set. ``r2`` is None when the targets are constant."""

    mse: float
    mae: float
    rmse: float
    max_error: float
    r2: float | None
    n: int

    @property
    def r2_defined(self) -> bool:
        return self.r2 is not None

    def to_dict(self) -> dict:
        return {"mse": self.mse, "mae": self.mae, "rmse": self.rmse,
                "max_error": self.max_error, "r2": self.r2, "n": self.n}


def metrics_from_predictions(predictions: np.ndarray,
                             targets: np.ndarray) -> MetricsReport:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.size == 0:
        raise ContractError(f"prediction/target shapes {predictions.shape} vs "
                            f"{targets.shape} (need equal, non-empty)")
    err = predictions - targets
    mse = float(np.mean(err ** 2))
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(mse))
    max_error = float(np.max(np.abs(err)))
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    r2 = None if ss_tot == 0.0 else 1.0 - float(np.sum(err ** 2)) / ss_tot
    return MetricsReport(mse=mse, mae=mae, rmse=rmse, max_error=max_error,
                         r2=r2, n=predictions.size)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared difference; differentiable in ``pred``."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if pred.shape != target.shape:
        raise ContractError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return mean(diff * diff)


def adam_step(store: ParameterStore, config: TrainConfig) -> None:
    """One bias-corrected Adam update over every parameter in the store."""
    store.step += 1
    t = store.step
    scale = config.learning_rate * np.sqrt(1.0 - config.beta2 ** t) / (1.0 - config.beta1 ** t)
    for name, param in store.items():
        if param.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        slot = store.slots.get(name)
        if slot is None:
            slot = {"m": np.zeros(param.shape), "v": np.zeros(param.shape)}
            store.slots[name] = slot
        g = param.grad
        slot["m"] = config.beta1 * slot["m"] + (1.0 - config.beta1) * g
        slot["v"] = config.beta2 * slot["v"] + (1.0 - config.beta2) * g * g
        param.data = param.data - scale * slot["m"] / (np.sqrt(slot["v"]) + config.eps)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    slots: dict[str, dict[str, np.ndarray]]
    adam_step: int
    epoch: int
    target_mean: float
    target_std: float
    version: int = CHECKPOINT_VERSION

    def apply_to(self, model: Model) -> None:
        if model.config != self.model_config:
            raise CheckpointError(
                f"checkpoint was trained as {self.model_config.variant!r} with "
                f"different settings; model is {model.config.variant!r}")
        model.params.load(self.params)
        model.params.load_slots(self.slots)
        model.params.step = self.adam_step
        model.target_mean = self.target_mean
        model.target_std = self.target_std

    def build_model(self) -> Model:
        model = Model(self.model_config)
        self.apply_to(model)
        return model


def _stack_images(samples: list[SpecklegramSample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _targets(samples: list[SpecklegramSample]) -> np.ndarray:
    return np.array([s.temperature for s in samples], dtype=np.float64)


def evaluate(model: Model, samples: list[SpecklegramSample],
             batch_size: int = 64) -> MetricsReport:
    """Eval-mode metrics in degrees Celsius."""
    if not samples:
        raise ContractError("evaluate needs a non-empty sample list")
    preds = np.concatenate([
        model.predict_batch(_stack_images(samples[i:i + batch_size]))
        for i in range(0, len(samples), batch_size)])
    return metrics_from_predictions(preds, _targets(samples))


def train(model: Model, train_set: list[SpecklegramSample],
          val_set: list[SpecklegramSample], config: TrainConfig,
          start_epoch: int = 0) -> tuple[Checkpoint, list[dict]]:
    """Minibatch Adam training with per-epoch validation.

    Returns the checkpoint with the lowest validation MSE (last epoch
    when the validation set is empty) plus a history row per epoch; the
    model is left holding the returned checkpoint's state. ``history``
    rows carry ``train_mse`` (dropout-active, degC^2) and ``val_mse``.
    """
    if not train_set:
        raise ContractError("training set is empty")
    if start_epoch >= config.epochs:
        raise ContractError(f"start epoch {start_epoch} is past the configured "
                            f"{config.epochs} epochs")
    targets = _targets(train_set)
    if config.target_standardization:
        std = float(targets.std())
        model.target_mean = float(targets.mean())
        model.target_std = std if std > 1e-12 else 1.0
    else:
        model.target_mean, model.target_std = 0.0, 1.0
    scaled_targets = (targets - model.target_mean) / model.target_std

    n = len(train_set)
    history: list[dict] = []
    best: Checkpoint | None = None
    best_val = np.inf
    for epoch in range(start_epoch, config.epochs):
        if config.shuffle_each_epoch:
            order = np.random.default_rng([config.seed, 11, epoch]).permutation(n)
        else:
            order = np.arange(n)
        epoch_sse = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb = _stack_images([train_set[i] for i in idx])
            tb = scaled_targets[idx]
            drop_rng = np.random.default_rng([config.seed, 7919, epoch, bi])
            model.params.zero_grad()
            with record() as tape:
                pred = model.forward(xb, training=True, rng=drop_rng)
                loss = mse_loss(pred, tb)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingAbort(f"non-finite loss at epoch {epoch}, "
                                    f"batch {bi}")
            tape.backward(loss)
            adam_step(model.params, config)
            epoch_sse += loss_value * len(idx)
        train_mse = epoch_sse / n * model.target_std ** 2
        val_mse = evaluate(model, val_set).mse if val_set else None
        history.append({"epoch": epoch, "train_mse": train_mse,
                        "val_mse": val_mse})
        current = val_mse if val_mse is not None else np.inf
        if best is None or current < best_val or not val_set:
            best_val = current
            best = _snapshot(model, epoch)
    assert best is not None
    best.apply_to(model)
    return best, history


def _snapshot(model: Model, epoch: int) -> Checkpoint:
    return Checkpoint(model_config=model.config,
                      params=model.params.snapshot(),
                      slots=model.params.snapshot_slots(),
                      adam_step=model.params.step,
                      epoch=epoch,
                      target_mean=model.target_mean,
                      target_std=model.target_std)


def write_history_csv(history: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_mse,val_mse\n")
        for row in history:
            val = "" if row["val_mse"] is None else repr(row["val_mse"])
            fh.write(f"{row['epoch']},{row['train_mse']!r},{val}\n")


# -- checkpoint file format ----------------------------------------------
#
#   magic "SPKF" | u32 version | u32 header length | header JSON (UTF-8)
#   | raw little-endian float64 blobs in header-declared order:
#   parameters, then Adam slots m and v per parameter.


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    names = list(ckpt.params)
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "epoch": ckpt.epoch,
        "adam_step": ckpt.adam_step,
        "target_mean": ckpt.target_mean,
        "target_std": ckpt.target_std,
        "params": [[name, list(ckpt.params[name].shape)] for name in names],
        "has_slots": bool(ckpt.slots),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", ckpt.version, len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(ckpt.params[name], dtype="<f8").tobytes())
        if ckpt.slots:
            for slot_key in ("m", "v"):
                for name in names:
                    fh.write(np.ascontiguousarray(ckpt.slots[name][slot_key],
                                                  dtype="<f8").tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: checkpoint not found") from None
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    pos = 12 + header_len

    def read_array(shape: list[int]) -> np.ndarray:
        nonlocal pos
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated parameter data")
        arr = np.frombuffer(data[pos:pos + nbytes], dtype="<f8").reshape(shape)
        pos += nbytes
        return arr.astype(np.float64)

    params = {name: read_array(shape) for name, shape in header["params"]}
    slots: dict[str, dict[str, np.ndarray]] = {}
    if header["has_slots"]:
        for slot_key in ("m", "v"):
            for name, shape in header["params"]:
                slots.setdefault(name, {})[slot_key] = read_array(shape)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return Checkpoint(model_config=ModelConfig.from_dict(header["model_config"]),
                      params=params, slots=slots,
                      adam_step=header["adam_step"], epoch=header["epoch"],
                      target_mean=header["target_mean"],
                      target_std=header["target_std"], version=version)
