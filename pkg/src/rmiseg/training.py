"""Per-pixel cross-entropy losses, the Adam optimizer, checkpoint IO, and the
deterministic single-sample training loop."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .language import Vocabulary, build_vocabulary, encode
from .models import ModelConfig, build_model, predict_mask
from .tensor import DomainError, ShapeError, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"RMISEGCK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# losses


def _bce_mean(probs, target: np.ndarray) -> Tensor:
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    target = np.asarray(target, dtype=np.float64)
    if probs.shape != target.shape:
        raise ShapeError(f"prediction {probs.shape} vs target {target.shape}")
    if np.any((probs.data <= 0.0) | (probs.data >= 1.0)):
        raise DomainError("probabilities must lie strictly inside (0, 1)")
    y = Tensor(target)
    one_minus_y = Tensor(1.0 - target)
    ones = Tensor(np.ones(probs.shape))
    ll = y * T.log(probs) + one_minus_y * T.log(ones - probs)
    return T.neg(T.mean_all(ll))


def loss_low(probs, target: np.ndarray) -> Tensor:
    """Mean per-cell binary cross-entropy at feature resolution (W' x H')."""
    return _bce_mean(probs, target)


def loss_high(probs, target: np.ndarray) -> Tensor:
    """Same cross-entropy at full image resolution (W x H)."""
    return _bce_mean(probs, target)


def loss_from_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Numerically stable form of the same loss, mean(softplus(z) - z*y).

    This is the training path: it never evaluates log near 0, so the domain
    error of the probability form cannot trigger.
    """
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ShapeError(f"logits {logits.shape} vs target {target.shape}")
    y = Tensor(target)
    return T.mean_all(T.softplus(logits) - logits * y)


def downsample_mask(mask: np.ndarray, factor: int = 8) -> np.ndarray:
    """Majority-vote pooling of a binary mask into (H/factor, W/factor) cells.

    A cell is foreground when at least half its pixels are. This is the
    feature-resolution ground truth the training loss consumes.
    """
    mask = np.asarray(mask)
    height, width = mask.shape
    if height % factor or width % factor:
        raise ShapeError(f"mask extents {mask.shape} not divisible by {factor}")
    blocks = mask.astype(np.float64).reshape(height // factor, factor, width // factor, factor)
    return blocks.mean(axis=(1, 3)) >= 0.5


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, *, lr: float, weight_decay: float = 0.0) -> dict:
    """One bias-corrected Adam update; returns a new name -> Tensor dict.

    Weight decay is coupled L2: lambda * theta is added to the gradient
    before the moment updates.
    """
    state.step += 1
    t = state.step
    out = {}
    for name, param in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != param.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {param.shape}")
        if weight_decay:
            g = g + weight_decay * param.data
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - ADAM_BETA1) * g if m is None else ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = (1.0 - ADAM_BETA2) * g * g if v is None else ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        out[name] = Tensor(param.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), requires_grad=True)
    return out


# ---------------------------------------------------------------------------
# configuration and checkpoints


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "rmi"
    seed: int = 0
    learning_rate: float = 0.00025
    weight_decay: float = 0.0005
    batch_size: int = 1  # fixed; kept explicit so configs can state it
    max_steps: int = 20000
    eval_every: int = 1000
    eval_samples: int = 200
    dims: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("batch size is fixed at 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self) -> dict:
        flat = {
            "variant": self.variant,
            "seed": self.seed,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "max_steps": self.max_steps,
            "eval_every": self.eval_every,
            "eval_samples": self.eval_samples,
        }
        flat.update(self.dims.to_dict())
        return flat

    @classmethod
    def from_dict(cls, flat: dict) -> "TrainConfig":
        flat = dict(flat)
        dims = ModelConfig(**{k: flat.pop(k) for k in ModelConfig().to_dict() if k in flat})
        return cls(dims=dims, **flat)


@dataclass
class ModelCheckpoint:
    """All trainable parameters keyed by canonical name, plus metadata."""

    params: dict  # name -> np.ndarray (float64)
    config: TrainConfig
    step: int
    rng_state: dict
    vocab_size: int

    def save(self, path) -> None:
        header = {
            "config": self.config.to_dict(),
            "rng_state": self.rng_state,
            "vocab_size": self.vocab_size,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<Q", self.step))
            fh.write(struct.pack("<I", len(self.params)))
            for name, arr in self.params.items():
                encoded = name.encode("utf-8")
                fh.write(struct.pack("<I", len(encoded)))
                fh.write(encoded)
                arr = np.ascontiguousarray(arr, dtype=np.float64)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        with open(path, "rb") as fh:
            if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint file")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            (blob_len,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(blob_len).decode("utf-8"))
            (step,) = struct.unpack("<Q", fh.read(8))
            (count,) = struct.unpack("<I", fh.read(4))
            params = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<I", fh.read(4))
                name = fh.read(name_len).decode("utf-8")
                (ndim,) = struct.unpack("<B", fh.read(1))
                shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
                n = int(np.prod(shape)) if ndim else 1
                arr = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
                params[name] = arr.astype(np.float64)
        return cls(
            params=params,
            config=TrainConfig.from_dict(header["config"]),
            step=step,
            rng_state=header["rng_state"],
            vocab_size=header["vocab_size"],
        )

    def build_model(self):
        """Reconstruct the model this checkpoint was taken from."""
        model = build_model(self.config.variant, self.config.dims, self.vocab_size, np.random.default_rng(0))
        model.set_params({k: Tensor(v, requires_grad=True) for k, v in self.params.items()})
        return model


def _rng_state_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))  # plain dict of ints/strings


# ---------------------------------------------------------------------------
# training loop


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: ModelCheckpoint):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    vocab: Vocabulary
    log: list
    final_iou: float
    wall_seconds: float


def _cumulative_iou(model, prepared, image_size: int) -> float:
    inter = union = 0
    for image, seq, _, full_mask in prepared:
        pred = predict_mask(model.forward(image, seq), image_size, image_size)
        inter += int(np.logical_and(pred, full_mask).sum())
        union += int(np.logical_or(pred, full_mask).sum())
    return inter / union if union else 1.0


def _prepare(samples, vocab: Vocabulary):
    out = []
    for s in samples:
        seq = encode(s.expression, vocab)
        out.append((s.image, seq, downsample_mask(s.mask), s.mask))
    return out


def train(config: TrainConfig, train_samples, holdout_samples=(), log_sink=None) -> TrainResult:
    """Run the single-stage training loop.

    Fully deterministic given (config, samples): one RNG seeded from
    config.seed drives parameter init and sample order. Emits one JSON-ready
    dict per logging event to ``log_sink`` (a callable) when given, and
    returns them all. Raises TrainingDiverged with a diagnostic checkpoint
    if the loss goes non-finite.
    """
    if not train_samples:
        raise ValueError("empty training dataset")
    started = time.monotonic()
    rng = np.random.default_rng(config.seed)
    vocab = build_vocabulary(s.expression for s in train_samples)
    model = build_model(config.variant, config.dims, len(vocab), rng)

    prepared = _prepare(train_samples, vocab)
    holdout = _prepare(holdout_samples[: config.eval_samples], vocab) if holdout_samples else []

    log = []

    def emit(record):
        log.append(record)
        if log_sink is not None:
            log_sink(record)

    emit({"type": "header", "config": config.to_dict(), "num_train": len(prepared), "num_holdout": len(holdout)})

    params = model.params()
    opt = AdamState()
    image_size = config.dims.image_size
    loss_value = float("nan")
    final_iou = float("nan")

    def snapshot(step):
        return ModelCheckpoint(
            params={k: np.array(v.data) for k, v in params.items()},
            config=config,
            step=step,
            rng_state=_rng_state_json(rng),
            vocab_size=len(vocab),
        )

    for step in range(1, config.max_steps + 1):
        image, seq, cell_mask, _ = prepared[int(rng.integers(len(prepared)))]
        with T.Tape() as tape:
            seg = model.forward(image, seq)
            loss = loss_from_logits(seg.logits, cell_mask)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            emit({"type": "diverged", "step": step, "loss": loss_value})
            raise TrainingDiverged(step, snapshot(step))
        grads = tape.backward(loss, wrt=list(params.values()))
        named_grads = {name: grads[t] for name, t in params.items()}
        params = adam_step(params, named_grads, opt, lr=config.learning_rate, weight_decay=config.weight_decay)
        model.set_params(params)

        if step % config.eval_every == 0 or step == config.max_steps:
            record = {"type": "step", "step": step, "loss": loss_value}
            if holdout:
                final_iou = _cumulative_iou(model, holdout, image_size)
                record["holdout_iou"] = final_iou
            emit(record)

    if holdout and not np.isfinite(final_iou):
        final_iou = _cumulative_iou(model, holdout, image_size)

    return TrainResult(
        checkpoint=snapshot(config.max_steps),
        vocab=vocab,
        log=log,
        final_iou=final_iou,
        wall_seconds=time.monotonic() - started,
    )
