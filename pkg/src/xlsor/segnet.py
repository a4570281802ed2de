"""Desk-scale segmentor: strided conv encoder, recurrent criss-cross attention, 1×1 head.

Also holds the training loop (MSE on sigmoid probabilities, SGD with momentum
and weight decay, poly learning-rate decay) and the binary checkpoint format.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics
from . import tensor as T
from .cca import CCAWeights, rcca_forward, reduced_channels
from .data import MaskPair
from .errors import ConfigError, DataError, ShapeError
from .tensor import Node

log = logging.getLogger(__name__)

UPSAMPLE_MODES = ("nearest", "bilinear")
_ENCODER_STRIDES = {1: (1, 1), 2: (2, 1), 4: (2, 2)}


@dataclass
class SegmentorConfig:
    input_size: Tuple[int, int] = (64, 64)
    base_channels: int = 16
    encoder_stride: int = 4
    cca_passes: int = 2
    upsample: str = "bilinear"
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigError(f"input_size must be two positive ints, got {self.input_size}")
        if self.encoder_stride not in _ENCODER_STRIDES:
            raise ConfigError(f"encoder_stride must be one of {sorted(_ENCODER_STRIDES)}")
        if any(s % self.encoder_stride for s in self.input_size):
            raise ConfigError(
                f"input_size {self.input_size} not divisible by encoder_stride {self.encoder_stride}"
            )
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.cca_passes < 1:
            raise ConfigError("cca_passes must be >= 1")
        if self.upsample not in UPSAMPLE_MODES:
            raise ConfigError(f"upsample must be one of {UPSAMPLE_MODES}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")


@dataclass
class TrainConfig:
    initial_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0005
    power: float = 0.9
    batch_size: int = 4
    max_iter: int = 2000
    val_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.power <= 0:
            raise ConfigError("power must be positive")
        if self.batch_size < 1 or self.max_iter < 1 or self.val_every < 1:
            raise ConfigError("batch_size, max_iter and val_every must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")


def layer_shapes(cfg: SegmentorConfig) -> Dict[str, tuple]:
    """Declared parameter shapes, in the canonical (initialization) order."""
    b = cfg.base_channels
    c = 2 * b
    cr = reduced_channels(c)
    return {
        "enc1.weight": (b, 1, 3, 3),
        "enc1.bias": (b,),
        "enc2.weight": (c, b, 3, 3),
        "enc2.bias": (c,),
        "cca.query": (cr, c, 1, 1),
        "cca.key": (cr, c, 1, 1),
        "cca.value": (c, c, 1, 1),
        "head.weight": (1, c, 1, 1),
        "head.bias": (1,),
    }


class Segmentor:
    def __init__(self, cfg: SegmentorConfig, params: Dict[str, Node], trained: bool = False):
        expected = layer_shapes(cfg)
        if list(params) != list(expected):
            raise ShapeError(f"parameter names {list(params)} != {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: shape {params[name].shape} != {shape}")
        self.cfg = cfg
        self.params = params
        self.trained = trained

    def parameters(self) -> List[Node]:
        return list(self.params.values())

    def forward(self, images) -> Node:
        """N×1×H×W images in [0, 1] -> N×1×H×W probability node.

        Images enter as constants, mapped affinely from [0, 1] onto [-1, 1].
        """
        images = images.value if isinstance(images, Node) else np.asarray(images, dtype=np.float64)
        x = Node(2.0 * (images - 0.5))
        if x.value.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected N×1×H×W images, got {x.shape}")
        if any(s % self.cfg.encoder_stride for s in x.shape[2:]):
            raise ShapeError(f"image size {x.shape[2:]} not divisible by the encoder stride")
        p = self.params
        s1, s2 = _ENCODER_STRIDES[self.cfg.encoder_stride]
        h = T.relu(T.conv2d(x, p["enc1.weight"], p["enc1.bias"], stride=s1, padding=1))
        h = T.relu(T.conv2d(h, p["enc2.weight"], p["enc2.bias"], stride=s2, padding=1))
        attn_weights = CCAWeights(p["cca.query"], p["cca.key"], p["cca.value"])
        h = rcca_forward(h, attn_weights, passes=self.cfg.cca_passes)
        logits = T.conv2d(h, p["head.weight"], p["head.bias"])
        if self.cfg.upsample == "nearest":
            logits = T.upsample_nearest(logits, self.cfg.encoder_stride)
        else:
            logits = T.upsample_bilinear(logits, self.cfg.encoder_stride)
        return T.sigmoid(logits)

    def predict(self, images, batch_size: int = 16) -> np.ndarray:
        """Probability maps for N×H×W or N×1×H×W images (no graph kept)."""
        images = _as_batch(images)
        out = [
            self.forward(images[i:i + batch_size]).value
            for i in range(0, len(images), batch_size)
        ]
        return np.concatenate(out, axis=0)

    def state(self) -> Dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}


def _as_batch(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None, None]
    elif images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4 or images.shape[1] != 1:
        raise ShapeError(f"cannot interpret {images.shape} as a batch of gray images")
    return images


def build_segmentor(cfg: SegmentorConfig) -> Segmentor:
    """Fresh parameters: weights ~ N(0, 2/fan_in), biases zero, drawn in layer order."""
    rng = np.random.default_rng(int(cfg.seed))
    params = {}
    for name, shape in layer_shapes(cfg).items():
        if name.endswith("bias"):
            params[name] = Node(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = Node(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape))
    return Segmentor(cfg, params)


def parameter_count(cfg: SegmentorConfig) -> int:
    return sum(p.value.size for p in build_segmentor(cfg).parameters())


# ---------------------------------------------------------------- optimizer


def poly_lr(initial_lr: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """``initial_lr * (1 - iteration / max_iter) ** power``."""
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return initial_lr * (1.0 - iteration / max_iter) ** power


def sgd_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    velocity: Optional[Dict[str, np.ndarray]],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0005,
):
    """One SGD update with momentum and L2 weight decay.

    ``v <- momentum * v + (grad + weight_decay * param)``; ``param <- param - lr * v``.
    Returns new ``(params, velocity)`` dicts; the inputs are left untouched.
    ``velocity=None`` means zero velocity (first step).
    """
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        v = g + weight_decay * p
        if velocity is not None:
            if velocity[name].shape != p.shape:
                raise ShapeError(f"{name}: velocity shape {velocity[name].shape} != {p.shape}")
            v = momentum * velocity[name] + v
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, new_velocity


# ----------------------------------------------------------------- training


@dataclass
class TrainLog:
    iters: List[int] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    val: List[Tuple[int, float]] = field(default_factory=list)
    best_iter: Optional[int] = None

    def append(self, it, lr, loss):
        self.iters.append(it)
        self.lrs.append(lr)
        self.losses.append(loss)

    def to_csv(self) -> str:
        lines = ["iter,lr,loss"]
        lines += [f"{i},{lr!r},{loss!r}" for i, lr, loss in zip(self.iters, self.lrs, self.losses)]
        return "\n".join(lines) + "\n"


def _stack(pairs: Sequence[MaskPair]):
    images = np.stack([p.image for p in pairs])[:, None]
    masks = np.stack([p.mask for p in pairs])[:, None].astype(np.float64)
    return images, masks


def _check_pairs(pairs: Sequence[MaskPair], what: str):
    for i, p in enumerate(pairs):
        if not np.isin(p.mask, (0, 1)).all():
            raise DataError(f"{what}[{i}]: mask is not binary")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless index batches: a fresh permutation per epoch, wrapping across epochs."""
    order = rng.permutation(n)
    pos = 0
    while True:
        batch = []
        while len(batch) < batch_size:
            if pos == n:
                order, pos = rng.permutation(n), 0
            take = min(batch_size - len(batch), n - pos)
            batch.extend(order[pos:pos + take])
            pos += take
        yield np.array(batch)


def validation_dice(model: Segmentor, pairs: Sequence[MaskPair], threshold: float = 0.5) -> float:
    images, masks = _stack(pairs)
    pred = binarize(model.predict(images), threshold)
    scores = [metrics.dice(metrics.confusion(p[0], m[0].astype(np.uint8))) for p, m in zip(pred, masks)]
    return float(np.mean(scores))


def train(
    train_set: Sequence[MaskPair],
    val_set: Sequence[MaskPair],
    seg_cfg: SegmentorConfig,
    train_cfg: TrainConfig,
    init: Optional[Segmentor] = None,
) -> Tuple[Segmentor, TrainLog]:
    """Train with MSE + SGD/poly, keeping the checkpoint with the best validation DICE.

    Validation runs every ``val_every`` iterations and after the last one;
    with an empty ``val_set`` the final parameters are returned.
    """
    if not train_set:
        raise DataError("training set is empty")
    _check_pairs(train_set, "train_set")
    _check_pairs(val_set, "val_set")
    images, masks = _stack(train_set)
    model = init if init is not None else build_segmentor(seg_cfg)
    model = Segmentor(model.cfg, {k: Node(v) for k, v in model.state().items()})
    rng = np.random.default_rng(int(train_cfg.seed))
    batches = _batches(len(train_set), train_cfg.batch_size, rng)
    history = TrainLog()
    velocity = None
    best_score, best_state = -np.inf, None

    for it in range(train_cfg.max_iter):
        idx = next(batches)
        lr = poly_lr(train_cfg.initial_lr, it, train_cfg.max_iter, train_cfg.power)
        loss = T.mse_loss(model.forward(images[idx]), masks[idx])
        T.zero_grads(model.parameters())
        T.backward(loss)
        state, velocity = sgd_step(
            model.state(),
            {k: v.grad for k, v in model.params.items()},
            velocity,
            lr,
            train_cfg.momentum,
            train_cfg.weight_decay,
        )
        model = Segmentor(model.cfg, {k: Node(v) for k, v in state.items()})
        history.append(it, lr, float(loss.value))

        done = it + 1
        if val_set and (done % train_cfg.val_every == 0 or done == train_cfg.max_iter):
            score = validation_dice(model, val_set)
            history.val.append((done, score))
            log.debug("iter %d loss %.5f val dice %.4f", done, float(loss.value), score)
            if score > best_score:
                best_score, best_state, history.best_iter = score, model.state(), done

    if best_state is None:
        best_state, history.best_iter = model.state(), train_cfg.max_iter
    final = Segmentor(model.cfg, {k: Node(v) for k, v in best_state.items()}, trained=True)
    return final, history


def binarize(p: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where ``p >= threshold`` (ties are foreground), else 0."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(p) >= threshold).astype(np.uint8)


def predict(model: Segmentor, images) -> np.ndarray:
    return model.predict(images)


# -------------------------------------------------------------- checkpoints
#
# Little-endian container:
#   b"XLSR\0"  u8 version
#   u32 config_len, config_len bytes of UTF-8 JSON (SegmentorConfig, sorted keys)
#   u32 entry_count, then per entry:
#     u32 name_len, name (UTF-8), u32 ndim, ndim × u32 dims, prod(dims) × f64 values

MAGIC = b"XLSR\0"
VERSION = 1


def checkpoint_bytes(model: Segmentor) -> bytes:
    cfg = asdict(model.cfg)
    cfg["input_size"] = list(cfg["input_size"])
    meta = json.dumps(cfg, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(meta)), meta]
    out.append(struct.pack("<I", len(model.params)))
    for name, node in model.params.items():
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{node.value.ndim}I", node.value.ndim, *node.shape))
        out.append(node.value.astype("<f8").tobytes())
    return b"".join(out)


def save_checkpoint(model: Segmentor, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> Segmentor:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(buf)


def parse_checkpoint(buf: bytes) -> Segmentor:
    if buf[:5] != MAGIC:
        raise DataError("not an XLSR checkpoint (bad magic)")
    pos = 5

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise DataError("truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (version,) = take("<B")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (meta_len,) = take("<I")
    meta = json.loads(buf[pos:pos + meta_len].decode())
    pos += meta_len
    try:
        cfg = SegmentorConfig(**meta)
    except TypeError as exc:
        raise DataError(f"bad checkpoint config: {exc}") from exc
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = buf[pos:pos + name_len].decode()
        pos += name_len
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape))
        if pos + 8 * n > len(buf):
            raise DataError("truncated checkpoint")
        values = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        params[name] = Node(values.astype(np.float64))
    if pos != len(buf):
        raise DataError("trailing bytes after checkpoint entries")
    return Segmentor(cfg, params, trained=True)
