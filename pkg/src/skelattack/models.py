"""Causal sequence-to-sequence regressors and their training loop.

Two architectures are provided.  The convolutional one stacks dilated
causal convolutions with residual connections; the recurrent one stacks
gated recurrent layers with a per-timestep linear head.  Both map an
input sequence (T, 3N) to an output sequence of the same shape, and both
are causal: output frame t depends only on input frames 1..t.

A trained model is immutable as far as prediction is concerned, so
predict() may be called concurrently; train() mutates the model and is
single-threaded per model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .data import DatasetSplit, SkeletonSequence
from .optim import adam_update

CHECKPOINT_FORMAT = "skelattack-model"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")


@dataclass
class TcnConfig:
    in_dim: int
    hidden_layers: int = 10
    channels: int = 256
    kernel_width: int = 3
    dilations: list[int] | None = None  # default: doubling per layer

    def __post_init__(self):
        if self.hidden_layers < 1:
            raise ModelError("hidden_layers must be >= 1")
        if self.dilations is None:
            self.dilations = [2 ** i for i in range(self.hidden_layers)]
        if len(self.dilations) != self.hidden_layers:
            raise ModelError("dilation schedule length must equal hidden_layers")
        if any(d < 1 for d in self.dilations):
            raise ModelError("dilations must be strictly positive")


@dataclass
class GruConfig:
    in_dim: int
    stack: list[tuple[int, int]] = field(
        default_factory=lambda: [(2, 512), (2, 256), (1, 128)])

    def __post_init__(self):
        self.stack = [tuple(int(v) for v in entry) for entry in self.stack]
        if not self.stack:
            raise ModelError("recurrent stack must be non-empty")
        if any(n < 1 or h < 1 for n, h in self.stack):
            raise ModelError("stack entries must be positive (num_layers, hidden)")

    def layer_sizes(self) -> list[int]:
        sizes: list[int] = []
        for num_layers, hidden in self.stack:
            sizes.extend([hidden] * num_layers)
        return sizes


@dataclass
class TrainConfig:
    epochs: int = 1000
    lr: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ModelError("epochs must be >= 1")
        if self.lr <= 0:
            raise ModelError("learning rate must be positive")


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = math.sqrt(1.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class SequenceRegressor:
    """Shared plumbing: parameter tensors, prediction, causal forward."""

    arch = "base"

    def __init__(self, config, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @property
    def in_dim(self) -> int:
        return self.config.in_dim

    def build_graph(self, x: ad.Tensor, pt: dict[str, ad.Tensor]) -> ad.Tensor:
        raise NotImplementedError

    def param_tensors(self, trainable: bool) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=trainable, op="param")
                for k, v in self.params.items()}

    def forward(self, x: ad.Tensor, trainable: bool = False
                ) -> tuple[ad.Tensor, dict[str, ad.Tensor]]:
        if x.value.ndim != 2 or x.value.shape[1] != self.in_dim:
            raise ModelError(
                f"input must be (T, {self.in_dim}), got {x.value.shape}")
        pt = self.param_tensors(trainable)
        return self.build_graph(x, pt), pt

    def predict_flat(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward(ad.Tensor(x))
        return out.value

    def predict(self, seq: SkeletonSequence) -> SkeletonSequence:
        return SkeletonSequence.from_flat(self.predict_flat(seq.flat()))


class TcnRegressor(SequenceRegressor):
    arch = "tcn"

    def __init__(self, config: TcnConfig, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        if params is None:
            params = self._init_params(config, seed)
        super().__init__(config, params)

    @staticmethod
    def _init_params(cfg: TcnConfig, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        c_in = cfg.in_dim
        for i in range(cfg.hidden_layers):
            k = cfg.kernel_width
            params[f"conv{i}_w"] = _uniform_init(rng, (k, c_in, cfg.channels), k * c_in)
            params[f"conv{i}_b"] = np.zeros(cfg.channels)
            if c_in != cfg.channels:
                params[f"proj{i}_w"] = _uniform_init(rng, (c_in, cfg.channels), c_in)
            c_in = cfg.channels
        params["head_w"] = _uniform_init(rng, (cfg.channels, cfg.in_dim), cfg.channels)
        params["head_b"] = np.zeros(cfg.in_dim)
        return params

    def build_graph(self, x: ad.Tensor, pt: dict[str, ad.Tensor]) -> ad.Tensor:
        cfg = self.config
        h = x
        c_in = cfg.in_dim
        for i, dilation in enumerate(cfg.dilations):
            pre = ad.add(ad.causal_conv1d(h, pt[f"conv{i}_w"], dilation=dilation),
                         pt[f"conv{i}_b"])
            res = h if c_in == cfg.channels else ad.matmul(h, pt[f"proj{i}_w"])
            h = ad.relu(ad.add(pre, res))
            c_in = cfg.channels
        return ad.add(ad.matmul(h, pt["head_w"]), pt["head_b"])


class GruRegressor(SequenceRegressor):
    arch = "gru"

    def __init__(self, config: GruConfig, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        if params is None:
            params = self._init_params(config, seed)
        super().__init__(config, params)

    @staticmethod
    def _init_params(cfg: GruConfig, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        c_in = cfg.in_dim
        for i, hidden in enumerate(cfg.layer_sizes()):
            params[f"gru{i}_w"] = _uniform_init(rng, (c_in, 3 * hidden), c_in)
            params[f"gru{i}_u"] = _uniform_init(rng, (hidden, 3 * hidden), hidden)
            params[f"gru{i}_bi"] = np.zeros(3 * hidden)
            params[f"gru{i}_bh"] = np.zeros(3 * hidden)
            c_in = hidden
        params["head_w"] = _uniform_init(rng, (c_in, cfg.in_dim), c_in)
        params["head_b"] = np.zeros(cfg.in_dim)
        return params

    def build_graph(self, x: ad.Tensor, pt: dict[str, ad.Tensor]) -> ad.Tensor:
        frames = x.value.shape[0]
        h_seq = x
        for i, hidden in enumerate(self.config.layer_sizes()):
            # project the whole input sequence at once; recurrence stays per step
            xp = ad.add(ad.matmul(h_seq, pt[f"gru{i}_w"]), pt[f"gru{i}_bi"])
            ones = ad.Tensor(np.ones((1, hidden)))
            h = ad.Tensor(np.zeros((1, hidden)))
            outs = []
            for t in range(frames):
                xp_t = ad.slice_axis(xp, t, t + 1, axis=0)
                hu = ad.add(ad.matmul(h, pt[f"gru{i}_u"]), pt[f"gru{i}_bh"])
                zr = ad.sigmoid(ad.add(ad.slice_axis(xp_t, 0, 2 * hidden, axis=1),
                                       ad.slice_axis(hu, 0, 2 * hidden, axis=1)))
                z = ad.slice_axis(zr, 0, hidden, axis=1)
                r = ad.slice_axis(zr, hidden, 2 * hidden, axis=1)
                n = ad.tanh(ad.add(
                    ad.slice_axis(xp_t, 2 * hidden, 3 * hidden, axis=1),
                    ad.multiply(r, ad.slice_axis(hu, 2 * hidden, 3 * hidden, axis=1))))
                h = ad.add(ad.multiply(ad.subtract(ones, z), n), ad.multiply(z, h))
                outs.append(h)
            h_seq = ad.concat_time(outs)
        return ad.add(ad.matmul(h_seq, pt["head_w"]), pt["head_b"])


TCN_PRESETS = {
    "tiny": dict(hidden_layers=3, channels=32, kernel_width=3),
    "full": dict(hidden_layers=10, channels=256, kernel_width=3),
}

GRU_PRESETS = {
    "tiny": [(1, 32)],
    "full": [(2, 512), (2, 256), (1, 128)],
}


def create_model(arch: str, in_dim: int, preset: str = "tiny", seed: int = 0,
                 **overrides) -> SequenceRegressor:
    if arch == "tcn":
        kwargs = dict(TCN_PRESETS[preset])
        kwargs.update(overrides)
        return TcnRegressor(TcnConfig(in_dim=in_dim, **kwargs), seed=seed)
    if arch == "gru":
        stack = overrides.pop("stack", GRU_PRESETS[preset])
        if overrides:
            raise ModelError(f"unknown overrides for gru: {sorted(overrides)}")
        return GruRegressor(GruConfig(in_dim=in_dim, stack=stack), seed=seed)
    raise ModelError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# training


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    diff = pred - target
    return float(np.mean(diff * diff))


def train(model: SequenceRegressor,
          split,
          cfg: TrainConfig) -> tuple[SequenceRegressor, list[float]]:
    """Full-batch Adam on per-frame mean squared error.

    Accepts a DatasetSplit (its train partition is used) or a plain list
    of (input, target) sequence pairs.  Gradients are averaged over all
    pairs each epoch and applied with one optimizer step, so the loss
    history is reproducible bit-for-bit.
    """
    pairs = split.train if isinstance(split, DatasetSplit) else split
    if not pairs:
        raise ModelError("training requires at least one pair")
    flat_pairs = [(x.flat(), y.flat()) for x, y in pairs]
    for x, y in flat_pairs:
        if x.shape != y.shape:
            raise ModelError(f"input/target shapes differ: {x.shape} vs {y.shape}")
        if x.shape[1] != model.in_dim:
            raise ModelError(
                f"pair dimension {x.shape[1]} does not match model ({model.in_dim})")
    history: list[float] = []
    state = None
    for epoch in range(cfg.epochs):
        pt = model.param_tensors(trainable=True)
        epoch_loss = 0.0
        for x, y in flat_pairs:
            out = model.build_graph(ad.Tensor(x), pt)
            diff = ad.subtract(out, ad.Tensor(y))
            loss = ad.scalar_multiply(ad.sum_reduce(ad.multiply(diff, diff)),
                                      1.0 / y.size)
            epoch_loss += float(loss.value)
            ad.backward(loss)
        epoch_loss /= len(flat_pairs)
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch, epoch_loss)
        history.append(epoch_loss)
        grads = {k: t.grad / len(flat_pairs) for k, t in pt.items()}
        model.params, state = adam_update(model.params, grads, state, lr=cfg.lr)
    return model, history


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: SequenceRegressor, path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "config": asdict(model.config),
        "params": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in model.params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_model(path, expected_arch: str | None = None) -> SequenceRegressor:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupted checkpoint: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    arch = payload.get("arch")
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(
            f"checkpoint holds a {arch!r} model, expected {expected_arch!r}")
    try:
        raw_params = payload["params"]
        params = {
            name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in raw_params.items()
        }
        if arch == "tcn":
            return TcnRegressor(TcnConfig(**payload["config"]), params=params)
        if arch == "gru":
            return GruRegressor(GruConfig(**payload["config"]), params=params)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    raise CheckpointError(f"unknown architecture {arch!r}")
