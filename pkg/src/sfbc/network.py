"""Network assembly and training: parameter init, Adam, learning-rate
schedules, L2 loss, time-integration helpers and the generic training loop.

A network is a list of (ConvLayerParams, ConvConfig, activate) layers chaining
input channels -> features_per_layer x (mp_steps - 1) -> output width, with
the pointwise activation on all but the final layer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from sfbc.bases import BasisSpec, MappingSpec, WindowSpec
from sfbc.conv import ConvConfig, ConvLayerParams, stack_backward, stack_forward
from sfbc.errors import ConfigurationError, DatasetError, TrainingDiverged

CHECKPOINT_MAGIC = b"SFBCCKPT"


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based deterministic generator; same (seed, key) -> same stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed,) + key)))


@dataclass(frozen=True)
class NetworkConfig:
    mp_steps: int
    features_per_layer: int
    input_features: tuple
    output_width: int
    conv: ConvConfig
    seed: int = 0
    use_self: bool = True
    use_bias: bool = True

    def __post_init__(self):
        if self.mp_steps < 1 or self.features_per_layer < 1:
            raise ConfigurationError("mp_steps and features_per_layer must be >= 1")

    @property
    def in_width(self) -> int:
        return len(self.input_features)

    def layer_widths(self) -> list:
        widths = [self.in_width]
        widths += [self.features_per_layer] * (self.mp_steps - 1)
        widths.append(self.output_width)
        return widths


@dataclass(frozen=True)
class LRSchedule:
    """Either halve the rate every ``halve_every`` epochs, or decay
    geometrically from ``initial`` to ``final`` with a reduction every
    ``reduce_every`` updates."""

    initial: float
    kind: str = "halve-epochs"
    halve_every: int = 1
    final: float | None = None
    reduce_every: int = 25

    def rate(self, update_index: int, updates_per_epoch: int, total_updates: int) -> float:
        if self.kind == "halve-epochs":
            epoch = update_index // max(1, updates_per_epoch)
            return self.initial * 0.5 ** (epoch // self.halve_every)
        if self.kind == "geometric":
            if self.final is None:
                raise ConfigurationError("geometric schedule needs a final rate")
            n_steps = max(1, (total_updates - 1) // self.reduce_every)
            gamma = (self.final / self.initial) ** (1.0 / n_steps)
            return self.initial * gamma ** (update_index // self.reduce_every)
        raise ConfigurationError(f"unknown lr schedule kind {self.kind!r}")


@dataclass(frozen=True)
class RolloutSchedule:
    """Unroll length per epoch: starts at ``initial`` and grows by one every
    ``increment_every`` epochs up to ``maximum``."""

    initial: int = 1
    increment_every: int = 0
    maximum: int = 1

    def length(self, epoch: int) -> int:
        if self.increment_every <= 0:
            return self.initial
        return min(self.maximum, self.initial + epoch // self.increment_every)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    updates_per_epoch: int
    batch_size: int
    lr: LRSchedule
    rollout: RolloutSchedule = RolloutSchedule()
    seed: int = 0
    stop_rollout_gradient: bool = False

    def __post_init__(self):
        if min(self.epochs, self.updates_per_epoch, self.batch_size) < 0:
            raise ConfigurationError("training counts must be non-negative")

    @property
    def total_updates(self) -> int:
        return self.epochs * self.updates_per_epoch


def init_network(config: NetworkConfig) -> list:
    """Deterministic layer list. Weights are uniform in [-s, s] with
    s = 1 / sqrt(fan_in * basis terms); biases start at zero."""
    rng = rng_stream(config.seed, 0xB0)
    layers = []
    widths = config.layer_widths()
    for k, (c_in, c_out) in enumerate(zip(widths[:-1], widths[1:])):
        term_shape = config.conv.term_shape(_conv_dim(config.conv))
        t_total = int(np.prod(term_shape))
        s = 1.0 / np.sqrt(c_in * t_total)
        weights = rng.uniform(-s, s, size=term_shape + (c_in, c_out))
        s_self = 1.0 / np.sqrt(c_in)
        if config.use_self:
            self_w = rng.uniform(-s_self, s_self, size=(c_in, c_out))
        else:
            self_w = np.zeros((c_in, c_out))
        bias = np.zeros(c_out) if config.use_bias else None
        activate = k < config.mp_steps - 1
        layers.append((ConvLayerParams(weights, self_w, bias), config.conv, activate))
    return layers


def _conv_dim(conv: ConvConfig) -> int:
    basis = conv.basis
    return 1 if isinstance(basis, BasisSpec) else len(basis)


def trainable_arrays(layers, config: NetworkConfig) -> list:
    arrays = []
    for params, _, _ in layers:
        arrays.append(params.weights)
        if config.use_self:
            arrays.append(params.self_weights)
        if config.use_bias and params.bias is not None:
            arrays.append(params.bias)
    return arrays


def _grad_arrays(grads, config: NetworkConfig) -> list:
    arrays = []
    for g in grads:
        arrays.append(g.weights)
        if config.use_self:
            arrays.append(g.self_weights)
        if config.use_bias and g.bias is not None:
            arrays.append(g.bias)
    return arrays


def advect(x, v, a, dt):
    """x' = x + dt*v + dt^2*a."""
    return x + dt * np.asarray(v) + dt * dt * np.asarray(a)


def finite_velocity(x_t, x_prev, dt):
    """Velocity implied by two positions one step apart."""
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    return (np.asarray(x_t) - np.asarray(x_prev)) / dt


def l2_loss(pred, target) -> float:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ConfigurationError("loss operands must have equal shapes")
    delta = pred - target
    return float(np.mean(delta * delta))


@dataclass
class AdamState:
    """First/second-moment accumulators mirroring a flat parameter list."""

    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(params: list, grads: list, state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update applied in place."""
    if len(params) != len(grads):
        raise ConfigurationError("parameter/gradient count mismatch")
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def sample_loss_and_grads(layers, config, sample):
    """Single-sample forward/backward; returns (loss, per-layer grads)."""
    graph, features, target = sample
    out, cache = stack_forward(graph, features, layers)
    if out.shape != target.shape:
        raise ConfigurationError("network output does not match target shape")
    delta = out - target
    loss = float(np.mean(delta * delta))
    upstream = (2.0 / delta.size) * delta
    grads, _ = stack_backward(graph, layers, cache, upstream)
    return loss, grads


def _rollout_loss_and_grads(layers, chain, length, stop_gradient):
    """Unrolled loss over a prediction chain.

    ``chain.step(k, prev_prediction)`` returns (graph, features, target) where
    the previous prediction feeds the first output_width feature channels.
    Gradients flow through that feature chain (graph geometry is treated as
    data); ``stop_gradient`` cuts the chain between steps.
    """
    tape = []
    pred = None
    losses = []
    for k in range(length):
        graph, features, target = chain.step(k, pred)
        out, cache = stack_forward(graph, features, layers)
        delta = out - target
        losses.append(float(np.mean(delta * delta)))
        tape.append((graph, cache, delta))
        pred = out
    total_grads = None
    feed = None
    width = tape[0][2].shape[1]
    for k in range(length - 1, -1, -1):
        graph, cache, delta = tape[k]
        upstream = (2.0 / delta.size) * delta / length
        if feed is not None and not stop_gradient:
            upstream = upstream + feed
        grads, grad_in = stack_backward(graph, layers, cache, upstream)
        feed = grad_in[:, :width]
        if total_grads is None:
            total_grads = grads
        else:
            for acc, g in zip(total_grads, grads):
                acc.weights += g.weights
                acc.self_weights += g.self_weights
                if acc.bias is not None:
                    acc.bias += g.bias
    return float(np.mean(losses)), total_grads


def train_nnti(dataset, net_config: NetworkConfig, train_config: TrainConfig, task=None):
    """Train a network on (graph, features, target) samples.

    ``dataset`` must provide ``samples(task)`` returning a sequence of sample
    handles; a handle is either callable (lazy single-step sample), a plain
    triple, or an object with ``step(k, prev)`` and ``max_length`` for rollout
    training. Samples are drawn without replacement within an epoch whenever
    the pool is large enough. Returns (layers, history) where history rows are
    (update_index, lr, train_loss).
    """
    handles = list(dataset.samples(task) if hasattr(dataset, "samples") else dataset)
    if not handles:
        raise DatasetError("dataset provided no samples for the task")
    layers = init_network(net_config)
    params = trainable_arrays(layers, net_config)
    state = AdamState.for_params(params)
    order_rng = rng_stream(train_config.seed, 0x5A)
    history = []

    order = []
    for update in range(train_config.total_updates):
        epoch = update // train_config.updates_per_epoch
        lr = train_config.lr.rate(
            update, train_config.updates_per_epoch, train_config.total_updates
        )
        batch = []
        for _ in range(train_config.batch_size):
            if not order:
                order = list(order_rng.permutation(len(handles)))
            batch.append(handles[order.pop()])

        length = train_config.rollout.length(epoch)
        batch_loss = 0.0
        batch_grads = None
        for handle in batch:
            if hasattr(handle, "step"):
                loss, grads = _rollout_loss_and_grads(
                    layers,
                    handle,
                    min(length, handle.max_length),
                    train_config.stop_rollout_gradient,
                )
            else:
                sample = handle() if callable(handle) else handle
                loss, grads = sample_loss_and_grads(layers, net_config, sample)
            batch_loss += loss
            flat = _grad_arrays(grads, net_config)
            if batch_grads is None:
                batch_grads = flat
            else:
                for acc, g in zip(batch_grads, flat):
                    acc += g
        batch_loss /= len(batch)
        if not np.isfinite(batch_loss):
            raise TrainingDiverged(update)
        for g in batch_grads:
            g /= len(batch)
        adam_step(params, batch_grads, state, lr)
        history.append((update, lr, batch_loss))
    return layers, history


def evaluate(layers, samples) -> float:
    """Mean L2 over a sample collection."""
    losses = []
    for handle in samples:
        graph, features, target = handle() if callable(handle) else handle
        out, _ = stack_forward(graph, features, layers)
        losses.append(l2_loss(out, target))
    return float(np.mean(losses))


def config_hash(net_config: NetworkConfig) -> str:
    return hashlib.sha256(
        json.dumps(network_config_to_dict(net_config), sort_keys=True).encode()
    ).hexdigest()[:16]


def network_config_to_dict(config: NetworkConfig) -> dict:
    conv = config.conv
    basis = conv.basis
    basis_list = [basis] if isinstance(basis, BasisSpec) else list(basis)
    return {
        "mp_steps": config.mp_steps,
        "features_per_layer": config.features_per_layer,
        "input_features": list(config.input_features),
        "output_width": config.output_width,
        "seed": config.seed,
        "use_self": config.use_self,
        "use_bias": config.use_bias,
        "conv": {
            "basis": [{"name": b.name, "n": b.n} for b in basis_list],
            "window": conv.window.kind,
            "mapping": conv.mapping.kind,
            "symmetry": conv.symmetry,
            "batch_size": conv.batch_size,
        },
    }


def network_config_from_dict(data: dict) -> NetworkConfig:
    conv = data["conv"]
    basis = tuple(BasisSpec.from_name(b["name"], b["n"]) for b in conv["basis"])
    conv_config = ConvConfig(
        basis=basis if len(basis) > 1 else basis[0],
        window=WindowSpec(conv["window"]),
        mapping=MappingSpec(conv["mapping"]),
        symmetry=conv["symmetry"],
        batch_size=conv["batch_size"],
    )
    return NetworkConfig(
        mp_steps=data["mp_steps"],
        features_per_layer=data["features_per_layer"],
        input_features=tuple(data["input_features"]),
        output_width=data["output_width"],
        conv=conv_config,
        seed=data["seed"],
        use_self=data["use_self"],
        use_bias=data["use_bias"],
    )


def save_checkpoint(path, layers, net_config: NetworkConfig):
    """Binary checkpoint: JSON header line, then contiguous little-endian
    float64 tensors in header order."""
    tensors = []
    blobs = []
    for k, (params, _, _) in enumerate(layers):
        named = [(f"layer{k}.weights", params.weights), (f"layer{k}.self", params.self_weights)]
        if params.bias is not None:
            named.append((f"layer{k}.bias", params.bias))
        for name, arr in named:
            tensors.append({"name": name, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = {
        "version": 1,
        "config_hash": config_hash(net_config),
        "network": network_config_to_dict(net_config),
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns (layers, net_config); raises DatasetError on malformed files."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DatasetError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline().decode())
        net_config = network_config_from_dict(header["network"])
        arrays = {}
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise DatasetError(f"{path}: truncated checkpoint payload")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
    layers = []
    k = 0
    while f"layer{k}.weights" in arrays:
        params = ConvLayerParams(
            weights=arrays[f"layer{k}.weights"],
            self_weights=arrays[f"layer{k}.self"],
            bias=arrays.get(f"layer{k}.bias"),
        )
        activate = f"layer{k + 1}.weights" in arrays
        layers.append((params, net_config.conv, activate))
        k += 1
    if header["config_hash"] != config_hash(net_config):
        raise DatasetError(f"{path}: config hash mismatch")
    return layers, net_config
