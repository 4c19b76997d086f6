import numpy as np
import pytest

from sfbc.bases import BasisSpec
from sfbc.conv import ConvConfig, ParticleGraph
from sfbc.errors import ConfigurationError, TrainingDiverged
from sfbc.network import (
    AdamState,
    LRSchedule,
    NetworkConfig,
    RolloutSchedule,
    TrainConfig,
    adam_step,
    advect,
    config_hash,
    evaluate,
    finite_velocity,
    init_network,
    l2_loss,
    load_checkpoint,
    network_config_from_dict,
    network_config_to_dict,
    sample_loss_and_grads,
    save_checkpoint,
    trainable_arrays,
    train_nnti,
)

CONV = ConvConfig(BasisSpec("fourier", 3))


def net_config(seed=0, **kw):
    defaults = dict(
        mp_steps=2,
        features_per_layer=4,
        input_features=("a", "b"),
        output_width=1,
        conv=CONV,
        seed=seed,
    )
    defaults.update(kw)
    return NetworkConfig(**defaults)


def random_graph(rng, n=6, e=14, d=1):
    receivers = np.sort(rng.integers(0, n, size=e)).astype(np.int64)
    senders = np.array(
        [rng.choice([x for x in range(n) if x != r]) for r in receivers], dtype=np.int64
    )
    disp = rng.uniform(-0.9, 0.9, size=(e, d))
    return ParticleGraph(n, receivers, senders, disp, np.linalg.norm(disp, axis=1))


def make_samples(rng, count=6, nodes=6):
    samples = []
    for _ in range(count):
        graph = random_graph(rng, n=nodes)
        features = rng.normal(size=(nodes, 2))
        target = rng.normal(size=(nodes, 1))
        samples.append((graph, features, target))
    return samples


class ListDataset:
    def __init__(self, samples):
        self._samples = samples

    def samples(self, task=None):
        return self._samples


def test_init_deterministic_and_seed_sensitive():
    a = init_network(net_config(seed=1))
    b = init_network(net_config(seed=1))
    c = init_network(net_config(seed=2))
    for (pa, _, _), (pb, _, _) in zip(a, b):
        np.testing.assert_array_equal(pa.weights, pb.weights)
        np.testing.assert_array_equal(pa.self_weights, pb.self_weights)
    assert any(
        not np.array_equal(pa.weights, pc.weights)
        for (pa, _, _), (pc, _, _) in zip(a, c)
    )


def test_init_biases_zero_and_scale():
    layers = init_network(net_config())
    for params, _, _ in layers:
        np.testing.assert_array_equal(params.bias, 0.0)
        s = 1.0 / np.sqrt(params.in_features * 3)
        assert np.abs(params.weights).max() <= s


def test_advect():
    assert advect(1.0, 0.0, 0.0, 0.1) == 1.0
    assert advect(0.0, 1.0, 0.0, 0.1) == pytest.approx(0.1)
    assert advect(0.0, 1.0, -10.0, 0.1) == pytest.approx(0.0)


def test_finite_velocity():
    assert finite_velocity(1.0, 1.0, 0.1) == 0.0
    assert finite_velocity(0.3, 0.1, 0.1) == pytest.approx(2.0)
    assert finite_velocity(0.1, 0.3, 0.1) == pytest.approx(-2.0)


def test_l2_loss():
    x = np.ones((4, 2))
    assert l2_loss(x, x) == 0.0
    assert l2_loss(x + 1.0, x) == pytest.approx(1.0)
    assert l2_loss(x + 2.0, x) == pytest.approx(4.0)
    with pytest.raises(ConfigurationError):
        l2_loss(np.ones(3), np.ones(4))


def test_adam_zero_gradient_keeps_params():
    params = [np.array([1.0, -2.0])]
    state = AdamState.for_params(params)
    adam_step(params, [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(params[0], [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_is_signed_lr():
    params = [np.array([0.0, 0.0])]
    state = AdamState.for_params(params)
    adam_step(params, [np.array([3.0, -0.2])], state, lr=0.1)
    np.testing.assert_allclose(params[0], [-0.1, 0.1], rtol=1e-6)


def test_adam_against_scalar_reference():
    # independent scalar re-implementation on f(theta) = theta^2
    theta = 1.0
    m = v = 0.0
    beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 0.1
    ref = []
    for t in range(1, 11):
        g = 2.0 * theta
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        theta -= lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
        ref.append(theta)

    params = [np.array([1.0])]
    state = AdamState.for_params(params)
    mags = [1.0]
    for t in range(10):
        adam_step(params, [2.0 * params[0]], state, lr=lr)
        assert abs(params[0][0]) < mags[-1]
        mags.append(abs(params[0][0]))
        assert params[0][0] == pytest.approx(ref[t], rel=1e-12)


def test_lr_schedules():
    halve = LRSchedule(1e-3, kind="halve-epochs", halve_every=1)
    assert halve.rate(0, 100, 500) == 1e-3
    assert halve.rate(100, 100, 500) == 5e-4
    assert halve.rate(499, 100, 500) == 1e-3 / 16
    geo = LRSchedule(1e-2, kind="geometric", final=1e-4, reduce_every=25)
    assert geo.rate(0, 1000, 4000) == 1e-2
    assert geo.rate(3999, 1000, 4000) == pytest.approx(1e-4, rel=1e-9)


def test_rollout_schedule():
    sched = RolloutSchedule(initial=1, increment_every=2, maximum=4)
    assert [sched.length(e) for e in range(10)] == [1, 1, 2, 2, 3, 3, 4, 4, 4, 4]


def test_training_deterministic():
    rng = np.random.default_rng(0)
    dataset = ListDataset(make_samples(rng))
    cfg = TrainConfig(epochs=2, updates_per_epoch=5, batch_size=2, lr=LRSchedule(1e-3), seed=3)
    _, hist_a = train_nnti(dataset, net_config(seed=1), cfg)
    _, hist_b = train_nnti(dataset, net_config(seed=1), cfg)
    assert hist_a == hist_b
    assert len(hist_a) == 10


def test_zero_epochs_returns_initial_params():
    rng = np.random.default_rng(1)
    dataset = ListDataset(make_samples(rng))
    cfg = TrainConfig(epochs=0, updates_per_epoch=5, batch_size=2, lr=LRSchedule(1e-3))
    layers, history = train_nnti(dataset, net_config(seed=4), cfg)
    ref = init_network(net_config(seed=4))
    assert history == []
    for (p, _, _), (q, _, _) in zip(layers, ref):
        np.testing.assert_array_equal(p.weights, q.weights)


def test_training_reduces_loss_on_learnable_task():
    # target produced by a fixed linear filter of the features
    rng = np.random.default_rng(2)
    samples = []
    for _ in range(8):
        graph = random_graph(rng, n=8, e=20)
        features = rng.normal(size=(8, 2))
        target = 0.3 * features[:, :1] - 0.2 * features[:, 1:]
        samples.append((graph, features, target))
    cfg = TrainConfig(epochs=4, updates_per_epoch=25, batch_size=4, lr=LRSchedule(1e-2), seed=0)
    layers, history = train_nnti(ListDataset(samples), net_config(seed=0), cfg)
    assert history[-1][2] < 0.2 * history[0][2]


def test_training_divergence_aborts():
    rng = np.random.default_rng(3)
    samples = [(random_graph(rng), np.full((6, 2), 1e300), np.zeros((6, 1)))]
    cfg = TrainConfig(epochs=1, updates_per_epoch=3, batch_size=1, lr=LRSchedule(1e-3))
    with pytest.raises(TrainingDiverged):
        train_nnti(ListDataset(samples), net_config(), cfg)


def test_end_to_end_gradcheck_two_layer():
    rng = np.random.default_rng(4)
    config = net_config(seed=5)
    layers = init_network(config)
    graph = random_graph(rng, n=6, e=14)
    features = rng.normal(size=(6, 2))
    target = rng.normal(size=(6, 1))
    loss, grads = sample_loss_and_grads(layers, config, (graph, features, target))

    arrays = trainable_arrays(layers, config)
    flat_grads = []
    for g in grads:
        flat_grads.extend([g.weights, g.self_weights, g.bias])
    eps = 1e-6
    for arr, want in zip(arrays, flat_grads):
        flat = arr.ravel()
        for k in range(0, flat.size, max(1, flat.size // 5)):
            orig = flat[k]
            flat[k] = orig + eps
            up, _ = sample_loss_and_grads(layers, config, (graph, features, target))
            flat[k] = orig - eps
            down, _ = sample_loss_and_grads(layers, config, (graph, features, target))
            flat[k] = orig
            fd = (up - down) / (2 * eps)
            assert want.ravel()[k] == pytest.approx(fd, rel=1e-5, abs=1e-9)


class SyntheticChain:
    """Two-step chain where the prediction feeds feature channel 0."""

    max_length = 2

    def __init__(self, graph, base_features, targets):
        self.graph = graph
        self.base = base_features
        self.targets = targets

    def step(self, k, prev_prediction):
        features = self.base.copy()
        if prev_prediction is not None:
            features[:, :1] = prev_prediction
        return self.graph, features, self.targets[k]


def test_rollout_training_runs_and_gradients_flow():
    rng = np.random.default_rng(5)
    graph = random_graph(rng, n=6, e=16)
    base = rng.normal(size=(6, 2))
    targets = [rng.normal(size=(6, 1)) for _ in range(2)]
    chain = SyntheticChain(graph, base, targets)
    cfg = TrainConfig(
        epochs=1,
        updates_per_epoch=4,
        batch_size=1,
        lr=LRSchedule(1e-3),
        rollout=RolloutSchedule(initial=2, maximum=2),
        seed=0,
    )
    _, hist_full = train_nnti(ListDataset([chain]), net_config(seed=6), cfg)
    cfg_stop = TrainConfig(
        epochs=1,
        updates_per_epoch=4,
        batch_size=1,
        lr=LRSchedule(1e-3),
        rollout=RolloutSchedule(initial=2, maximum=2),
        seed=0,
        stop_rollout_gradient=True,
    )
    _, hist_stop = train_nnti(ListDataset([chain]), net_config(seed=6), cfg_stop)
    assert hist_full[0] == hist_stop[0]  # same initial loss
    assert hist_full[-1] != hist_stop[-1]  # gradient path differs


def test_checkpoint_roundtrip(tmp_path):
    config = net_config(seed=7)
    layers = init_network(config)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, layers, config)
    loaded, loaded_config = load_checkpoint(path)
    assert config_hash(loaded_config) == config_hash(config)
    for (p, _, act), (q, _, act2) in zip(loaded, layers):
        np.testing.assert_array_equal(p.weights, q.weights)
        np.testing.assert_array_equal(p.self_weights, q.self_weights)
        np.testing.assert_array_equal(p.bias, q.bias)
        assert act == act2


def test_checkpoint_truncation_detected(tmp_path):
    from sfbc.errors import DatasetError

    config = net_config(seed=8)
    layers = init_network(config)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, layers, config)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(DatasetError):
        load_checkpoint(path)


def test_config_dict_roundtrip():
    config = net_config(seed=9)
    again = network_config_from_dict(network_config_to_dict(config))
    assert config_hash(again) == config_hash(config)


def test_evaluate_zero_network_is_zero_predictor():
    rng = np.random.default_rng(6)
    samples = make_samples(rng, count=3)
    config = net_config(seed=0, use_bias=False)
    layers = init_network(config)
    for params, _, _ in layers:
        params.weights[:] = 0.0
        params.self_weights[:] = 0.0
    loss = evaluate(layers, samples)
    ref = np.mean([np.mean(t**2) for _, _, t in samples])
    assert loss == pytest.approx(ref)
