import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nasnet_search import genome as G
from nasnet_search import tensor as T
from nasnet_search.cellgraph import MacroSpec, assemble_network
from nasnet_search.childtrainer import (
    ChildNetwork,
    EvalResult,
    SyntheticDataset,
    TrainConfig,
    apply_scheduled_droppath,
    clean_fitness,
    cosine_lr,
    droppath_prob,
    expected_keep,
    features,
    generate_dataset,
    surrogate_eval,
    train_child,
)
from nasnet_search.childtrainer.data import render
from nasnet_search.tensor.gradcheck import check_gradients

OP = G.Operation
TINY = SyntheticDataset(image_size=8, n_train=160, n_val=80, seed=3)
TINY_MACRO = MacroSpec(cell_repeats=1, penultimate_filters=8)


def _all_identity(b=2):
    return G.decode([0] * (10 * b), b)


# --- schedules ---


def test_cosine_lr_endpoints():
    assert cosine_lr(0, 100, 0.1, 0.001) == 0.1
    assert cosine_lr(100, 100, 0.1, 0.001) == pytest.approx(0.001, abs=1e-15)
    assert cosine_lr(50, 100, 0.1, 0.001) == pytest.approx(0.0505, abs=1e-15)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 0.1)


def test_droppath_prob_examples():
    assert droppath_prob(0.0, 0.3) == 0.0
    assert droppath_prob(1.0, 0.3) == 0.3
    assert droppath_prob(0.5, 0.4) == 0.2
    with pytest.raises(ValueError):
        droppath_prob(1.2, 0.3)
    with pytest.raises(ValueError):
        droppath_prob(0.5, 1.0)


@given(st.floats(0, 1), st.floats(0, 0.999))
def test_droppath_prob_is_linear(t, p):
    assert abs(droppath_prob(t, p) - t * droppath_prob(1.0, p)) <= 1e-12


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert cfg.epochs == 20 and cfg.momentum == 0.9 and cfg.droppath == 0.3
    for bad in ({"epochs": 0}, {"momentum": 1.0}, {"droppath": 1.0}, {"learning_rate": 0.0}, {"weight_decay": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# --- droppath ---


def _paths(n=2, batch=4):
    return [T.Tensor(np.ones((batch, 2, 2, 3))) for _ in range(n)]


def test_droppath_zero_is_identity():
    paths = _paths()
    (out,) = apply_scheduled_droppath([paths], 0.0, np.random.default_rng(0))
    assert all(a is b for a, b in zip(out, paths))


def test_survivor_rule_monte_carlo():
    rng = np.random.default_rng(0)
    paths = _paths(batch=100_000)
    with T.precision("float64"):
        (out,) = apply_scheduled_droppath([paths], 0.9, rng)
    alive = np.stack([p.data[:, 0, 0, 0] for p in out], axis=1)
    assert alive.sum(axis=1).min() == 1
    # keep rate per path matches (1 - p) + p^2 / 2
    assert abs(alive.mean() - expected_keep(0.9, 2)) < 0.005


def test_droppath_eval_deterministic_scaling():
    paths = _paths()
    p = droppath_prob(1.0, 0.4)
    a = apply_scheduled_droppath([paths], p, None, "eval")
    b = apply_scheduled_droppath([paths], p, None, "eval")
    assert np.array_equal(a[0][0].data, b[0][0].data)
    assert np.allclose(a[0][1].data, expected_keep(0.4, 2))


def test_droppath_train_mode_has_gradient_through_mask():
    x = T.parameter(np.ones((6, 1, 1, 2)))
    y = T.parameter(np.ones((6, 1, 1, 2)))
    with T.Tape() as tape:
        (out,) = apply_scheduled_droppath([[x, y]], 0.5, np.random.default_rng(1))
        loss = T.sum(T.add(*out))
    grads = tape.backward(loss)
    assert np.array_equal(grads[x], out[0].data)


# --- dataset ---


def test_dataset_deterministic_and_disjoint():
    a = generate_dataset(TINY)
    b = generate_dataset(TINY)
    assert a.train_x.tobytes() == b.train_x.tobytes() and a.val_y.tobytes() == b.val_y.tobytes()
    assert not set(a.train_index) & set(a.val_index)
    assert a.train_x.shape == (160, 8, 8, 3)
    assert not a.train_x.flags.writeable


def test_dataset_class_balanced():
    ds = generate_dataset(SyntheticDataset(n_train=200, n_val=100))
    counts = np.bincount(np.concatenate([ds.train_y, ds.val_y]), minlength=10)
    assert np.all(counts == 30)


def test_nearest_centroid_on_clean_generators():
    spec = SyntheticDataset()
    ds = generate_dataset(spec)
    # class centroids from noise-free renders at the nominal phase and contrast
    labels = np.arange(spec.num_classes)
    grid = np.linspace(-spec.phase_jitter, spec.phase_jitter, 33)
    centroids = np.stack(
        [render(spec, np.full(grid.size, k), grid, np.ones(grid.size)).mean(axis=0) for k in labels]
    )
    d = ((ds.val_x[:, None].astype(np.float64) - centroids[None]) ** 2).sum(axis=(2, 3, 4))
    acc = (d.argmin(axis=1) == ds.val_y).mean()
    assert acc > 0.9, acc


# --- network / training ---


def test_child_forward_shapes_and_param_init():
    arch = G.sample_uniform(2, 0)
    net = assemble_network(arch, TINY_MACRO, (8, 8, 3))
    model = ChildNetwork(net, np.random.default_rng(0))
    assert sum(p.size for p in model.params.values()) == net.total_params
    logits = model.forward(np.zeros((3, 8, 8, 3)), training=True)
    assert logits.shape == (3, 10)


def test_child_gradients_match_finite_differences():
    arch = G.sample_uniform(2, 4)
    net = assemble_network(arch, MacroSpec(cell_repeats=1, penultimate_filters=4), (4, 4, 2))
    rng = np.random.default_rng(0)
    with T.precision("float64"):
        model = ChildNetwork(net, rng)
        x = rng.standard_normal((3, 4, 4, 2))
        y = np.array([1, 4, 7])
        names = sorted(model.params)[:6] + ["head/linear/w"]

        def loss_fn():
            return T.cross_entropy_loss(model.forward(x, training=False), y)

        # eval-mode BN with fixed statistics keeps the function deterministic
        errors = check_gradients(loss_fn, [model.params[n] for n in names])
    assert max(errors.values()) < 1e-5, errors


def test_train_child_deterministic_and_in_range():
    ds = generate_dataset(TINY)
    cfg = TrainConfig(epochs=2, batch_size=16, seed=5)
    arch = G.sample_uniform(2, 1)
    a = train_child(arch, TINY_MACRO, ds, cfg)
    b = train_child(arch, TINY_MACRO, ds, cfg)
    assert a.reward == b.reward and 0.0 <= a.reward <= 1.0
    assert [c["train_loss"] for c in a.curve] == [c["train_loss"] for c in b.curve]
    assert len(a.curve) == 2 and a.genome_id == arch.genome_hash()
    assert a.params == assemble_network(arch, TINY_MACRO, (8, 8, 3)).total_params


def test_all_identity_genome_learns_linearly_separable_task():
    ds = generate_dataset(SyntheticDataset(n_train=500, n_val=200, seed=1))
    macro = MacroSpec(cell_repeats=1, penultimate_filters=16)
    res = train_child(_all_identity(), macro, ds, TrainConfig(epochs=5, batch_size=20))
    assert res.reward > 0.5, res.reward


def test_divergence_maps_to_zero_reward():
    ds = generate_dataset(TINY)
    res = train_child(G.sample_uniform(2, 0), TINY_MACRO, ds, TrainConfig(epochs=2, learning_rate=1e30))
    assert res.diverged and res.reward == 0.0


def test_droppath_schedule_logged_in_curve():
    ds = generate_dataset(TINY)
    res = train_child(_all_identity(), TINY_MACRO, ds, TrainConfig(epochs=2, batch_size=40, droppath=0.3))
    assert res.curve[-1]["droppath"] == pytest.approx(0.3)
    assert res.curve[0]["droppath"] == pytest.approx(0.15)


def test_loss_non_increasing_for_most_random_genomes():
    ds = generate_dataset(SyntheticDataset(image_size=8, n_train=160, n_val=20, noise=0.0, seed=2))
    cfg = TrainConfig(epochs=3, batch_size=32, droppath=0.0)
    macro = MacroSpec(cell_repeats=1, penultimate_filters=4)
    rng = np.random.default_rng(0)
    violations = []
    for i in range(100):
        res = train_child(G.sample_uniform(2, rng), macro, ds, cfg)
        losses = [c["train_loss"] for c in res.curve]
        if any(b > a for a, b in zip(losses, losses[1:])):
            violations.append((i, losses))
    assert len(violations) <= 5, violations


def test_eval_result_rejects_out_of_range_reward():
    with pytest.raises(ValueError):
        EvalResult("x", 1.5)


# --- surrogate ---


def test_surrogate_deterministic():
    arch = G.sample_uniform(5, 3)
    assert surrogate_eval(arch, 11).reward == surrogate_eval(arch, 11).reward
    assert surrogate_eval(arch, 11).reward != surrogate_eval(arch, 12).reward


def test_surrogate_monotone_in_separable_fraction():
    base = G.to_dict(G.sample_uniform(5, 8))
    for cell in ("normal", "reduction"):
        for blk in base[cell]:
            blk["op_a"] = blk["op_b"] = "max_pool_3x3"
    better = G.to_dict(G.from_dict(base))
    better["normal"][2]["op_a"] = "sep_conv_5x5"
    a, b = G.from_dict(better), G.from_dict(base)
    fa, fb = features(G.encode(a), 5)[0], features(G.encode(b), 5)[0]
    assert fa[0] > fb[0] and np.array_equal(fa[1:], fb[1:])
    assert clean_fitness(G.encode(a), 5)[0] > clean_fitness(G.encode(b), 5)[0]


def test_surrogate_features_match_genome_methods():
    rng = np.random.default_rng(4)
    for _ in range(200):
        arch = G.sample_uniform(5, rng)
        phi = features(G.encode(arch), 5)[0]
        sep = np.mean([op.is_separable for c in arch.cells() for blk in c.blocks for op in (blk.op_a, blk.op_b)])
        consumed = np.mean([len(c.consumed_states()) / 7 for c in arch.cells()])
        depth = np.mean([c.depth() / 5 for c in arch.cells()])
        assert phi[0] == pytest.approx(sep)
        assert phi[1] == pytest.approx(consumed)
        assert phi[2] == pytest.approx(depth)


def test_surrogate_range_over_many_random_genomes():
    doms = np.array(G.architecture_domains(5))
    rng = np.random.default_rng(0)
    d = (rng.random((200_000, 50)) * doms).astype(np.int64)
    noisy = clean_fitness(d, 5) + rng.normal(0, 0.01, len(d))
    assert 0.0 < noisy.min() and noisy.max() < 1.0
    assert math.isfinite(noisy.mean())
