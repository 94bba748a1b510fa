import numpy as np
import pytest

from gcav.autodiff import Tensor, grad_check
from gcav.probe import (TargetModel, TargetTrainingError, accuracy, activations, concept_probe_set,
                        dump_dataset_csv, generate_world, logit_gradient, make_probe_sets,
                        random_probe_sets, train_target)


@pytest.fixture(scope="module")
def world():
    return generate_world(0)


@pytest.fixture(scope="module")
def model(world):
    m = TargetModel(world.d_in, len(world.class_ids), seed=0, residual=True, branch_gain=3.0)
    return train_target(m, world.dataset, epochs=60)


def test_world_is_deterministic():
    a, b = generate_world(7), generate_world(7)
    for k in a.class_ids:
        assert np.array_equal(a.dataset.inputs[k], b.dataset.inputs[k])


def test_directions_orthonormal(world):
    d = np.stack([c.direction for c in world.concepts]).astype(np.float64)
    np.testing.assert_allclose(d @ d.T, np.eye(len(d)), atol=1e-6)


def test_class_projections(world):
    for k in world.class_ids:
        x = world.dataset.inputs[k]
        for c in world.concepts:
            proj = float((x @ c.direction).mean())
            if c.relevance[k]:
                assert proj >= 1.0
            else:
                assert abs(proj) <= 0.2


def test_every_class_has_relevant_and_irrelevant(world):
    for k in world.class_ids:
        assert world.relevant(k) and world.irrelevant(k)


def test_too_many_concepts():
    with pytest.raises(ValueError):
        generate_world(0, d_in=3, n_concepts=4)


def test_probe_sets(world):
    cset, rsets = make_probe_sets(world, "concept1")
    assert cset.count == 50 and len(rsets) == 10
    assert all(r.count == 50 for r in rsets)
    assert float((cset.examples @ world.concept("concept1").direction).mean()) >= 1.0
    bound = 3 * world.random_noise / np.sqrt(50)
    for r in rsets:
        for c in world.concepts:
            assert abs(float((r.examples @ c.direction).mean())) <= bound


def test_unknown_concept(world):
    with pytest.raises(KeyError):
        make_probe_sets(world, "concept99")


def test_random_sets_distinct(world):
    a, b = random_probe_sets(world, 2)
    assert not np.array_equal(a.examples, b.examples)


def test_separable_two_class_world():
    w = generate_world(3, n_concepts=2, n_classes=2)
    m = train_target(TargetModel(w.d_in, 2, width=16, depth=2, instrumented=["L1"], seed=3),
                     w.dataset, epochs=40)
    assert accuracy(m, w.dataset) == 1.0


def test_zero_epochs_keeps_weights(world):
    m = TargetModel(world.d_in, 4, seed=1)
    before = {k: v.copy() for k, v in m.state_dict().items()}
    train_target(m, world.dataset, epochs=0)
    assert all(np.array_equal(before[k], v) for k, v in m.state_dict().items())


def test_training_is_deterministic(world):
    runs = []
    for _ in range(2):
        m = TargetModel(world.d_in, 4, width=16, depth=2, instrumented=["L1"], seed=2)
        runs.append(train_target(m, world.dataset, epochs=5, min_accuracy=0.0).state_dict())
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_accuracy_floor_raises(world):
    m = TargetModel(world.d_in, 4, width=4, depth=2, instrumented=["L1"], seed=0)
    with pytest.raises(TargetTrainingError):
        train_target(m, world.dataset, epochs=1, lr=1e-6)


def test_trained_model_accuracy(model, world):
    assert accuracy(model, world.dataset) >= 0.95


@pytest.mark.parametrize("layer", ["L1", "L2", "L3", "L4"])
def test_slicing_identity(model, world, layer):
    x = world.dataset.inputs["class2"][:20]
    assert np.array_equal(model.head_from(layer, model.forward_to(layer, x)).data, model(x).data)


def test_activation_shape_and_sign():
    m = TargetModel(8, 3, width=16, depth=3, seed=0)
    a = activations(m, "L1", np.random.default_rng(0).normal(size=(5, 8)))
    assert a.shape == (5, 16)
    assert (a.data >= 0).all()


def test_unknown_layer(model):
    with pytest.raises(KeyError):
        activations(model, "L9", np.zeros((1, 32)))
    with pytest.raises(KeyError):
        logit_gradient(model, "L1", 7, np.zeros(64))


def test_linear_head_gradient_is_weight_row():
    m = TargetModel(8, 3, width=16, depth=2, instrumented=["L2"], seed=0)
    g = logit_gradient(m, "L2", 1, np.ones(16, np.float32))
    np.testing.assert_array_equal(g, m.output.weight.data[:, 1])


@pytest.mark.parametrize("seed", range(10))
def test_logit_gradient_matches_fd(model, seed):
    a = np.abs(np.random.default_rng(seed).normal(size=(2, 64))) + 0.1
    k = seed % 4
    err = grad_check(lambda t: model.head_from("L2", t)[:, k].sum(), Tensor(a))
    assert err <= 1e-3
    fd_free = logit_gradient(model, "L2", k, a)
    assert fd_free.shape == (2, 64)


def test_gradient_independent_of_batch(model, world):
    x = activations(model, "L3", world.dataset.inputs["class0"][:6]).data
    batch = logit_gradient(model, "L3", 0, x)
    alone = logit_gradient(model, "L3", 0, x[2])
    np.testing.assert_allclose(batch[2], alone, rtol=1e-5, atol=1e-6)


def test_relevant_ablation_hurts_more(model, world):
    for i, k in enumerate(world.class_ids):
        x = world.dataset.inputs[k][:100]
        base = model(x).data[:, i].mean()
        drops = {}
        for c in world.concepts:
            d = c.direction
            ablated = x - np.outer(x @ d, d)
            drops[c.concept_id] = base - model(ablated).data[:, i].mean()
        rel = [drops[c] for c in world.relevant(k)]
        irr = [abs(drops[c]) for c in world.irrelevant(k)]
        assert min(rel) > 0
        assert min(rel) > max(irr)


def test_dataset_csv(tmp_path, world):
    path = tmp_path / "data.csv"
    dump_dataset_csv(world.dataset, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + 4 * 200
    assert lines[0].split(",")[-1] == "label"
