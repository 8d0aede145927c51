import numpy as np
import pytest

from spritelab import env, tasks
from spritelab.autograd import as_tensor
from spritelab.env import SpriteState
from spritelab.transition import DEFAULT_MATCHING_SCALE, TransitionModel, calibrate_matching_scale
from spritelab.vision import NUM_SLOTS, decode_soft, encode_oracle


def scene(rng, n=3):
    return tasks.generate_episode(tasks.get_task("exploration"), rng)[:n]


def test_zero_output_layer_is_identity():
    t = TransitionModel(np.random.default_rng(0))
    z = encode_oracle(scene(np.random.default_rng(1)))
    pred = t.predict(z, [0.3, 0.3, 0.9, 0.1])
    assert np.array_equal(pred.z_next_pred, z.astype(np.float32))
    assert pred.e_pred == 0.0
    assert all(np.array_equal(s, z.astype(np.float32)) for s in t.rollout(z, [[0.5] * 4] * 4))


def test_network_shape():
    t = TransitionModel(np.random.default_rng(0))
    assert t.net.sizes == (12, 512, 512, 512, 9)


def randomized(seed=0, **kw):
    rng = np.random.default_rng(seed)
    t = TransitionModel(rng, dtype=np.float64, **kw)
    t.net.weights[-1].data = rng.normal(scale=0.05, size=t.net.weights[-1].shape)
    return t


def test_slot_permutation_equivariance():
    t = randomized()
    rng = np.random.default_rng(2)
    z = encode_oracle(scene(rng, 5))
    a = rng.uniform(size=4)
    perm = rng.permutation(NUM_SLOTS)
    p, q = t.predict(z, a), t.predict(z[perm], a)
    assert np.allclose(q.z_next_pred, p.z_next_pred[perm], atol=1e-12)
    assert q.e_pred == pytest.approx(p.e_pred, abs=1e-12)


def test_error_is_sum_of_slot_contributions():
    t = randomized()
    z = encode_oracle(scene(np.random.default_rng(3)))
    a = np.array([0.2, 0.4, 0.6, 0.8])
    x = np.concatenate([z, np.tile(a, (NUM_SLOTS, 1))], axis=1)
    out = t.net.forward_numpy(x)
    pred = t.predict(z, a)
    assert pred.e_pred == pytest.approx(out[:, 8].sum())
    assert np.allclose(pred.z_next_pred, z + out[:, :8])


def test_graph_and_numpy_paths_agree():
    t = randomized()
    rng = np.random.default_rng(4)
    z = np.stack([encode_oracle(scene(rng)) for _ in range(3)])
    a = rng.uniform(size=(3, 4))
    zn, e, _ = t.forward(z, a)
    zn2, e2 = t.predict_batch(z, a)
    assert np.allclose(zn.data, zn2) and np.allclose(e.data, e2)


def test_rollout_length():
    t = randomized()
    z = encode_oracle(scene(np.random.default_rng(5)))
    assert len(t.rollout(z, [[0.5, 0.5, 0.7, 0.5]] * 7)) == 7


# -- losses ---------------------------------------------------------------------------

def test_matching_loss_zero_for_permutation():
    t = TransitionModel(np.random.default_rng(0), dtype=np.float64)
    rng = np.random.default_rng(6)
    z = encode_oracle(scene(rng, 4))
    perm = rng.permutation(NUM_SLOTS)
    assert t.matching_loss(as_tensor(z[None]), z[perm][None]).data[0] == 0.0


def test_matching_loss_closed_form_offset():
    t = TransitionModel(np.random.default_rng(0), dtype=np.float64)
    z = encode_oracle([SpriteState(0.2, 0.3, "circle", 0.4, 0.5, 1.0, 0),
                       SpriteState(0.8, 0.7, "square", 0.9, 0.6, 1.0, 1)])
    pred = z.copy()
    pred[1, 1] += 0.1
    # mean over 8 slots x 8 dims, times the declared scale
    expected = 0.1 ** 2 / 64 * DEFAULT_MATCHING_SCALE
    assert t.matching_loss(as_tensor(pred[None]), z[None]).data[0] == pytest.approx(expected)


def test_matching_loss_invariant_to_target_permutation():
    t = TransitionModel(np.random.default_rng(0), dtype=np.float64)
    rng = np.random.default_rng(7)
    z = encode_oracle(scene(rng, 4))
    pred = z + rng.normal(scale=0.01, size=z.shape)
    a = t.matching_loss(as_tensor(pred[None]), z[None]).data[0]
    b = t.matching_loss(as_tensor(pred[None]), z[rng.permutation(NUM_SLOTS)][None]).data[0]
    assert a == pytest.approx(b, abs=1e-12)


def test_pixel_loss_floor_and_displacement():
    t = TransitionModel(np.random.default_rng(0), mode="pixel", dtype=np.float64)
    s = SpriteState(0.4, 0.5, "square", 0.1, 0.9, 1.0, 0)
    moved = env.step([s], [0.4, 0.5, 1.0, 0.5])
    z = encode_oracle([s])
    img_moved = env.render(moved)
    floor = t.pixel_loss(as_tensor(encode_oracle(moved)[None]), img_moved[None]).data[0]
    soft_floor = np.sum((decode_soft(encode_oracle(moved)).data - img_moved) ** 2)
    assert floor == pytest.approx(soft_floor)
    identity = t.pixel_loss(as_tensor(z[None]), img_moved[None]).data[0]
    # ||soft(old) - hard(new)|| >= ||soft(old) - soft(new)|| - ||soft(new) - hard(new)||
    displaced = np.sum((decode_soft(z).data - decode_soft(encode_oracle(moved)).data) ** 2)
    assert np.sqrt(identity) >= np.sqrt(displaced) - np.sqrt(floor) - 1e-9
    # and the move costs more than one whole footprint on top of the floor
    assert identity - floor >= np.sum(env.render([s]) ** 2)
    assert floor >= 0.0


def test_mode_validated():
    with pytest.raises(ValueError):
        TransitionModel(mode="latent")


def test_non_finite_loss_raises():
    t = TransitionModel(np.random.default_rng(0))
    z = encode_oracle(scene(np.random.default_rng(8)))[None]
    bad = z.copy()
    bad[0, 0, 1] = np.nan
    with pytest.raises(FloatingPointError):
        t.train_step(z, np.full((1, 4), 0.5), z_next=bad)


def test_overfit_one_transition():
    t = TransitionModel(np.random.default_rng(10))
    s = SpriteState(0.4, 0.6, "circle", 0.2, 0.8, 1.0, 0)
    a = np.array([0.4, 0.6, 1.0, 0.5])
    z = encode_oracle([s])[None]
    z_next = encode_oracle(env.step([s], a))[None]
    history, stats = [], None
    for _ in range(400):
        stats = t.train_step(z, a[None], z_next=z_next)
        history.append(stats["loss_t"])
    smooth = np.convolve(history, np.ones(50) / 50, mode="valid")
    assert smooth[-1] < 0.05 * smooth[0]
    assert np.all(np.diff(smooth[::50]) < 1e-6)  # falls until it sits on the float32 floor
    assert stats["e_pred"] == pytest.approx(stats["loss_t"], rel=0.1, abs=0.02)
    pred = t.predict(z[0], a).z_next_pred
    assert abs(pred[np.argmax(pred[:, 0]), 1] - 0.525) < 0.01


def test_calibration_ratio_is_stable():
    ratio = calibrate_matching_scale(n=60, seed=1)
    assert 3e5 < ratio < 2e6
