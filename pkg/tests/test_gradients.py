"""Finite-difference checks for every trainable network, in float64."""

import numpy as np

from gradcheck import check
from spritelab import agent, explorer, tasks, transition, vision
from spritelab.autograd import Tensor


def transitions(rng, n):
    from spritelab import env
    task = tasks.get_task("exploration")
    z, a, z_next = [], [], []
    for _ in range(n):
        sprites = tasks.generate_episode(task, rng)
        s = sprites[0]
        action = np.array([s.x, s.y, *rng.uniform(size=2)])
        z.append(vision.encode_oracle(sprites, True, rng))
        z_next.append(vision.encode_oracle(env.step(sprites, action, True, rng), True, rng))
        a.append(action)
    return np.stack(z), np.stack(a), np.stack(z_next)


def scenes(rng, n):
    task = tasks.get_task("exploration")
    return np.stack([vision.encode_oracle(tasks.generate_episode(task, rng), True, rng) for _ in range(n)])


def randomize_output(net, rng):
    # the transition net starts with a zero output layer, which hides every
    # other layer's gradient
    net.weights[-1].data = rng.normal(scale=0.05, size=net.weights[-1].shape)


def frozen_error_target(t, weights=None, **batch):
    """The transition loss with the error head's target fixed at its current value."""
    l_t_now = t.losses(**batch)["l_t"].data.copy()

    def loss():
        p = t.losses(**batch)
        per_sample = p["l_t"] + (p["e_pred"] - l_t_now).square() + p["l1"]
        return per_sample.mean() if weights is None else (per_sample * weights).mean()
    return loss


def test_transition_net_matching_loss():
    rng = np.random.default_rng(0)
    t = transition.TransitionModel(rng, dtype=np.float64)
    randomize_output(t.net, rng)
    z, a, z_next = transitions(rng, 4)
    w = rng.uniform(0.2, 1.0, size=4)
    assert t.net.sizes == (12, 512, 512, 512, 9)
    worst, checked = check(frozen_error_target(t, w, z=z, a=a, z_next=z_next), t.net.params(), rng,
                           analytic_fn=lambda: t.losses(z, a, z_next=z_next, weights=w)["total"])
    assert checked >= 30
    assert worst < 1e-4


def test_transition_net_pixel_loss():
    rng = np.random.default_rng(1)
    t = transition.TransitionModel(rng, mode="pixel", dtype=np.float64)
    randomize_output(t.net, rng)
    z = scenes(rng, 2)
    x_next = rng.uniform(size=(2, 64, 64, 3))
    a = rng.uniform(size=(2, 4))
    worst, checked = check(frozen_error_target(t, z=z, a=a, x_next=x_next), t.net.params(), rng,
                           coords_per_param=4, analytic_fn=lambda: t.losses(z, a, x_next=x_next)["total"])
    assert checked >= 20
    assert worst < 1e-3


def test_decoder_gradient_wrt_slots():
    rng = np.random.default_rng(2)
    z = Tensor(scenes(rng, 2) + rng.normal(scale=0.01, size=(2, 8, 8)) * (scenes(rng, 2) != 0),
               requires_grad=True)
    target = rng.uniform(size=(2, 64, 64, 3))
    worst, checked = check(lambda: (vision.decode_soft(z) - target).square().sum(), [z], rng, coords_per_param=40)
    assert checked >= 20
    assert worst < 1e-3


def test_deformation_net_through_explorer_loss():
    rng = np.random.default_rng(3)
    t = transition.TransitionModel(rng, dtype=np.float64)
    randomize_output(t.net, rng)
    d = explorer.DeformationNet(rng, dtype=np.float64)
    assert d.net.sizes == (68, 64, 64, 8)
    # push the scales around the floor so both penalty branches are present
    d.net.biases[-1].data[4:] = np.array([-4.0, -3.5, 0.0, 0.5])
    z = scenes(rng, 4)
    u = rng.uniform(0.2, 0.8, size=(4, 4))
    before = t.net.fingerprint()
    worst, checked = check(lambda: explorer.explorer_loss(d, t, z, u, np.random.default_rng(7)), d.net.params(), rng,
                           coords_per_param=8)
    assert checked >= 30
    assert worst < 1e-4
    assert t.net.fingerprint() == before
    assert all(p.grad is None for p in t.net.params())


def off_kinks(scorer, rng):
    # empty-slot pairs are all-zero inputs; with zero biases every unit would
    # sit exactly on the ReLU kink
    for net in scorer.nets:
        for b in net.biases:
            b.data = rng.normal(scale=0.1, size=b.shape)


def test_relation_nets_reward_loss():
    rng = np.random.default_rng(4)
    scorer = agent.RewardPredictor(rng, dtype=np.float64)
    off_kinks(scorer, rng)
    assert scorer.pair_net.sizes == (16, 128, 128) and scorer.global_net.sizes == (128, 128, 1)
    z = scenes(rng, 5)
    r = rng.uniform(size=5)
    worst, checked = check(lambda: (scorer(z) - r).square().mean(), scorer.params(), rng, coords_per_param=8)
    assert checked >= 25
    assert worst < 1e-4


def test_relation_nets_value_losses():
    rng = np.random.default_rng(5)
    t = transition.TransitionModel(rng, dtype=np.float64)
    randomize_output(t.net, rng)
    vp = agent.ValuePredictor(rng, dtype=np.float64)
    off_kinks(vp, rng)
    sample = {"z": scenes(rng, 4), "a": rng.uniform(size=(4, 4)), "z_next": scenes(rng, 4),
              "r": rng.uniform(size=4), "gamma": np.array([0.9, 0.9, 0.0, 0.9])}

    def total():
        a, b, c = agent.value_losses(vp, t, sample)
        return a + b + c

    # same losses with the bootstrap targets frozen at the current parameters
    z_pred, _ = t.predict_batch(sample["z"], sample["a"])
    target_obs = sample["r"] + sample["gamma"] * vp.predict(sample["z_next"])
    target_pred = sample["r"] + sample["gamma"] * vp.predict(z_pred)

    def fixed_targets():
        v = vp(sample["z"])
        return ((target_obs - v).square().mean() + (target_pred - v).square().mean()
                + (vp(sample["z_next"]) - vp(z_pred)).square().mean())

    worst, checked = check(fixed_targets, vp.params(), rng, coords_per_param=8, analytic_fn=total)
    assert checked >= 25
    assert worst < 1e-4
