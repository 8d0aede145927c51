import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spritelab import env, tasks
from spritelab.env import SpriteState
from spritelab.vision import (NUM_SLOTS, decode_soft, encode_oracle, match_slots, occupied, pairwise_slot_mse,
                              slots_to_sprites)


def sorted_rows(z):
    return z[np.lexsort(z.T[::-1])]


def random_scene(rng, n=None):
    task = tasks.get_task("exploration")
    sprites = tasks.generate_episode(task, rng)
    return sprites if n is None else sprites[:n]


def test_empty_scene_encodes_to_zeros():
    assert not encode_oracle([]).any()


def test_single_square_slot():
    z = encode_oracle([SpriteState(0.5, 0.5, "square", 0.95, 0.8, 1.0, 0)])
    assert occupied(z).sum() == 1
    assert z[0] == pytest.approx([1, 0.5, 0.5, 0.95, 0.8, 1, 0, 0])


def test_too_many_sprites():
    with pytest.raises(ValueError):
        encode_oracle([SpriteState(0.1 * i, 0.5, "circle", 0.1, 0.5, 1.0, i) for i in range(8)])


def test_shuffle_needs_rng():
    with pytest.raises(ValueError):
        encode_oracle([], shuffle=True)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_shuffled_encodings_agree_up_to_permutation(seed):
    rng = np.random.default_rng(seed)
    sprites = random_scene(rng)
    a = encode_oracle(sprites, shuffle=True, rng=rng)
    b = encode_oracle(sprites, shuffle=True, rng=rng)
    assert np.array_equal(sorted_rows(a), sorted_rows(b))
    assert np.array_equal(sorted_rows(a), sorted_rows(encode_oracle(sprites)))


def test_shuffle_is_a_fresh_permutation():
    rng = np.random.default_rng(0)
    sprites = random_scene(rng, 1)
    positions = {int(np.flatnonzero(occupied(encode_oracle(sprites, True, rng)))[0]) for _ in range(200)}
    assert positions == set(range(NUM_SLOTS))


def test_slots_round_trip_to_sprites():
    rng = np.random.default_rng(1)
    sprites = random_scene(rng)
    back = slots_to_sprites(encode_oracle(sprites))
    assert [(s.x, s.y, s.shape, s.hue, s.saturation) for s in back] == \
        [(s.x, s.y, s.shape, s.hue, s.saturation) for s in sprites]


# -- decoder ----------------------------------------------------------------------

def test_zero_slots_decode_black():
    assert not decode_soft(np.zeros((NUM_SLOTS, 8))).data.any()


def test_decode_close_to_render_on_single_sprites():
    rng = np.random.default_rng(2)
    for _ in range(30):
        sprites = random_scene(rng, 1)
        err = np.abs(decode_soft(encode_oracle(sprites)).data - env.render(sprites)).mean()
        assert err < 0.05


def test_decode_batch_matches_single():
    rng = np.random.default_rng(3)
    zs = np.stack([encode_oracle(random_scene(rng)) for _ in range(3)])
    batch = decode_soft(zs).data
    for i in range(3):
        assert np.allclose(batch[i], decode_soft(zs[i]).data)


def test_decode_permutation_invariant_without_overlap():
    sprites = [SpriteState(0.2, 0.2, "square", 0.1, 0.9, 1.0, 0),
               SpriteState(0.7, 0.3, "circle", 0.6, 0.5, 1.0, 1),
               SpriteState(0.5, 0.8, "triangle", 0.3, 0.7, 1.0, 2)]
    z = encode_oracle(sprites)
    perm = np.random.default_rng(0).permutation(NUM_SLOTS)
    # sigmoid edges have tails, so well separated sprites still overlap at ~1e-8
    assert np.allclose(decode_soft(z).data, decode_soft(z[perm]).data, rtol=0, atol=1e-6)


@pytest.mark.parametrize("shape", env.SHAPES)
def test_pixel_loss_minimised_at_true_position(shape):
    s = SpriteState(0.43, 0.57, shape, 0.15, 0.9, 1.0, 0)
    target = env.render([s])
    z = encode_oracle([s])
    best = None
    for dx in np.linspace(-0.02, 0.02, 9):
        for dy in np.linspace(-0.02, 0.02, 9):
            zz = z.copy()
            zz[0, 1] += dx
            zz[0, 2] += dy
            loss = np.sum((decode_soft(zz).data - target) ** 2)
            if best is None or loss < best[0]:
                best = (loss, dx, dy)
    assert abs(best[1]) <= 0.005 + 1e-12 and abs(best[2]) <= 0.005 + 1e-12


def test_presence_scales_alpha():
    z = encode_oracle([SpriteState(0.5, 0.5, "square", 0.0, 1.0, 1.0, 0)])
    half = z.copy()
    half[0, 0] = 0.5
    assert decode_soft(half).data[32, 32, 0] == pytest.approx(0.5 * decode_soft(z).data[32, 32, 0])


# -- matching ---------------------------------------------------------------------

def test_matching_recovers_permutation():
    rng = np.random.default_rng(4)
    z = encode_oracle(random_scene(rng))
    z[occupied(z) == 0] = rng.uniform(size=(int((~occupied(z)).sum()), 8))  # make every row distinct
    perm = rng.permutation(NUM_SLOTS)
    m = match_slots(z, z[perm])
    assert np.array_equal(m.mapping, perm)
    assert m.total == 0.0


def test_small_perturbation_gives_identity_matching():
    z = encode_oracle([SpriteState(0.1 + 0.12 * i, 0.3, "circle", 0.1 * i, 0.5, 1.0, i) for i in range(7)])
    moved = z.copy()
    moved[2, 1] += 0.01
    m = match_slots(z, moved)
    assert np.array_equal(m.mapping[:7], np.arange(7))


def test_ties_go_to_lowest_index():
    z = np.zeros((NUM_SLOTS, 8))
    z[3] = z[5] = 0.4
    target = np.zeros((NUM_SLOTS, 8))
    target[0] = 0.4
    m = match_slots(z, target)
    assert m.mapping[0] == 3
    # blank targets pick the first blank source
    assert np.all(m.mapping[1:] == 0)


def test_total_is_sum_of_chosen_costs_by_brute_force():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(size=(2, NUM_SLOTS, 8))
    m = match_slots(a, b)
    brute = [min(np.mean((b[i] - a[j]) ** 2) for j in range(NUM_SLOTS)) for i in range(NUM_SLOTS)]
    assert m.total == pytest.approx(sum(brute))
    assert pairwise_slot_mse(a, b).shape == (NUM_SLOTS, NUM_SLOTS)


def test_matching_shape_mismatch():
    with pytest.raises(ValueError):
        match_slots(np.zeros((8, 8)), np.zeros((7, 8)))
