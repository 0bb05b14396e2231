import numpy as np
import pytest

from mamc_vad.errors import ConfigError, ShapeError
from mamc_vad.flowest import BlockMatchParams, displacement_order, estimate_flow
from mamc_vad.synthdata import SceneConfig, generate_sequence, shape_mask


def textured(shape=(48, 48), seed=0):
    return np.random.default_rng(seed).random(shape)


def test_identical_frames_zero_flow():
    f = textured()
    out = estimate_flow(f, f)
    assert not out.values.any()
    assert out.valid_mask.any()


def test_uniform_frames_zero_by_tie_break():
    f = np.full((40, 40), 0.5)
    out = estimate_flow(f, f.copy())
    assert not out.values.any()


def test_circular_shift_recovered():
    prev = textured((64, 64), seed=1)
    nxt = np.roll(prev, 3, axis=1)  # content moves +3 in x
    out = estimate_flow(prev, nxt)
    v = out.values[out.valid_mask]
    frac = np.mean(np.all(v == np.array([3, 0]), axis=1))
    assert frac >= 0.95


def test_vertical_shift_recovered():
    prev = textured((64, 64), seed=2)
    nxt = np.roll(prev, -2, axis=0)
    out = estimate_flow(prev, nxt)
    v = out.values[out.valid_mask]
    assert np.mean(np.all(v == np.array([0, -2]), axis=1)) >= 0.95


def test_bounded_by_radius_and_border_invalid():
    rng = np.random.default_rng(3)
    prev, nxt = rng.random((40, 40)), rng.random((40, 40))
    p = BlockMatchParams(block_size=5, search_radius=3)
    out = estimate_flow(prev, nxt, p)
    assert np.abs(out.values).max() <= 3
    m = 2 + 3
    assert not out.valid_mask[:m].any() and not out.valid_mask[-m:].any()
    assert not out.valid_mask[:, :m].any() and not out.valid_mask[:, -m:].any()
    assert out.valid_mask[m:-m, m:-m].all()
    assert not out.values[~out.valid_mask].any()


def test_matches_brute_force_on_tiny_frame():
    rng = np.random.default_rng(4)
    prev = np.round(rng.random((14, 14)) * 4) / 4  # coarse values create real ties
    nxt = np.round(rng.random((14, 14)) * 4) / 4
    p = BlockMatchParams(block_size=3, search_radius=2)
    out = estimate_flow(prev, nxt, p)
    for y in range(3, 11):
        for x in range(3, 11):
            best, best_key, best_d = None, None, None
            for dy in range(-2, 3):
                for dx in range(-2, 3):
                    sad = np.abs(prev[y - 1:y + 2, x - 1:x + 2] - nxt[y + dy - 1:y + dy + 2, x + dx - 1:x + dx + 2]).sum()
                    key = (sad, dx * dx + dy * dy, (dy + 2) * 5 + (dx + 2))
                    if best_key is None or key < best_key:
                        best_key, best_d = key, (dx, dy)
            assert tuple(out.values[y, x].astype(int)) == best_d


def test_displacement_order_starts_at_zero():
    order = displacement_order(1)
    assert order[0] == (0, 0)
    assert order[1:5] == [(-1, 0), (0, -1), (0, 1), (1, 0)]


def test_stride_nearest_fill():
    prev = textured((64, 64), seed=5)
    nxt = np.roll(prev, 2, axis=1)
    out = estimate_flow(prev, nxt, BlockMatchParams(stride=3))
    v = out.values[out.valid_mask]
    assert np.mean(np.all(v == np.array([2, 0]), axis=1)) >= 0.95


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        estimate_flow(np.zeros((10, 10)), np.zeros((10, 12)))


@pytest.mark.parametrize("p", [BlockMatchParams(block_size=4), BlockMatchParams(block_size=1),
                               BlockMatchParams(search_radius=0)])
def test_invalid_params(p):
    with pytest.raises(ConfigError):
        estimate_flow(np.zeros((20, 20)), np.zeros((20, 20)), p)


def test_agrees_with_generator_flow_on_sprites():
    cfg = SceneConfig(frame_size=(96, 96), clip_len=6, background="textured", rng_seed=21)
    seq = generate_sequence(cfg, anomalous=False)
    hits = total = 0
    for k in range(seq.n_frames - 1):
        est = estimate_flow(seq.frames[k], seq.frames[k + 1])
        for spr in seq.meta["sprites"]:
            b = [b for b in seq.boxes[k] if b.object_id == spr["object_id"]]
            if not b or k + 1 >= seq.n_frames:
                continue
            b = b[0]
            m = np.zeros(seq.frames.shape[1:], bool)
            m[b.y:b.y + b.h, b.x:b.x + b.w] = shape_mask(spr["shape_kind"], b.w)
            m &= est.valid_mask
            hits += np.all(est.values[m] == seq.gt_flows[k][m], axis=1).sum()
            total += m.sum()
    assert total > 0
    assert hits / total >= 0.9
