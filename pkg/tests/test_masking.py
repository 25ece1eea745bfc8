import math

import numpy as np
import pytest

from mimforge import tensor as T
from mimforge.masking import (
    BlockMaskConfig,
    MaskSet,
    apply_mask,
    block_dims,
    blockwise_mask,
    random_mask,
)


def test_block_dims_unit_aspect():
    # s=16, r=1 -> 4x4 before clipping
    assert block_dims(16, 1.0, 14, 14) == (4, 4)


def test_blockwise_monte_carlo_bounds():
    cfg = BlockMaskConfig()
    target = math.ceil(0.4 * 196)
    sizes = []
    for seed in range(10_000):
        m = blockwise_mask(14, 14, cfg, np.random.default_rng(seed))
        sizes.append(len(m))
    sizes = np.array(sizes)
    assert sizes.min() >= target  # 79
    assert sizes.max() <= 110


def test_blockwise_block_provenance():
    cfg = BlockMaskConfig()
    for seed in range(500):
        m, blocks = blockwise_mask(14, 14, cfg, np.random.default_rng(seed), return_blocks=True)
        for blk in blocks:
            assert cfg.aspect[0] <= blk.ratio <= cfg.aspect[1]
            assert (blk.a, blk.b) == block_dims(blk.size, blk.ratio, 14, 14)
            assert 0 <= blk.top <= 14 - blk.a
            assert 0 <= blk.left <= 14 - blk.b
            # round-half-up keeps the block area near the drawn size
            assert 0.70 * blk.size <= blk.a * blk.b <= 1.35 * blk.size


def test_blockwise_small_grid():
    cfg = BlockMaskConfig()
    for seed in range(200):
        m = blockwise_mask(2, 2, cfg, np.random.default_rng(seed))
        assert len(m) in {2, 3, 4}
        assert np.all(m.flat < 4)


def test_blockwise_deterministic():
    cfg = BlockMaskConfig()
    a = blockwise_mask(14, 14, cfg, np.random.default_rng(3))
    b = blockwise_mask(14, 14, cfg, np.random.default_rng(3))
    np.testing.assert_array_equal(a.flat, b.flat)


def test_blockwise_hard_cap():
    cfg = BlockMaskConfig(cap=75)
    for seed in range(100):
        m = blockwise_mask(14, 14, cfg, np.random.default_rng(seed))
        assert len(m) == 75  # cap binds below the 40% target


def test_config_validation():
    with pytest.raises(ValueError, match="ratio"):
        BlockMaskConfig(ratio=1.5)
    with pytest.raises(ValueError, match="reciprocal"):
        BlockMaskConfig(aspect=(0.3, 2.0))


def test_random_mask_exact_count():
    m = random_mask(196, 79, np.random.default_rng(0), grid=(14, 14))
    assert len(m) == 79
    assert np.unique(m.flat).size == 79


def test_random_mask_all_positions():
    m = random_mask(10, 10, np.random.default_rng(0))
    np.testing.assert_array_equal(m.flat, np.arange(10))


def test_random_mask_count_too_large():
    with pytest.raises(ValueError):
        random_mask(4, 5, np.random.default_rng(0))


def test_random_mask_inclusion_frequency():
    rng = np.random.default_rng(123)
    draws = 100_000
    freq = np.zeros(196)
    for _ in range(draws):
        freq[random_mask(196, 79, rng).flat] += 1
    freq /= draws
    np.testing.assert_allclose(freq, 79 / 196, atol=0.02)


def test_apply_mask_empty():
    emb = T.Tensor(np.arange(12, dtype=np.float32).reshape(4, 3))
    out = apply_mask(emb, MaskSet(2, 2, np.array([], dtype=np.int64)), T.Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, emb.data)


def test_apply_mask_all():
    emb = T.Tensor(np.arange(12, dtype=np.float32).reshape(4, 3))
    e_m = T.Tensor(np.array([7.0, 8.0, 9.0], dtype=np.float32))
    out = apply_mask(emb, MaskSet(2, 2, np.arange(4)), e_m)
    np.testing.assert_array_equal(out.data, np.broadcast_to(e_m.data, (4, 3)))


def test_apply_mask_single_position():
    emb = T.Tensor(np.zeros((3, 2), dtype=np.float32))
    out = apply_mask(emb, MaskSet(1, 3, np.array([0])), T.Tensor(np.array([9.0, 9.0])))
    np.testing.assert_array_equal(out.data, [[9, 9], [0, 0], [0, 0]])


def test_apply_mask_changes_exactly_masked_rows():
    rng = np.random.default_rng(7)
    emb = T.Tensor(rng.normal(size=(9, 4)).astype(np.float32))
    mask = random_mask(9, 4, rng, grid=(3, 3))
    out = apply_mask(emb, mask, T.Tensor(np.full(4, 5.0, dtype=np.float32)))
    changed = np.flatnonzero(np.any(out.data != emb.data, axis=1))
    np.testing.assert_array_equal(changed, mask.flat)


def test_apply_mask_out_of_range():
    emb = T.Tensor(np.zeros((3, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        apply_mask(emb, MaskSet(2, 2, np.array([0])), T.Tensor(np.zeros(2)))


def test_apply_mask_grads_flow_to_mask_embedding():
    emb = T.Tensor(np.zeros((4, 2), dtype=np.float64), requires_grad=True)
    e_m = T.Tensor(np.zeros(2, dtype=np.float64), requires_grad=True)
    mask = MaskSet(2, 2, np.array([1, 3]))
    with T.Tape() as tape:
        out = apply_mask(emb, mask, e_m)
        T.backward(out.sum(), tape)
    np.testing.assert_array_equal(e_m.grad, [2.0, 2.0])  # one per masked row
    np.testing.assert_array_equal(emb.grad, [[1, 1], [0, 0], [1, 1], [0, 0]])
