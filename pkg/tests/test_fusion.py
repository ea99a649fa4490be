import numpy as np
import pytest

from biskdet import numkernel as nk
from biskdet.fusion import BiSkFPN, BiSkFPNBlock, FusionConfig, biskfpn_fuse, skip_project
from biskdet.numkernel import Parameter, Tape, Tensor


def pyramid(depth, channels=None, finest=None, batch=None, seed=0):
    g = np.random.default_rng(seed)
    channels = channels or [3 + i for i in range(depth)]
    finest = finest or 2 ** depth
    lead = (batch,) if batch else ()
    return [Tensor(g.normal(size=lead + (finest >> i, finest >> i, c))) for i, c in enumerate(channels)]


def expected_shapes(levels, cf):
    """Channel/extent recurrence of the fusion loop, computed by hand."""
    n = len(levels)
    chans = [lv.shape[-1] for lv in levels]
    out = [None] * n
    out[-1] = levels[-1].shape[-3:-1] + (chans[-1] + cf,)
    for i in range(n - 2, -1, -1):
        out[i] = levels[i].shape[-3:-1] + (chans[i] + cf,)
    return out


@pytest.mark.parametrize("depth", [2, 3, 4, 5])
def test_output_shapes_follow_recurrence(depth):
    levels = pyramid(depth)
    cfg = FusionConfig(channels=6)
    fpn = BiSkFPN([lv.shape[-1] for lv in levels], cfg)
    fused, outs = biskfpn_fuse(levels, fpn)
    shapes = expected_shapes(levels, cfg.channels)
    assert fused.shape == shapes[0]
    assert [o.shape for o in outs] == [s[:2] + (cfg.channels,) for s in shapes]
    assert fused.shape[:2] == levels[0].shape[:2]


def test_two_level_example():
    levels = [Tensor(np.ones((4, 4, 5))), Tensor(np.ones((2, 2, 7)))]
    fused, _ = BiSkFPN([5, 7], FusionConfig(channels=8))(levels)
    assert fused.shape == (4, 4, 5 + 8)


def test_zero_deconv_preserves_level_slice():
    levels = pyramid(3)
    block = BiSkFPNBlock([lv.shape[-1] for lv in levels], FusionConfig(channels=4), np.random.default_rng(0))
    for p in [block.init_deconv, *block.deconvs, *[s for s in block.skips if s is not None]]:
        p.data[...] = 0
    fused, _ = block.fuse(levels)
    c = levels[0].shape[-1]
    np.testing.assert_array_equal(fused.data[..., :c], levels[0].data)
    assert not fused.data[..., c:].any()


@pytest.mark.parametrize("depth", [2, 3, 4])
def test_gradient_reaches_every_level(depth):
    levels = [Parameter(t.data, f"P{i}") for i, t in enumerate(pyramid(depth))]
    fpn = BiSkFPN([lv.shape[-1] for lv in levels], FusionConfig(channels=4))
    with Tape() as tape:
        fused, _ = fpn(levels)
        loss = nk.tsum(nk.mul(fused, fused))
    nk.backward_pass(tape, loss)
    assert all(np.any(lv.grad) for lv in levels)


def test_skip_project_contracts(rng):
    x = Tensor(rng.normal(size=(4, 4, 3)))
    assert skip_project(x, (4, 4, 3)) is x
    w = Parameter(rng.normal(size=(1, 1, 4, 8)), "w")
    assert skip_project(Tensor(rng.normal(size=(8, 8, 4))), (4, 4, 8), w).shape == (4, 4, 8)
    const = skip_project(Tensor(np.full((8, 8, 2), 3.5)), (3, 5, 2))
    assert const.shape == (3, 5, 2) and np.all(const.data == 3.5)
    with pytest.raises(ValueError):
        skip_project(Tensor(np.ones((2, 2, 2))), (2, 2, 3))


def test_repeats_are_shape_stable():
    levels = pyramid(3)
    chans = [lv.shape[-1] for lv in levels]
    once = BiSkFPN(chans, FusionConfig(channels=5, repeats=1))(levels)[1]
    thrice = BiSkFPN(chans, FusionConfig(channels=5, repeats=3))(levels)[1]
    assert [o.shape for o in once] == [o.shape for o in thrice]


def test_incompatible_extents_rejected():
    levels = [Tensor(np.ones((8, 8, 2))), Tensor(np.ones((2, 2, 2)))]
    with pytest.raises(ValueError):
        BiSkFPN([2, 2])(levels)
    with pytest.raises(ValueError):
        BiSkFPN([2])
    with pytest.raises(ValueError):
        FusionConfig(repeats=0)


@pytest.mark.parametrize("seed", (0, 1, 2))
def test_block_gradients_through_all_paths(seed):
    levels = pyramid(3, channels=[2, 2, 3], finest=4, seed=seed)
    fpn = BiSkFPN([2, 2, 3], FusionConfig(channels=2), seed=seed)
    proj = np.random.default_rng(seed + 10).normal(size=(4, 4, 4))

    def loss(_t):
        fused, outs = fpn(levels)
        total = nk.tsum(nk.mul(fused, proj))
        for o in outs:
            total = nk.add(total, nk.tsum(nk.mul(o, o)))
        return total

    for name, p in fpn.named_parameters():
        rep = nk.finite_difference_check(loss, p)
        assert rep.passed, (name, rep.max_rel_error)
    for i, lv in enumerate(levels):
        rep = nk.finite_difference_check(loss, lv)
        assert rep.passed, (i, rep.max_rel_error)


def test_batched_input_matches_single():
    levels = pyramid(3, batch=2)
    fpn = BiSkFPN([lv.shape[-1] for lv in levels], FusionConfig(channels=4))
    fused, _ = fpn(levels)
    single, _ = fpn([Tensor(lv.data[1]) for lv in levels])
    np.testing.assert_allclose(fused.data[1], single.data, atol=1e-12)
