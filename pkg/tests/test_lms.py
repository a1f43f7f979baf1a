import numpy as np
import pytest

from conftest import worst
from msvmamba.errors import ShapeError
from msvmamba.lms import LmsBlock, PaM, PiM, window_merge, window_partition
from msvmamba.tensor import Tensor, backward, parameter, precision, tsum


def test_partition_counts():
    x = Tensor(np.zeros((1, 3, 8, 8)))
    seq, lay = window_partition(x, 4, 4)
    assert seq.shape == (4, 16, 3) and lay.grid == (2, 2)
    seq, _ = window_partition(x, 8, 8)
    assert seq.shape == (1, 64, 3)


@pytest.mark.parametrize("hw,win", [((8, 8), (4, 4)), ((7, 7), (4, 4)), ((6, 10), (3, 4))])
def test_partition_merge_identity(rng, hw, win):
    x = Tensor(rng.standard_normal((2, 3) + hw))
    seq, lay = window_partition(x, *win)
    assert window_merge(seq, lay).data.tobytes() == x.data.tobytes()


def test_partition_token_order(rng):
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    seq, _ = window_partition(Tensor(x), 2, 2)
    np.testing.assert_array_equal(seq.data[:, :, 0], [[0, 1, 4, 5], [2, 3, 6, 7],
                                                      [8, 9, 12, 13], [10, 11, 14, 15]])


def _zero_out_proj(mod):
    mod.mamba.out_proj.weight.data[...] = 0.0


def test_pim_pure_residual(rng):
    pim = PiM(4, (4, 4), rng)
    _zero_out_proj(pim)
    x = Tensor(rng.standard_normal((1, 4, 8, 8)))
    assert pim(x).data.tobytes() == x.data.tobytes()


def test_pim_pam_shape_preserved(rng):
    x = Tensor(rng.standard_normal((1, 64, 28, 28)))
    assert PiM(64, (4, 4), rng)(x).shape == x.shape
    assert PaM(64, (4, 4), rng)(x).shape == x.shape


def _window_perturbation(module, rng):
    x = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)
    base = module(Tensor(x)).data
    # random, not channel-uniform: a uniform shift would vanish in the token LayerNorm
    x[0, :, 0:4, 0:4] += rng.standard_normal((4, 4, 4)).astype(np.float32)  # window (0, 0)
    moved = module(Tensor(x)).data
    return base, moved


def test_pim_window_independence(rng):
    base, moved = _window_perturbation(PiM(4, (4, 4), rng), rng)
    for i, j in [(0, 4), (4, 0), (4, 4)]:
        assert base[0, :, i:i + 4, j:j + 4].tobytes() == moved[0, :, i:i + 4, j:j + 4].tobytes()
    assert not np.array_equal(base[0, :, :4, :4], moved[0, :, :4, :4])


def test_pam_cross_window_coupling(rng):
    pam = PaM(4, (4, 4), rng)
    base, moved = _window_perturbation(pam, rng)
    assert np.abs(base[0, :, 4:, 4:] - moved[0, :, 4:, 4:]).max() > 0


def test_pam_single_window(rng):
    pam = PaM(3, (4, 4), rng)
    x = Tensor(rng.standard_normal((1, 3, 4, 4)))
    with precision(np.float32):
        out = pam(x).data
    pooled = x.data.mean(axis=(2, 3))[:, None, :]  # 1 x 1 x C token
    token = pam.mamba(pam.norm(Tensor(pooled))).data[0, 0]
    expect = token[:, None, None] + x.data[0] * pam.scale.data[0, 0]
    np.testing.assert_allclose(out[0], expect, atol=1e-6)


def test_block_shape_chain(rng):
    blk = LmsBlock(256, 128, (7, 7), rng)
    out = blk(Tensor(rng.standard_normal((1, 256, 7, 7))),
              Tensor(rng.standard_normal((1, 128, 14, 14))))
    assert out.shape == (1, 128, 14, 14)


def test_block_skip_mismatch(rng):
    blk = LmsBlock(8, 4, (4, 4), rng)
    with pytest.raises(ShapeError, match="skip"):
        blk(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((1, 4, 6, 6))))


def test_block_gradient_f64(rng):
    with precision(np.float64):
        blk = LmsBlock(4, 2, (4, 4), rng, d_state=4, expand=1)
        for p in blk.parameters():
            p.data[...] += rng.standard_normal(p.shape) * 0.2
        x = parameter(rng.standard_normal((1, 4, 8, 8)))
        skip = parameter(rng.standard_normal((1, 2, 16, 16)))
        ins = {"x": x, "skip": skip, **dict(blk.named_parameters())}
        assert worst(lambda: blk(x, skip), ins, max_probes=4) < 1e-4


def test_scale_gets_gradient(rng):
    blk = LmsBlock(4, None, (4, 4), rng)
    x = Tensor(rng.standard_normal((2, 4, 8, 8)))
    out = blk(x)
    backward(tsum(out * Tensor(rng.standard_normal(out.shape))))
    assert abs(blk.pim.scale.grad.item()) > 0 and abs(blk.pam.scale.grad.item()) > 0


def test_no_lms_block_same_shape(rng):
    x = Tensor(rng.standard_normal((1, 8, 4, 4)))
    skip = Tensor(rng.standard_normal((1, 4, 8, 8)))
    a = LmsBlock(8, 4, (4, 4), rng)(x, skip)
    b = LmsBlock(8, 4, (4, 4), rng, use_lms=False)(x, skip)
    assert a.shape == b.shape == (1, 4, 8, 8)
