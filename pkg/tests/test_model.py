import numpy as np
import pytest

from msvmamba import checkpoint as ck
from msvmamba.data import phantom_arrays
from msvmamba.errors import ConfigError, FormatError, IntegrityError, ShapeError
from msvmamba.model import ModelConfig, MsvMamba
from msvmamba.tensor import Tensor
from msvmamba.train import (Adam, NonFiniteLoss, Trainer, TrainConfig, dice_coefficient,
                            evaluate, grad_norm, train_step)

SMALL = dict(channels=(4, 8, 16, 32), windows=((2, 2), (2, 2), (4, 4), (4, 4)))


def test_forward_shapes_default_width():
    model = MsvMamba(ModelConfig(classes=2))
    preds = model(Tensor(np.zeros((1, 1, 112, 112))))
    assert preds.logits_main.shape == (1, 2, 112, 112)
    assert [a.shape for a in preds.logits_aux] == [(1, 2, 112, 112)] * 4


@pytest.mark.parametrize("switch", ["use_lms", "use_aux", "use_msaa"])
def test_ablation_shapes(switch):
    x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 32, 32)))
    cfg = ModelConfig(**SMALL, classes=3)
    full = MsvMamba(cfg)(x)
    abl = MsvMamba(cfg.with_ablation(**{switch: False}))(x)
    assert abl.logits_main.shape == full.logits_main.shape
    assert [a.shape for a in abl.logits_aux] == [a.shape for a in full.logits_aux]


def test_no_lms_keeps_capacity_comparable():
    full = MsvMamba(ModelConfig(**SMALL)).num_parameters()
    nolms = MsvMamba(ModelConfig(**SMALL, use_lms=False)).num_parameters()
    assert 0.2 < nolms / full < 5


def test_placements_run():
    x = Tensor(np.zeros((1, 1, 32, 32)))
    for placement in ("lower", "top"):
        for pool in ("local", "channel"):
            out = MsvMamba(ModelConfig(**SMALL, msaa_placement=placement, msaa_pool=pool))(x)
            assert out.logits_main.shape == (1, 2, 32, 32)


def test_forward_determinism():
    x = Tensor(np.random.default_rng(1).standard_normal((1, 1, 32, 32)))
    a = MsvMamba(ModelConfig(**SMALL, seed=3))(x).logits_main.data
    b = MsvMamba(ModelConfig(**SMALL, seed=3))(x).logits_main.data
    assert a.tobytes() == b.tobytes()


def test_shape_error_names_stage():
    with pytest.raises(ShapeError, match="encoder"):
        MsvMamba(ModelConfig(**SMALL))(Tensor(np.zeros((1, 1, 30, 30))))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(channels=(8, 16, 30, 64))
    with pytest.raises(ConfigError):
        ModelConfig(msaa_placement="middle")
    assert ModelConfig(use_aux=False).loss_config().epsilon == 0.0
    assert ModelConfig(classes=1).task == "binary"


def _phantom_batch(n=1, size=32, seed=0):
    return phantom_arrays(n, seed, size=size)


def test_single_sample_loss_decreases():
    x, y = _phantom_batch(1, 64)
    model = MsvMamba(ModelConfig(channels=(8, 16, 32, 64)))
    opt = Adam(list(model.named_parameters()), lr=1e-3)
    losses = [train_step(model, x, y, opt).total.item() for _ in range(21)]
    violations = sum(b >= a for a, b in zip(losses, losses[1:]))
    assert violations <= 2, losses


def test_epsilon_zero_no_omega_gradient():
    x, y = _phantom_batch(2)
    model = MsvMamba(ModelConfig(**SMALL, use_aux=False))
    opt = Adam(list(model.named_parameters()))
    train_step(model, x, y, opt)
    assert not np.any(model.raw_omega.grad)


def test_gradient_norm_finite_100_steps():
    x, y = _phantom_batch(4)
    model = MsvMamba(ModelConfig(**SMALL))
    trainer = Trainer(model, x, y, TrainConfig(batch_size=2))
    norms = []
    trainer.run(100, lambda tr, out: norms.append(grad_norm(tr.model)))
    assert len(norms) == 100 and np.all(np.isfinite(norms))


def test_nan_loss_aborts_with_norms():
    x, y = _phantom_batch(1)
    model = MsvMamba(ModelConfig(**SMALL))
    model.main_head.bias.data[0] = np.nan
    with pytest.raises(NonFiniteLoss, match="decoder1="):
        train_step(model, x, y, Adam(list(model.named_parameters())))


def test_dice_coefficient_cases(rng):
    m = rng.integers(0, 2, (16, 16))
    assert dice_coefficient(m, m, 1) == 1.0
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    a[0] = 1
    b[3] = 1
    assert dice_coefficient(a, b, 1) == 0.0
    for _ in range(20):
        p, g = rng.integers(0, 3, (16, 16)), rng.integers(0, 3, (16, 16))
        ps = {(i, j) for i in range(16) for j in range(16) if p[i, j] == 2}
        gs = {(i, j) for i in range(16) for j in range(16) if g[i, j] == 2}
        ref = 2 * len(ps & gs) / (len(ps) + len(gs))
        assert abs(dice_coefficient(p, g, 2) - ref) < 1e-9


def test_evaluate_rows_and_empty():
    x, y = _phantom_batch(3)
    model = MsvMamba(ModelConfig(**SMALL, classes=2))
    res = evaluate(model, x, y)
    assert [r.cls for r in res.rows] == ["1", "mean"]
    assert len(res.per_sample) == 3
    assert all(0 <= r.dice <= 1 for r in res.rows + res.per_sample)
    with pytest.raises(ConfigError):
        evaluate(model, x[:0], y[:0])


def _trainer(x, y):
    return Trainer(MsvMamba(ModelConfig(**SMALL)), x, y, TrainConfig(batch_size=2))


def test_checkpoint_bitwise_round_trip(tmp_path):
    x, y = _phantom_batch(4)
    tr = _trainer(x, y)
    tr.run(2)
    ck.save(tmp_path / "a", ck.from_trainer(tr, {"k": "v"}))
    loaded = ck.load(tmp_path / "a")
    for name, arr in tr.model.state_dict().items():
        assert loaded.tensors[name].tobytes() == arr.astype(np.float32).tobytes()
    ck.save(tmp_path / "b", loaded)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_resume_matches_straight_run(tmp_path):
    x, y = _phantom_batch(4)
    straight = _trainer(x, y)
    losses = [o.total.item() for o in straight.run(10)]
    first = _trainer(x, y)
    first.run(5)
    ck.save(tmp_path / "mid", ck.from_trainer(first))
    second = _trainer(x, y)
    ck.restore_trainer(second, ck.load(tmp_path / "mid"))
    resumed = [o.total.item() for o in second.run(5)]
    assert resumed[-1] == losses[-1]
    assert resumed == losses[5:]


def test_checkpoint_corruption(tmp_path):
    x, y = _phantom_batch(2)
    raw = ck.encode(ck.from_trainer(_trainer(x, y)))
    with pytest.raises(IntegrityError):
        ck.decode(raw[:-20])
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0x10
    with pytest.raises(IntegrityError):
        ck.decode(bytes(flipped))
    with pytest.raises(FormatError):
        ck.decode(b"PNG!" + raw[4:])
    bad_version = raw[:4] + (7).to_bytes(4, "little") + raw[8:]
    with pytest.raises(FormatError, match="version"):
        ck.decode(bad_version)
    assert ck.decode(raw).step == 0


def test_checkpoint_header_layout(tmp_path):
    c = ck.Checkpoint(step=3, tensors={"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = ck.encode(c)
    assert raw[:4] == b"MSVM"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:16], "little") == 3
    assert int.from_bytes(raw[16:20], "little") == 1       # one tensor
    assert raw[24:25] == b"w"
    body = raw[25 + 4 + 8:25 + 4 + 8 + 24]
    np.testing.assert_array_equal(np.frombuffer(body, "<f4"), np.arange(6))
