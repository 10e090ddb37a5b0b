"""Networks: shape contracts, bounds, determinism, checkpoint round trips."""

import os

import numpy as np
import pytest

from depthadapt import networks
from depthadapt.networks import (NetConfig, ParamSet, build_all, build_depth_net,
                                 build_discriminator, build_generator,
                                 load_checkpoint, run_depth_net, run_discriminator,
                                 run_generator, save_checkpoint)
from depthadapt.tensor import Tensor, TensorError, make_rng

CFG = NetConfig()


def image(shape=(1, 3, 32, 96), key="img"):
    return Tensor(make_rng(21, key).uniform(0, 1, shape).astype(np.float32))


class TestGenerator:
    def test_shape_preserved(self):
        ps = build_generator(CFG, seed=0)
        out = run_generator(ps, image())
        assert out.shape == (1, 3, 32, 96)

    def test_output_bounded(self):
        ps = build_generator(CFG, seed=1)
        out = run_generator(ps, image(key="b"))
        assert np.isfinite(out.data).all()
        assert out.data.min() >= -1.0 and out.data.max() <= 1.0

    def test_seed_determinism(self):
        p1 = build_generator(CFG, seed=5)
        p2 = build_generator(CFG, seed=5)
        for k in p1.params:
            assert np.array_equal(p1.params[k].data, p2.params[k].data)
        p3 = build_generator(CFG, seed=6)
        assert not np.array_equal(p1.params["stem.w"].data, p3.params["stem.w"].data)

    def test_indivisible_dims_rejected(self):
        ps = build_generator(CFG, seed=0)
        with pytest.raises(TensorError, match="divisible"):
            run_generator(ps, image((1, 3, 30, 96)))

    def test_to_unit(self):
        pm1 = Tensor(np.array([-1.0, 0.0, 1.0]).reshape(1, 1, 1, 3).astype(np.float32))
        assert np.allclose(networks.to_unit(pm1).data.ravel(), [0.0, 0.5, 1.0])


class TestDiscriminator:
    def test_patch_map_shape(self):
        ps = build_discriminator(CFG, seed=0)
        out = run_discriminator(ps, image())
        n, c, h, w = out.shape
        assert (n, c) == (1, 1)
        assert h < 32 and w < 96
        assert np.isfinite(out.data).all()

    def test_too_small_input(self):
        ps = build_discriminator(CFG, seed=0)
        with pytest.raises(TensorError):
            run_discriminator(ps, image((1, 3, 8, 8)))

    def test_deterministic(self):
        a = run_discriminator(build_discriminator(CFG, seed=2), image(key="d"))
        b = run_discriminator(build_discriminator(CFG, seed=2), image(key="d"))
        assert np.array_equal(a.data, b.data)


class TestDepthNet:
    def test_scale_pyramid(self):
        ps = build_depth_net(CFG, seed=0)
        outs = run_depth_net(ps, image())
        assert len(outs) == 4
        assert [o.shape[2] for o in outs] == [32, 16, 8, 4]
        assert [o.shape[3] for o in outs] == [96, 48, 24, 12]
        assert all(o.shape[1] == 1 for o in outs)

    def test_depth_bounds(self):
        ps = build_depth_net(CFG, seed=3)
        for o in run_depth_net(ps, image(key="z")):
            assert o.data.min() >= CFG.d_min and o.data.max() <= CFG.d_max

    def test_deterministic(self):
        a = run_depth_net(build_depth_net(CFG, seed=4), image(key="dd"))[0]
        b = run_depth_net(build_depth_net(CFG, seed=4), image(key="dd"))[0]
        assert np.array_equal(a.data, b.data)

    def test_indivisible_dims_rejected(self):
        ps = build_depth_net(CFG, seed=0)
        with pytest.raises(TensorError, match="divisible"):
            run_depth_net(ps, image((1, 3, 36, 96)))


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        nets = build_all(CFG, seed=9, names=("g_s2t", "d_t", "f_t"))
        p1 = tmp_path / "a.bin"
        p2 = tmp_path / "b.bin"
        save_checkpoint(p1, nets)
        save_checkpoint(p2, load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_values_round_trip(self, tmp_path):
        nets = build_all(CFG, seed=10, names=("f_s",))
        path = tmp_path / "c.bin"
        save_checkpoint(path, nets)
        back = load_checkpoint(path)
        assert set(back) == {"f_s"}
        for k, t in nets["f_s"].params.items():
            assert np.array_equal(back["f_s"].params[k].data, t.data)
        assert back["f_s"].kind == "depth"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTADEPTHFILE")
        with pytest.raises(networks.CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_tensor(self, tmp_path):
        nets = build_all(CFG, seed=11, names=("d_s",))
        path = tmp_path / "t.bin"
        save_checkpoint(path, nets)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(networks.CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_loaded_net_runs_identically(self, tmp_path):
        nets = build_all(CFG, seed=12, names=("f_t",))
        x = image(key="run")
        want = run_depth_net(nets["f_t"], x)[0]
        path = tmp_path / "r.bin"
        save_checkpoint(path, nets)
        got = run_depth_net(load_checkpoint(path)["f_t"], x)[0]
        assert np.array_equal(want.data, got.data)


def test_descriptor_matches_params():
    ps = build_generator(CFG, seed=0)
    desc = ps.descriptor()
    assert set(desc["params"]) == set(ps.params)
    for k, shape in desc["params"].items():
        assert tuple(shape) == ps.params[k].shape


def test_single_adam_step_decreases_loss():
    """One small-lr step on a frozen micro-batch strictly decreases the loss."""
    import depthadapt.tensor as T
    from depthadapt import losses
    from depthadapt.trainer import Adam, collect_params

    nets = build_all(CFG, seed=13, names=("f_s",))
    x = image((2, 3, 16, 24), key="opt")
    gt = Tensor(make_rng(21, "gt").uniform(2, 60, (2, 1, 16, 24)).astype(np.float32))

    def loss_value():
        with T.no_grad():
            return losses.multi_scale_supervised(
                run_depth_net(nets["f_s"], x), gt).item()

    before = loss_value()
    opt = Adam(collect_params(nets, ("f_s",)), lr=1e-6, beta1=0.9, beta2=0.999)
    with T.fresh_graph() as tape:
        loss = losses.multi_scale_supervised(run_depth_net(nets["f_s"], x), gt)
        tape.backward(loss)
    opt.step()
    assert loss_value() < before
