import numpy as np
import pytest

from tbnet import tensor as te
from tbnet.gradcheck import Case, check_case
from tbnet.network import (BlockSpec, ConfigurationError, DeepTBBlock, NetworkConfig, ResNetBlock, TBPath,
                           WideTBBlock, assemble_network, build_deep_tb_block, build_resnet_block,
                           build_wide_tb_block, forward_classify, load_checkpoint, read_checkpoint,
                           save_checkpoint, zero_tb_paths)
from tbnet.bilinear import BottleneckTB, TBConfig
from tbnet.tensor import DimensionError, Tensor

C2D_TABLE = [(8, 56, 56), (8, 56, 56), (8, 28, 28), (8, 14, 14), (8, 7, 7)]
C3D_TABLE = [(8, 56, 56), (8, 56, 56), (4, 28, 28), (2, 14, 14), (1, 7, 7)]


def small_cfg(arch="c2d", **kw):
    base = dict(arch=arch, width_factor=1 / 16, num_classes=4, clip_shape=(4, 16, 16), p=3)
    base.update(kw)
    return NetworkConfig(**base)


def clips(rng, cfg, n=2):
    T, H, W = cfg.clip_shape
    return rng.standard_normal((n, T, cfg.in_channels, H, W))


def n_params(module):
    return sum(p.size for p in module.parameters())


class TestShapes:
    def test_c2d_expected(self):
        assert NetworkConfig().expected_stage_shapes() == C2D_TABLE

    def test_c3d_expected(self):
        assert NetworkConfig(arch="c3d").expected_stage_shapes() == C3D_TABLE

    @pytest.mark.parametrize("arch, table", [("c2d", C2D_TABLE), ("c3d", C3D_TABLE), ("wtbn", C2D_TABLE),
                                             ("dtbn", C2D_TABLE)])
    def test_traced_shapes_at_reduced_width(self, arch, table):
        cfg = NetworkConfig(arch=arch, width_factor=1 / 16, num_classes=5)
        model = assemble_network(cfg, np.float32)
        model.eval()
        with te.no_grad():
            feats = model.features(Tensor(np.zeros((1, 8, 3, 112, 112), np.float32)))
        got = [(f.shape[1],) + f.shape[3:] for f in feats]
        assert got == table
        assert [f.shape[2] for f in feats[1:]] == [4, 8, 16, 32]

    def test_width_factor_scales_channels_only(self):
        assert NetworkConfig(width_factor=1 / 8).stage_widths == (8, 16, 32, 64)
        assert NetworkConfig(width_factor=1 / 8).expected_stage_shapes() == C2D_TABLE

    def test_tb_placement(self):
        cfg = NetworkConfig(arch="wtbn", tb_stages=("res2", "res3", "res4"))
        assert cfg.num_tb_blocks() == 6
        kinds = [[s.kind for s in stage] for stage in cfg.block_specs()]
        assert kinds[0] == ["resnet2d", "resnet2d"] and all(k == ["wide_tb"] * 2 for k in kinds[1:])
        assert NetworkConfig(arch="wtbn", tb_stages=("res4",)).num_tb_blocks() == 2

    def test_bad_tb_width_names_stage(self):
        with pytest.raises(ConfigurationError, match="res2"):
            NetworkConfig(arch="wtbn", width_factor=1 / 64).block_specs()

    def test_unknown_arch(self):
        with pytest.raises(ConfigurationError):
            NetworkConfig(arch="i3d")

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigurationError):
            NetworkConfig.from_dict({"arch": "c2d", "depth": 50})


class TestBlocks:
    def test_res2_c2d_shape(self, rng):
        block = build_resnet_block(BlockSpec("resnet2d", 4, 8, stride=2), seed=0)
        assert block(Tensor(rng.standard_normal((1, 8, 4, 56, 56)))).shape == (1, 8, 8, 28, 28)

    def test_res2_c3d_shape(self, rng):
        block = build_resnet_block(BlockSpec("resnet3d", 2, 4, stride=2, temporal_stride=2), seed=0)
        assert block(Tensor(rng.standard_normal((1, 8, 2, 56, 56)))).shape == (1, 4, 4, 28, 28)

    def test_zero_final_conv_gives_shortcut(self, rng):
        block = build_resnet_block(BlockSpec("resnet2d", 4, 4), seed=0)
        block.conv2.weight.data[...] = 0
        x = Tensor(rng.standard_normal((2, 3, 4, 5, 5)))
        assert np.array_equal(block(x).data, np.maximum(x.data, 0))

    def test_wide_zero_tb_equals_plain(self, rng):
        spec = BlockSpec("wide_tb", 8, 8, tb=TBConfig(8, 8, p=3))
        wide = build_wide_tb_block(spec, seed=5)
        plain = build_resnet_block(BlockSpec("resnet2d", 8, 8), seed=5)
        zero_tb_paths(wide)
        x = Tensor(rng.standard_normal((2, 3, 8, 4, 4)))
        assert np.array_equal(wide(x).data, plain(x).data)

    def test_wide_frame_constant_input(self, rng):
        spec = BlockSpec("wide_tb", 8, 8, tb=TBConfig(8, 8, p=3))
        wide = build_wide_tb_block(spec, seed=1)
        frame = rng.standard_normal((2, 1, 8, 4, 4))
        out = wide.tb(Tensor(np.repeat(frame, 5, axis=1))).data
        assert np.allclose(out, out[:, :1], atol=1e-12)

    @pytest.mark.parametrize("kind", ["wide_tb", "deep_tb"])
    def test_gradient_reaches_both_paths(self, kind, rng):
        spec = BlockSpec(kind, 8, 8, tb=TBConfig(8, 8, p=3, dropfactor_keep=1.0))
        block = (build_wide_tb_block if kind == "wide_tb" else build_deep_tb_block)(spec, seed=2)
        x = Tensor(rng.standard_normal((2, 3, 8, 4, 4)))
        y = block(x)
        te.sum_all(te.mul(y, Tensor(rng.standard_normal(y.shape)))).backward()
        assert np.abs(block.conv1.weight.grad).sum() > 0
        assert np.abs(block.tb.bottleneck.tb.factors.grad).sum() > 0

    def test_deep_zero_conv_path_gives_shortcut(self, rng):
        spec = BlockSpec("deep_tb", 8, 8, tb=TBConfig(8, 8, p=3))
        deep = build_deep_tb_block(spec, seed=0)
        deep.conv2.weight.data[...] = 0
        x = Tensor(rng.standard_normal((2, 3, 8, 4, 4)))
        assert np.array_equal(deep(x).data, np.maximum(x.data, 0))

    def test_deep_shape_matches_plain(self, rng):
        spec = BlockSpec("deep_tb", 4, 8, stride=2, tb=TBConfig(4, 8, p=2))
        deep = build_deep_tb_block(spec, seed=0)
        plain = build_resnet_block(BlockSpec("resnet2d", 4, 8, stride=2), seed=0)
        x = Tensor(rng.standard_normal((1, 3, 4, 6, 6)))
        assert deep(x).shape == plain(x).shape

    def test_deep_param_count(self):
        spec = BlockSpec("deep_tb", 8, 8, tb=TBConfig(8, 8, p=3))
        deep = build_deep_tb_block(spec, seed=0)
        plain = build_resnet_block(BlockSpec("resnet2d", 8, 8), seed=0)
        bottleneck = BottleneckTB(TBConfig(8, 8, p=3), seed=0)
        norms = 2 * 8 + 2 * 8  # input and output norm scales/shifts of the TB path
        assert n_params(deep) == n_params(plain) + n_params(bottleneck) + norms

    def test_builders_check_kind(self):
        with pytest.raises(ConfigurationError):
            build_resnet_block(BlockSpec("wide_tb", 8, 8))
        with pytest.raises(ConfigurationError):
            build_wide_tb_block(BlockSpec("resnet2d", 8, 8))


class TestNetwork:
    @pytest.mark.parametrize("arch", ["wtbn", "dtbn"])
    def test_zero_tb_matches_c2d_exactly(self, arch, rng):
        c2d = assemble_network(small_cfg("c2d", seed=4))
        tbn = assemble_network(small_cfg(arch, seed=4))
        zero_tb_paths(tbn)
        x = clips(rng, c2d.cfg, 3)
        assert np.array_equal(forward_classify(c2d, x), forward_classify(tbn, x))
        c2d.train(), tbn.train()
        assert np.array_equal(c2d(Tensor(x)).data, tbn(Tensor(x)).data)

    def test_logits_shape(self, rng):
        model = assemble_network(small_cfg("c3d"))
        assert forward_classify(model, clips(rng, model.cfg, 3)).shape == (3, 4)

    def test_identical_clips_identical_rows(self, rng):
        model = assemble_network(small_cfg("wtbn"))
        x = np.repeat(clips(rng, model.cfg, 1), 2, axis=0)
        out = forward_classify(model, x)
        assert np.array_equal(out[0], out[1])

    def test_eval_repeatable_and_mode_restored(self, rng):
        model = assemble_network(small_cfg("dtbn"))
        x = clips(rng, model.cfg)
        assert model.training
        assert np.array_equal(forward_classify(model, x), forward_classify(model, x))
        assert model.training

    def test_batch_permutation_equivariance(self, rng):
        model = assemble_network(small_cfg("wtbn"))
        x = clips(rng, model.cfg, 4)
        perm = np.array([2, 0, 3, 1])
        assert np.allclose(forward_classify(model, x)[perm], forward_classify(model, x[perm]), atol=1e-12)

    def test_shape_mismatch(self, rng):
        model = assemble_network(small_cfg())
        with pytest.raises(DimensionError):
            forward_classify(model, np.zeros((1, 4, 3, 8, 8)))

    def test_seed_determinism(self):
        a = assemble_network(small_cfg("wtbn", seed=9)).state_dict()
        b = assemble_network(small_cfg("wtbn", seed=9)).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_end_to_end_gradient(self):
        rng = np.random.default_rng(0)
        cfg = NetworkConfig(arch="wtbn", width_factor=1 / 8, num_classes=3, clip_shape=(4, 16, 16), p=2,
                            dropfactor_keep=1.0)
        model = assemble_network(cfg)
        x = Tensor(rng.standard_normal((2, 4, 3, 16, 16)))
        labels = np.array([0, 2])
        case = Case(lambda: te.softmax_cross_entropy(model(x), labels), model.parameters(), max_coords=2)
        assert check_case(case, rng) < 1e-3


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        model = assemble_network(small_cfg("dtbn"), np.float32)
        model.train()
        model(Tensor(clips(rng, model.cfg).astype(np.float32)))  # move running stats off their init
        save_checkpoint(model, tmp_path / "m.ckpt", {"network": model.cfg.to_dict(), "note": "x"})
        loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert meta["note"] == "x"
        a, b = model.state_dict(), loaded.state_dict()
        assert a.keys() == b.keys()
        assert all(a[k].tobytes() == b[k].tobytes() and a[k].dtype == b[k].dtype for k in a)

    def test_header(self, tmp_path):
        model = assemble_network(small_cfg())
        save_checkpoint(model, tmp_path / "m.ckpt")
        assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"TBNCKPT1"

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(ValueError):
            read_checkpoint(tmp_path / "bad.ckpt")

    def test_state_mismatch(self):
        model = assemble_network(small_cfg("wtbn"))
        other = assemble_network(small_cfg("c2d"))
        with pytest.raises(KeyError):
            other.load_state_dict(model.state_dict())
