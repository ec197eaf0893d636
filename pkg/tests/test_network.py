import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from voxlandmark.network import (
    CoordNetConfig,
    CoordRegressor,
    HourglassStackConfig,
    JointModel,
    VoxelRegressor,
    load_checkpoint,
    parameter_groups,
    save_checkpoint,
)


def _zero_parameters(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class TestConfigs:
    def test_toy(self):
        cfg = HourglassStackConfig.toy()
        assert (cfg.num_modules, cfg.input_size, cfg.z_resolutions) == (2, (64, 64), (1, 16))
        assert cfg.volume_dims == (16, 16, 16)

    def test_full_scale(self):
        cfg = HourglassStackConfig.paper()
        assert (cfg.num_modules, cfg.input_size, cfg.z_resolutions) == (4, (256, 256), (1, 2, 4, 64))
        assert cfg.volume_dims == (64, 64, 64)
        cn = CoordNetConfig.paper()
        assert cn.num_conv_layers == 5 and cn.output_dim == 3 * 68

    def test_resolution_count_must_match(self):
        with pytest.raises(ValueError):
            HourglassStackConfig(num_modules=3, z_resolutions=(1, 16))

    def test_input_divisibility(self):
        with pytest.raises(ValueError):
            HourglassStackConfig(input_size=(60, 60))

    def test_channel_plan_length(self):
        with pytest.raises(ValueError):
            CoordNetConfig(num_conv_layers=3)

    def test_joint_dims_must_agree(self):
        with pytest.raises(ValueError):
            JointModel(HourglassStackConfig.toy(), CoordNetConfig(volume_dims=(8, 8, 8)))


class TestVoxelRegressor:
    def test_toy_shapes(self):
        net = VoxelRegressor(HourglassStackConfig.toy())
        out = net(torch.rand(2, 3, 64, 64))
        assert [tuple(v.shape) for v in out] == [(2, 1, 16, 16), (2, 16, 16, 16)]

    @settings(max_examples=8, deadline=None)
    @given(
        st.integers(1, 3),
        st.sampled_from([32, 64]),
        st.integers(1, 2),
        st.lists(st.integers(1, 8), min_size=3, max_size=3, unique=True),
    )
    def test_shape_contract(self, modules, size, depth, zs):
        zs = tuple(sorted(zs)[-modules:])
        cfg = HourglassStackConfig(modules, (size, size), 8, zs, depth)
        out = VoxelRegressor(cfg).eval()(torch.rand(1, 3, size, size))
        assert [tuple(v.shape) for v in out] == [(1, z, size // 4, size // 4) for z in zs]

    def test_rejects_wrong_input(self):
        with pytest.raises(ValueError):
            VoxelRegressor(HourglassStackConfig.toy())(torch.rand(1, 3, 32, 32))

    def test_zero_parameters_give_zero_volumes(self):
        net = VoxelRegressor(HourglassStackConfig.toy())
        _zero_parameters(net)
        for training in (True, False):
            net.train(training)
            for v in net(torch.rand(2, 3, 64, 64)):
                assert torch.count_nonzero(v) == 0


class TestCoordRegressor:
    def test_output_length(self):
        out = CoordRegressor(CoordNetConfig.toy(12))(torch.rand(2, 16, 16, 16))
        assert out.shape == (2, 36)

    @pytest.mark.parametrize("pooling", ["global", "flatten"])
    def test_zero_in_zero_out(self, pooling):
        net = CoordRegressor(CoordNetConfig(pooling=pooling)).eval()
        _zero_parameters(net)
        assert torch.count_nonzero(net(torch.zeros(1, 16, 16, 16))) == 0

    def test_deterministic(self):
        vol = torch.rand(3, 16, 16, 16, generator=torch.Generator().manual_seed(1))
        net = JointModel.toy(seed=5).coord_net.eval()
        torch.testing.assert_close(net(vol), net(vol), rtol=0, atol=0)

    def test_rejects_wrong_volume(self):
        with pytest.raises(ValueError):
            CoordRegressor(CoordNetConfig.toy())(torch.rand(1, 8, 16, 16))

    def test_layer_structure(self):
        net = CoordRegressor(CoordNetConfig.toy())
        convs = [m for m in net.convs if isinstance(m, torch.nn.Conv3d)]
        assert len(convs) == 5
        assert [c.stride[0] for c in convs] == [1, 2, 2, 2, 1]
        assert all(isinstance(m, torch.nn.LeakyReLU) and m.negative_slope == 0.01
                   for m in net.convs if isinstance(m, torch.nn.LeakyReLU))


class TestJointModel:
    def test_forward_composition(self):
        model = JointModel.toy(seed=0).eval()
        image = torch.rand(2, 3, 64, 64)
        volumes, coords = model(image)
        assert coords.shape == (2, 36)
        torch.testing.assert_close(coords, model.coord_net(volumes[-1]), rtol=0, atol=0)

    def test_gt_volume_path_skips_voxel_net(self):
        model = JointModel.toy(seed=0).eval()
        vol = torch.rand(1, 16, 16, 16)
        torch.testing.assert_close(model.coord_net(vol), model.coord_net(vol.clone()))

    def test_seeded_initialization(self):
        a, b, c = JointModel.toy(seed=3), JointModel.toy(seed=3), JointModel.toy(seed=4)
        for (_, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
            torch.testing.assert_close(pa, pb, rtol=0, atol=0)
        assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))

    def test_predict_shape_and_mode(self):
        model = JointModel.toy(seed=0).train()
        pred = model.predict(torch.rand(2, 3, 64, 64))
        assert pred.shape == (2, 12, 3)
        assert model.training

    def test_only_projection_layers_depend_on_count(self):
        small, large = JointModel.toy(n_landmarks=12), JointModel.toy(n_landmarks=68)
        diff = {n for (n, p), (_, q) in zip(small.named_parameters(), large.named_parameters()) if p.shape != q.shape}
        assert diff == {"coord_net.fc.weight", "coord_net.fc.bias"}

    def test_parameter_groups_partition(self):
        model = JointModel.toy()
        groups = parameter_groups(model)
        names = [n for n, _ in model.named_parameters()]
        assert sorted(groups["voxel"] + groups["coord"]) == sorted(names)
        assert len(set(names)) == len(names)

    def test_full_scale_preset_shapes(self):
        model = JointModel.paper().eval()
        with torch.no_grad():
            volumes, coords = model(torch.rand(1, 3, 256, 256))
        assert [tuple(v.shape[1:]) for v in volumes] == [(d, 64, 64) for d in (1, 2, 4, 64)]
        assert coords.shape == (1, 204)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = JointModel.toy(seed=2, n_landmarks=12)
        model.scheme_id = "toy12"
        model.provenance.voxel_pretrained = True
        save_checkpoint(tmp_path / "m.ckpt", model)
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.scheme_id == "toy12" and back.provenance.voxel_pretrained
        for (n, p), (_, q) in zip(model.state_dict().items(), back.state_dict().items()):
            torch.testing.assert_close(p, q, rtol=0, atol=0)

    def test_double_precision_round_trip(self, tmp_path):
        model = JointModel.toy().double()
        save_checkpoint(tmp_path / "m.ckpt", model)
        assert next(load_checkpoint(tmp_path / "m.ckpt").parameters()).dtype == torch.float64

    def test_rejects_foreign_file(self, tmp_path):
        torch.save({"format": "other"}, tmp_path / "x.ckpt")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_rejects_version(self, tmp_path):
        model = JointModel.toy()
        save_checkpoint(tmp_path / "m.ckpt", model)
        payload = torch.load(tmp_path / "m.ckpt", weights_only=True)
        payload["version"] = 99
        torch.save(payload, tmp_path / "m.ckpt")
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_all_parameters_finite(self):
        assert all(np.isfinite(p.detach().numpy()).all() for p in JointModel.toy().parameters())
