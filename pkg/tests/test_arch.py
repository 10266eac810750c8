"""Model builder: topology, ablation knobs, parameter store and folding."""

import numpy as np
import pytest

from gunet.arch import (ModelConfig, ParamStore, build_gunet, eca_kernel_size, fold_network,
                        forward_dehaze)
from gunet.cost import count_params
from gunet.errors import ConfigError, ContractError, ShapeError
from gunet.tensor import Tensor, no_grad

MICRO = dict(base_blocks=1, base_width=4, n_stages=5)

ABLATIONS = [
    {},
    {"gate_kind": "hard_sigmoid"},
    {"gate_kind": "tanh"},
    {"nonlin_ablation": "relu_sum"},
    {"nonlin_ablation": "gelu_sum"},
    {"norm_kind": "layer"},
    {"norm_kind": "instance"},
    {"dw_kernel": 3},
    {"dw_kernel": 7},
    {"fusion_kind": "concat"},
    {"fusion_kind": "sum"},
    {"extra_attention": "se"},
    {"extra_attention": "eca"},
    {"width_multiplier": 2 ** 0.5},
    {"n_stages": 3},
    {"n_stages": 7},
    {"padding": "zero"},
]


@pytest.fixture
def micro():
    return build_gunet(ModelConfig(**MICRO), seed=0, head_init="random")


class TestConfig:
    @pytest.mark.parametrize("name,m", [("T", 2), ("S", 4), ("B", 8), ("D", 16)])
    def test_presets(self, name, m):
        cfg = ModelConfig.preset(name)
        assert cfg.base_blocks == m and cfg.base_width == 24 and cfg.dw_kernel == 5

    def test_t_widths(self):
        widths = [w for _, w, _ in ModelConfig.preset("T").stages()]
        assert widths == [24, 48, 96, 192, 96, 48, 24]

    def test_mid_stage_doubled(self):
        blocks = {n: b for n, _, b in ModelConfig.preset("S").stages()}
        assert blocks["mid"] == 8 and blocks["enc0"] == 4

    def test_unknown_preset_lists_valid(self):
        with pytest.raises(ConfigError, match="T, S, B, D"):
            ModelConfig.preset("Q")

    @pytest.mark.parametrize("bad", [{"dw_kernel": 4}, {"n_stages": 6}, {"n_stages": 1},
                                     {"base_width": 0}, {"norm_kind": "group"},
                                     {"fusion_kind": "max"}, {"width_multiplier": -1.0}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)

    def test_fingerprint_distinguishes(self):
        a, b = ModelConfig.preset("T"), ModelConfig.preset("T", fusion_kind="sum")
        assert len(a.fingerprint()) == 32
        assert a.fingerprint() != b.fingerprint()
        assert a.fingerprint() == ModelConfig.from_dict(a.to_dict()).fingerprint()

    def test_eca_kernel_odd(self):
        for c in (4, 24, 48, 96, 192, 384):
            assert eca_kernel_size(c) % 2 == 1


class TestForward:
    @pytest.mark.parametrize("hw", [(16, 16), (13, 7), (1, 1), (5, 20)])
    def test_any_size(self, micro, hw):
        net, _ = micro
        x = np.random.default_rng(0).uniform(0, 1, (2, 3, *hw))
        assert forward_dehaze(net, x).shape == (2, 3, *hw)

    def test_single_image_input(self, micro):
        net, _ = micro
        assert forward_dehaze(net, np.zeros((3, 8, 8))).shape == (1, 3, 8, 8)

    def test_rejects_wrong_channels(self, micro):
        with pytest.raises(ShapeError):
            forward_dehaze(micro[0], np.zeros((1, 4, 8, 8)))

    def test_zero_head_reproduces_input_exactly(self):
        net, _ = build_gunet(ModelConfig(**MICRO), seed=3)
        x = np.random.default_rng(1).uniform(0, 1, (2, 3, 11, 9))
        assert forward_dehaze(net, x).data.tobytes() == x.tobytes()

    @pytest.mark.parametrize("overrides", ABLATIONS, ids=lambda d: ",".join(f"{k}={v}" for k, v in d.items()) or "base")
    def test_ablation_builds_and_counts(self, overrides):
        cfg = ModelConfig(**{**MICRO, "base_width": 8, **overrides})
        net, store = build_gunet(cfg, seed=0, head_init="random")
        out = forward_dehaze(net, np.random.default_rng(0).uniform(0, 1, (2, 3, 8, 8)))
        assert np.all(np.isfinite(out.data))
        assert store.num_params() == count_params(cfg)

    def test_probe_order_and_names(self, micro):
        net, _ = micro
        seen = []
        forward_dehaze(net, np.zeros((1, 3, 8, 8)), lambda n, t: seen.append(n))
        assert seen[0] == "stem" and seen[-1] == "head"
        assert "mid.block1" in seen and "fuse0" in seen

    def test_sk_weights_convex(self, micro):
        net, _ = micro
        fuse = net.layers["fuse0"]
        rng = np.random.default_rng(0)
        w = fuse.weights(Tensor(rng.standard_normal((2, 4, 4, 4))), Tensor(rng.standard_normal((2, 4, 4, 4)))).data
        np.testing.assert_allclose(w[:, :4] + w[:, 4:], 1, rtol=1e-14)

    def test_same_seed_same_params(self):
        cfg = ModelConfig(**MICRO)
        assert build_gunet(cfg, seed=5)[1].bit_equal(build_gunet(cfg, seed=5)[1])
        assert not build_gunet(cfg, seed=5)[1].bit_equal(build_gunet(cfg, seed=6)[1])

    def test_frozen_forward_repeatable(self, micro):
        net, _ = micro
        x = np.random.default_rng(0).uniform(0, 1, (2, 3, 8, 8))
        forward_dehaze(net, x)  # populate running stats
        net.set_norm_mode("frozen")
        other = np.random.default_rng(1).uniform(0, 1, (4, 3, 8, 8))
        a = forward_dehaze(net, x).data
        forward_dehaze(net, other)
        b = forward_dehaze(net, x[::-1].copy()).data[::-1]
        assert a.tobytes() == b.tobytes()


class TestParamStore:
    def test_names_and_decay(self, micro):
        _, store = micro
        assert "enc0.block0.pw1.weight" in store.params
        assert store.decays("enc0.block0.dw.weight")
        assert not store.decays("enc0.block0.pw1.bias")
        assert not store.decays("enc0.block0.norm.weight")

    def test_buffers_in_arrays(self, micro):
        _, store = micro
        arrays = store.arrays()
        assert "mid.block0.norm.running_var" in arrays
        assert len(arrays) == len(store) + 2 * len(store.norms)

    def test_snapshot_restore(self, micro):
        net, store = micro
        snap = store.snapshot()
        for t in store.params.values():
            t.data += 1
        store.restore(snap)
        assert all(np.array_equal(store.arrays()[k], v) for k, v in snap.items())

    def test_restore_rejects_bad_shape_without_writing(self, micro):
        _, store = micro
        snap = store.snapshot()
        bad = {k: v + 1 for k, v in snap.items()}
        bad["head.bias"] = np.zeros(5)
        with pytest.raises(ShapeError):
            store.restore(bad)
        assert store.arrays()["stem.weight"].tobytes() == snap["stem.weight"].tobytes()


class TestFold:
    def test_fold_equivalence_micro(self):
        net, store = build_gunet(ModelConfig(**MICRO), seed=0, head_init="random")
        rng = np.random.default_rng(0)
        for st in store.norms.values():
            st.running_mean[:] = rng.standard_normal(st.channels) * 0.1
            st.running_var[:] = rng.uniform(0.5, 2, st.channels)
        net.set_norm_mode("eval")
        folded = fold_network(net)
        x = rng.uniform(0, 1, (3, 3, 16, 16))
        with no_grad():
            np.testing.assert_allclose(forward_dehaze(folded, x).data, forward_dehaze(net, x).data, atol=1e-12)

    def test_fold_requires_batch_norm(self):
        net, _ = build_gunet(ModelConfig(**MICRO, norm_kind="layer"))
        with pytest.raises(ContractError):
            fold_network(net)

    def test_fold_refuses_train_mode(self):
        net, _ = build_gunet(ModelConfig(**MICRO))
        with pytest.raises(ConfigError):
            fold_network(net)


def test_store_matches_network(micro):
    net, store = micro
    assert isinstance(store, ParamStore)
    assert store.config == net.config
