import numpy as np
import pytest

from inkgarden import tensor as tg
from inkgarden.errors import AdapterStateError, AdapterTargetError, FrozenParameterError
from inkgarden.lora import (
    apply_adapter_arrays,
    inject,
    load_adapter_arrays,
    merge,
    parameter_checksums,
    save_adapters,
    trainable_report,
    unmerge,
    verify_finetune_contract,
)
from inkgarden.nn import Linear, Module, assign_names
from inkgarden.optim import AdamState, adam_step
from inkgarden.tensor import Tensor
from inkgarden.unet import UNet, UNetConfig


def tiny_unet(dtype=np.float64, seed=0):
    cfg = UNetConfig(
        latent_channels=2,
        latent_size=4,
        base_channels=8,
        channel_mults=(1, 2),
        blocks_per_stage=1,
        d_text=8,
        temb_dim=8,
        max_timestep=20,
    )
    with tg.precision(dtype):
        return assign_names(UNet(cfg, np.random.default_rng(seed)), "unet")


def desk_unet():
    with tg.precision(np.float32):
        return assign_names(UNet(UNetConfig(max_timestep=200), np.random.default_rng(1)), "unet")


def unet_forward(unet, seed=5):
    rng = np.random.default_rng(seed)
    cfg = unet.config
    z = Tensor(rng.standard_normal((1, cfg.latent_channels, cfg.latent_size, cfg.latent_size)).astype(np.float64))
    text = Tensor(rng.standard_normal((1, 4, cfg.d_text)).astype(np.float64))
    with tg.no_grad():
        return unet(z, 3, text).data


class TestInject:
    def test_desk_config_yields_32_rank4_adapters(self):
        unet = desk_unet()
        state = inject(unet, "unet", rank=4)
        assert len(state.adapters) == 32
        assert all(a.rank == 4 for a in state.adapters)
        assert set(a.target_name for a in state.adapters) == set(unet.cross_attention_weight_names())

    def test_zero_init_forward_bit_identical(self):
        unet = tiny_unet()
        before = unet_forward(unet)
        inject(unet, "unet", rank=2)
        after = unet_forward(unet)
        assert before.tobytes() == after.tobytes()

    def test_adapter_scalar_arithmetic(self):
        m = Module()
        m.proj = Linear(64, 64, np.random.default_rng(0), bias=False)
        assign_names(m, "m")
        state = inject(m, "m", patterns=("m.proj.weight",), rank=4)
        assert state.adapters[0].scalar_count() == 4 * 64 + 64 * 4 == 512
        report = trainable_report(state, m, "m")
        assert report["theta_count"] == 512
        assert report["phi0_count"] == 4096
        assert report["ratio"] == pytest.approx(512 / 4096)

    def test_trainable_sets_partition_parameters(self):
        unet = tiny_unet()
        state = inject(unet, "unet", rank=2)
        all_names = {p.name for p in unet.parameters()}
        assert state.frozen_names | state.trainable_names == all_names
        assert not (state.frozen_names & state.trainable_names)
        assert state.trainable_names == {
            n for n, p in ((p.name, p) for p in unet.parameters()) if p.trainable
        }
        report = trainable_report(state, unet, "unet")
        assert report["theta_count"] < report["phi0_count"]

    def test_desk_ratio_under_ten_percent(self):
        unet = desk_unet()
        state = inject(unet, "unet", rank=4)
        assert trainable_report(state, unet, "unet")["ratio"] < 0.1

    def test_zero_adapters_theta_zero(self):
        unet = tiny_unet()
        state = inject(unet, "unet", rank=2)
        state.adapters = []
        assert trainable_report(state, unet, "unet")["theta_count"] == 0

    def test_pattern_matching_nothing_rejected(self):
        unet = tiny_unet()
        with pytest.raises(AdapterTargetError):
            inject(unet, "unet", patterns=("*.does_not_exist.weight",), rank=2)

    def test_non_matrix_target_rejected(self):
        unet = tiny_unet()
        with pytest.raises(AdapterTargetError):
            inject(unet, "unet", patterns=("*.conv_in.bias",), rank=2)

    def test_double_injection_rejected(self):
        unet = tiny_unet()
        inject(unet, "unet", rank=2)
        with pytest.raises(AdapterStateError):
            inject(unet, "unet", rank=2)

    def test_rank_exceeding_dims_rejected(self):
        unet = tiny_unet()
        with pytest.raises(AdapterTargetError):
            inject(unet, "unet", rank=100)


class TestMergeUnmerge:
    def _randomize_adapters(self, state, seed=9):
        rng = np.random.default_rng(seed)
        for a in state.adapters:
            a.A.value.data = rng.standard_normal(a.A.value.data.shape).astype(a.A.value.data.dtype) * 0.1
            a.B.value.data = rng.standard_normal(a.B.value.data.shape).astype(a.B.value.data.dtype) * 0.1

    def test_merge_with_zero_b_is_noop_on_weights(self):
        unet = tiny_unet()
        state = inject(unet, "unet", rank=2)
        raw = {a.target_name: state.linears[a.target_name].weight.value.data.copy() for a in state.adapters}
        merge(state)
        for a in state.adapters:
            assert state.linears[a.target_name].weight.value.data.tobytes() == raw[a.target_name].tobytes()

    def test_merged_equals_wrapped_forward(self):
        unet = tiny_unet()
        state = inject(unet, "unet", rank=2)
        self._randomize_adapters(state)
        wrapped = unet_forward(unet)
        merge(state)
        merged = unet_forward(unet)
        assert np.abs(wrapped - merged).max() <= 1e-12

    def test_merge_unmerge_roundtrip(self):
        unet = tiny_unet()
        state = inject(unet, "unet", rank=2)
        self._randomize_adapters(state)
        originals = {a.target_name: state.linears[a.target_name].weight.value.data.copy() for a in state.adapters}
        merge(state)
        unmerge(state)
        for a in state.adapters:
            w = state.linears[a.target_name].weight.value.data
            assert np.abs(w - originals[a.target_name]).max() <= 1e-12

    def test_double_merge_and_bare_unmerge_rejected(self):
        unet = tiny_unet()
        state = inject(unet, "unet", rank=2)
        with pytest.raises(AdapterStateError):
            unmerge(state)
        merge(state)
        with pytest.raises(AdapterStateError):
            merge(state)


class TestFreezeContract:
    def _finetune_steps(self, unet, state, steps=5):
        cfg = unet.config
        rng = np.random.default_rng(3)
        params = [p for p in unet.parameters() if p.trainable]
        optim = AdamState(lr=1e-2)
        for _ in range(steps):
            z = Tensor(rng.standard_normal((1, cfg.latent_channels, cfg.latent_size, cfg.latent_size)).astype(np.float64))
            text = Tensor(rng.standard_normal((1, 4, cfg.d_text)).astype(np.float64))
            target = Tensor(rng.standard_normal(z.shape).astype(np.float64))
            diff = tg.sub(unet(z, 3, text), target)
            loss = tg.tmean(tg.mul(diff, diff))
            unet.zero_grad()
            loss.backward()
            adam_step(params, optim)

    def test_frozen_bytes_stable_and_adapters_move(self):
        unet = tiny_unet()
        state = inject(unet, "unet", rank=2)
        before = parameter_checksums(unet, "unet")
        self._finetune_steps(unet, state)
        record = verify_finetune_contract(before, unet, "unet", state)
        assert record["frozen_ok"]
        assert record["any_adapter_changed"]

    def test_frozen_drift_detected(self):
        unet = tiny_unet()
        state = inject(unet, "unet", rank=2)
        before = parameter_checksums(unet, "unet")
        victim = sorted(state.frozen_names)[0]
        for p in unet.parameters():
            if p.name == victim:
                p.value.data = p.value.data + 1.0
        with pytest.raises(FrozenParameterError) as exc:
            verify_finetune_contract(before, unet, "unet", state)
        assert victim in str(exc.value)


class TestAdapterFile:
    def test_roundtrip(self, tmp_path):
        unet = tiny_unet()
        state = inject(unet, "unet", rank=2)
        rng = np.random.default_rng(4)
        for a in state.adapters:
            a.A.value.data = rng.standard_normal(a.A.value.data.shape).astype(np.float64)
            a.B.value.data = rng.standard_normal(a.B.value.data.shape).astype(np.float64)
        path = tmp_path / "adapters.lora"
        save_adapters(state, path)
        entries = load_adapter_arrays(path)
        assert len(entries) == len(state.adapters)
        by_name = {e["target_name"]: e for e in entries}
        for a in state.adapters:
            e = by_name[a.target_name]
            assert e["rank"] == a.rank and e["alpha"] == a.alpha
            np.testing.assert_array_equal(e["A"], a.A.value.data.astype(np.float32))
            np.testing.assert_array_equal(e["B"], a.B.value.data.astype(np.float32))

    def test_apply_to_fresh_model_matches(self, tmp_path):
        with tg.precision(np.float32):
            unet = tiny_unet(dtype=np.float32)
            state = inject(unet, "unet", rank=2)
            rng = np.random.default_rng(5)
            for a in state.adapters:
                a.A.value.data = rng.standard_normal(a.A.value.data.shape).astype(np.float32)
                a.B.value.data = rng.standard_normal(a.B.value.data.shape).astype(np.float32)
            path = tmp_path / "adapters.lora"
            save_adapters(state, path)

            fresh = tiny_unet(dtype=np.float32)
            apply_adapter_arrays(fresh, "unet", load_adapter_arrays(path))
        rng2 = np.random.default_rng(6)
        z = Tensor(rng2.standard_normal((1, 2, 4, 4)).astype(np.float32))
        text = Tensor(rng2.standard_normal((1, 4, 8)).astype(np.float32))
        with tg.no_grad():
            a_out = unet(z, 3, text).data
            b_out = fresh(z, 3, text).data
        assert a_out.tobytes() == b_out.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.lora"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(AdapterStateError):
            load_adapter_arrays(path)
