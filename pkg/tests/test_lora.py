import numpy as np
import pytest
import torch

from spectrumfm.encoder import EncoderConfig, SpectrumEncoder
from spectrumfm.errors import AdapterStateError, ConfigError, NothingToTrainError, ShapeMapError
from spectrumfm.lora import (
    LoRAAdapter,
    LoRAConfig,
    adapter_state,
    adapters,
    attach_adapters,
    count_adapter_parameters,
    effective_weight,
    load_adapters,
    merge_adapters,
    save_adapters,
    trainable_fraction,
    unmerge_adapters,
)
from spectrumfm.signals import Task
from spectrumfm.tasks import FineTuneConfig, TaskHeadConfig, TaskModel, finetune

TOY = EncoderConfig(d=16, d_ff=32, H=2, L=2, N=16, dropout=0.0)


def _encoder(cfg=TOY, seed=0):
    torch.manual_seed(seed)
    return SpectrumEncoder(cfg).double().eval()


def _randomize_b(model, seed=1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for a in adapters(model).values():
            a.B.copy_(torch.randn(a.B.shape, generator=g, dtype=a.B.dtype) * 0.05)


def test_adapter_shapes_and_init():
    ad = LoRAAdapter(64, 64, 8, 16.0, "blocks.0.attention.w_q")
    assert ad.A.shape == (64, 8) and ad.B.shape == (8, 64)
    assert torch.all(ad.B == 0)
    assert sum(p.numel() for p in ad.parameters()) == 1024
    torch.manual_seed(0)
    big = LoRAAdapter(4096, 8, 8, 1.0, "x")
    assert big.A.std().item() == pytest.approx(0.01, rel=0.05)


def test_default_dimension_count():
    ad = LoRAAdapter(256, 256, 8, 16.0, "w_q")
    assert sum(p.numel() for p in ad.parameters()) == 4096


def test_effective_weight_rank_and_formula():
    torch.manual_seed(0)
    ad = LoRAAdapter(32, 24, 4, 2.0, "x").double()
    with torch.no_grad():
        ad.B.normal_()
    W = torch.randn(32, 24, dtype=torch.float64)
    eff = effective_weight(W, ad)
    torch.testing.assert_close(eff, W + 2.0 * ad.A @ ad.B)
    assert torch.linalg.matrix_rank(eff - W).item() <= 4


def test_zero_init_matches_base_outputs():
    enc = _encoder()
    adapted = attach_adapters(enc, LoRAConfig(a=4))
    x = torch.rand(3, 2, 16, dtype=torch.float64)
    assert (enc(x) - adapted(x)).abs().max().item() <= 1e-6


def test_attach_copies_by_default_and_freezes_base():
    enc = _encoder()
    adapted = attach_adapters(enc, LoRAConfig(a=4))
    assert not adapters(enc)
    assert len(adapters(adapted)) == TOY.L * 4
    for name, p in adapted.named_parameters():
        assert p.requires_grad == (".lora." in name), name


def test_rank_must_stay_below_width():
    with pytest.raises(ConfigError):
        attach_adapters(_encoder(), LoRAConfig(a=16))
    with pytest.raises(ConfigError):
        LoRAConfig(target_sites=("w_x",))


def test_ffn_sites_are_supported():
    adapted = attach_adapters(_encoder(), LoRAConfig(a=4, target_sites=("w1", "w2")))
    refs = sorted(adapters(adapted))
    assert refs[0] == "blocks.0.ffn1.w1" and len(refs) == TOY.L * 2 * 2


def test_double_attach_rejected():
    adapted = attach_adapters(_encoder(), LoRAConfig(a=4))
    with pytest.raises(AdapterStateError):
        attach_adapters(adapted, LoRAConfig(a=4))


def test_default_model_counts_and_fraction():
    torch.manual_seed(0)
    model = TaskModel(SpectrumEncoder(EncoderConfig()), TaskHeadConfig.for_task(Task.SS))
    model = attach_adapters(model, LoRAConfig(), inplace=True)
    assert count_adapter_parameters(model) == 262_144
    assert trainable_fraction(model) <= 0.03


def test_nothing_trainable():
    enc = _encoder()
    for p in enc.parameters():
        p.requires_grad_(False)
    with pytest.raises(NothingToTrainError):
        trainable_fraction(enc)


def test_merge_unmerge_equivalence():
    cfg = LoRAConfig(a=4)
    adapted = attach_adapters(_encoder(), cfg)
    _randomize_b(adapted)
    x = torch.rand(3, 2, 16, dtype=torch.float64)
    merged = merge_adapters(adapted)
    assert not adapters(merged)
    assert (merged(x) - adapted(x)).abs().max().item() <= 1e-6
    with pytest.raises(AdapterStateError):
        merge_adapters(merged)
    restored = unmerge_adapters(merged, adapter_state(adapted), cfg)
    assert (restored(x) - adapted(x)).abs().max().item() <= 1e-6
    w0 = _encoder().blocks[0].attention.w_q.weight
    torch.testing.assert_close(restored.blocks[0].attention.w_q.weight, w0, atol=1e-12, rtol=0)


def test_frozen_tensors_bit_identical_after_100_steps():
    enc = _encoder().float()
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    rng = np.random.default_rng(0)
    x = rng.random((64, 2, 16)).astype(np.float32)
    y = rng.integers(0, 2, 64)
    cfg = FineTuneConfig(batch_size=8, epochs=100, max_steps=100, lora=LoRAConfig(a=4))
    res = finetune(enc, TaskHeadConfig.for_task(Task.SS, gru_hidden=8), (x, y), (x[:16], y[:16]), cfg)
    assert res.steps == 100
    after = res.model.encoder.state_dict()
    for k, v in before.items():
        assert torch.equal(after[k], v), k
    # adapters did move
    assert any(a.B.abs().sum() > 0 for a in adapters(res.model).values())
    # the caller's encoder is untouched and unadapted
    assert not adapters(enc)


def test_adapter_archive_round_trip(tmp_path):
    cfg = LoRAConfig(a=4)
    adapted = attach_adapters(_encoder(), cfg)
    _randomize_b(adapted)
    save_adapters(tmp_path / "ad.safetensors", adapted, cfg)
    fresh = load_adapters(tmp_path / "ad.safetensors", _encoder())
    x = torch.rand(2, 2, 16, dtype=torch.float64)
    assert torch.equal(fresh(x), adapted(x))
    for k, v in adapter_state(adapted).items():
        assert torch.equal(adapter_state(fresh)[k], v)


def test_adapter_archive_shape_mismatch_names_sites(tmp_path):
    cfg = LoRAConfig(a=4)
    save_adapters(tmp_path / "ad.safetensors", attach_adapters(_encoder(), cfg), cfg)
    wider = _encoder(EncoderConfig(d=32, d_ff=32, H=2, L=2, N=16, dropout=0.0))
    with pytest.raises(ShapeMapError) as info:
        load_adapters(tmp_path / "ad.safetensors", wider)
    assert "blocks.0.attention.w_q" in info.value.sites
    deeper = _encoder(EncoderConfig(d=16, d_ff=32, H=2, L=3, N=16, dropout=0.0))
    with pytest.raises(ShapeMapError) as info:
        load_adapters(tmp_path / "ad.safetensors", deeper)
    assert info.value.sites == [f"blocks.2.attention.{s}" for s in ("w_k", "w_o", "w_q", "w_v")]
