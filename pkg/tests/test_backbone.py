import numpy as np
import pytest
import torch

from egworld.backbone import (
    CheckpointError,
    LoRALinear,
    ModelConfig,
    VelocityModel,
    apply_lora,
    build_velocity_model,
    copy_shared_parameters,
    dither_parameters,
    init_parameters,
    load_checkpoint,
    merge_lora,
    save_checkpoint,
    timestep_features,
)
from egworld.codec import encode_video
from egworld.conditioning import CondInputs, ConditioningError, Strategy, control_pixel_channels

SMALL = dict(depth=2, width=32, heads=2, mlp_ratio=2.0, patch=4, stride=2,
             channels=3, image_size=(48, 48), max_frames=8)

ALL_STRATEGIES = ["none", "token_concat", "token_add", "adaln", "cross_attn",
                  "skeleton_video", "binary_mask", "hybrid", "joint"]


def make_inputs(strategy: str, b=2, f=3, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    scene = torch.randn(b, 16, generator=g, dtype=dtype)
    hpp = torch.randn(b, f, 52, generator=g, dtype=dtype)
    cc = control_pixel_channels(Strategy(strategy)) or 3
    video = torch.randn(b, f, cc, 48, 48, generator=g, dtype=dtype)
    control = encode_video(video, 2)
    rays = torch.randn(b, f, 6, 48, 48, generator=g, dtype=dtype)
    return CondInputs(scene=scene, hpp=hpp, control_latent=control, pluecker=rays)


def make_z(b=2, f=3, seed=1, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, f, 12, 24, 24, generator=g, dtype=dtype)


@pytest.mark.parametrize("strategy", ALL_STRATEGIES)
def test_forward_shapes_and_zero_at_init(strategy):
    cfg = ModelConfig(strategy=strategy, **SMALL)
    model = build_velocity_model(cfg, seed=3, dtype=torch.float64)
    z = make_z()
    cond = model.encode_conditioning(make_inputs(strategy))
    t = torch.tensor([0.3, 0.8])
    v = model(z, t.double(), cond)
    assert v.shape == z.shape
    # zero-init head: the velocity field starts exactly at zero
    assert torch.all(v == 0)


@pytest.mark.parametrize("strategy", ALL_STRATEGIES[1:])
def test_zero_init_equivalence_nontrivial(strategy):
    base_cfg = ModelConfig(strategy="none", **SMALL)
    cond_cfg = ModelConfig(strategy=strategy, **SMALL)
    base = build_velocity_model(base_cfg, seed=11, dtype=torch.float64)
    cond = build_velocity_model(cond_cfg, seed=11, dtype=torch.float64)
    # make the shared network non-trivial the same way on both sides
    dither_parameters(base, seed=21, scale=0.05)
    dither_parameters(cond, seed=21, scale=0.05)
    cond.zero_conditioning_branches()

    z = make_z()
    t = torch.tensor([0.25, 0.9], dtype=torch.float64)
    scene = make_inputs("none").scene
    v_base = base(z, t, base.encode_conditioning(CondInputs(scene=scene)))
    v_cond = cond(z, t, cond.encode_conditioning(make_inputs(strategy)))
    assert v_base.abs().max() > 1e-3  # the comparison is not vacuous
    torch.testing.assert_close(v_cond, v_base, rtol=0, atol=1e-12)


def test_conditioning_changes_output_once_branches_are_live():
    cfg = ModelConfig(strategy="token_add", **SMALL)
    model = build_velocity_model(cfg, seed=5, dtype=torch.float64)
    dither_parameters(model, seed=6, scale=0.05)  # includes conditioning branches
    z = make_z()
    t = torch.tensor([0.4, 0.6], dtype=torch.float64)
    a = model(z, t, model.encode_conditioning(make_inputs("token_add", seed=7)))
    b = model(z, t, model.encode_conditioning(make_inputs("token_add", seed=8)))
    assert not torch.allclose(a, b)


def test_init_deterministic_and_shared_across_strategies():
    cfg_a = ModelConfig(strategy="adaln", **SMALL)
    cfg_b = ModelConfig(strategy="joint", **SMALL)
    a1 = build_velocity_model(cfg_a, seed=9, dtype=torch.float64)
    a2 = build_velocity_model(cfg_a, seed=9, dtype=torch.float64)
    b = build_velocity_model(cfg_b, seed=9, dtype=torch.float64)
    pa1 = dict(a1.named_parameters())
    pa2 = dict(a2.named_parameters())
    pb = dict(b.named_parameters())
    for name in pa1:
        torch.testing.assert_close(pa1[name], pa2[name], rtol=0, atol=0)
    shared = [n for n in pa1 if n in pb and pa1[n].shape == pb[n].shape
              and ".hand_adaln." not in n]
    assert len(shared) > 10
    for name in shared:
        torch.testing.assert_close(pa1[name], pb[name], rtol=0, atol=0)
    a3 = build_velocity_model(cfg_a, seed=10, dtype=torch.float64)
    assert any(not torch.equal(pa1[n], p) for n, p in a3.named_parameters())


def test_copy_shared_parameters_reproduces_baseline():
    base = build_velocity_model(ModelConfig(strategy="none", **SMALL), 1, torch.float64)
    dither_parameters(base, seed=2)
    cond = build_velocity_model(ModelConfig(strategy="hybrid", **SMALL), 99, torch.float64)
    copy_shared_parameters(base, cond)
    cond.zero_conditioning_branches()
    z = make_z()
    t = torch.tensor([0.1, 0.7], dtype=torch.float64)
    scene = make_inputs("none").scene
    va = base(z, t, base.encode_conditioning(CondInputs(scene=scene)))
    vb = cond(z, t, cond.encode_conditioning(make_inputs("hybrid")))
    torch.testing.assert_close(vb, va, rtol=0, atol=1e-12)


def test_shape_validation_errors():
    model = build_velocity_model(ModelConfig(strategy="none", **SMALL), 0, torch.float64)
    scene = torch.zeros(1, 16, dtype=torch.float64)
    cond = model.encode_conditioning(CondInputs(scene=scene))
    with pytest.raises(ConditioningError, match="channels"):
        model(torch.zeros(1, 2, 7, 24, 24, dtype=torch.float64), torch.zeros(1), cond)
    with pytest.raises(ConditioningError, match="frame"):
        model(torch.zeros(1, 9, 12, 24, 24, dtype=torch.float64), torch.zeros(1), cond)
    with pytest.raises(ConditioningError, match="spatial"):
        model(torch.zeros(1, 2, 12, 12, 24, dtype=torch.float64), torch.zeros(1), cond)


def test_timestep_features():
    t = torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64)
    f = timestep_features(t)
    assert f.shape == (3, 64)
    np.testing.assert_allclose(f[0, :32], 0.0, atol=1e-15)
    np.testing.assert_allclose(f[0, 32:], 1.0, atol=1e-15)
    assert not torch.allclose(f[1], f[2])


def test_suppression_flags_silence_branches():
    cfg = ModelConfig(strategy="joint", **SMALL)
    model = build_velocity_model(cfg, seed=4, dtype=torch.float64)
    dither_parameters(model, seed=5)
    inputs = make_inputs("joint")
    z = make_z()
    t = torch.tensor([0.2, 0.6], dtype=torch.float64)
    full = model(z, t, model.encode_conditioning(inputs))
    no_cam = model(z, t, model.encode_conditioning(inputs, suppress_camera=True))
    no_hand = model(z, t, model.encode_conditioning(inputs, suppress_motion=True))
    assert not torch.allclose(full, no_cam)
    assert not torch.allclose(full, no_hand)
    cache = model.encode_conditioning(inputs, suppress_motion=True)
    assert cache.motion is None
    assert torch.all(cache.control_latent == 0)
    cache2 = model.encode_conditioning(inputs, suppress_camera=True)
    assert cache2.camera_tokens is None


def test_lora_identity_then_merge():
    cfg = ModelConfig(strategy="none", **SMALL)
    model = build_velocity_model(cfg, seed=13, dtype=torch.float64)
    dither_parameters(model, seed=14)
    z = make_z()
    t = torch.tensor([0.33, 0.66], dtype=torch.float64)
    scene = make_inputs("none").scene
    cond = model.encode_conditioning(CondInputs(scene=scene))
    before = model(z, t, cond)

    wrapped = apply_lora(model, rank=4, alpha=16.0)
    assert len(wrapped) == 4 * cfg.depth
    # fresh adapters: B is zero, so the function is unchanged
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".lora_a"):
                p.normal_(0, 0.25)
    after_wrap = model(z, t, cond)
    torch.testing.assert_close(after_wrap, before, rtol=0, atol=1e-12)

    # train-like perturbation of B makes LoRA active; merging reproduces it
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".lora_b"):
                p.normal_(0, 0.05)
    active = model(z, t, cond)
    assert not torch.allclose(active, before)
    n = merge_lora(model)
    assert n == len(wrapped)
    assert not any(isinstance(m, LoRALinear) for m in model.modules())
    merged = model(z, t, cond)
    torch.testing.assert_close(merged, active, rtol=0, atol=1e-10)


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(strategy="hybrid", **SMALL)
    model = build_velocity_model(cfg, seed=17, dtype=torch.float32)
    dither_parameters(model, seed=18)
    path = str(tmp_path / "m.egwt")
    save_checkpoint(path, model, {"step": 123, "note": "unit"})
    loaded, extra = load_checkpoint(path)
    assert extra == {"step": 123, "note": "unit"}
    assert loaded.cfg == cfg
    sa = model.state_dict()
    sb = loaded.state_dict()
    assert set(sa) == set(sb)
    for k in sa:
        torch.testing.assert_close(sb[k], sa[k], rtol=0, atol=0)
    z = make_z(dtype=torch.float32)
    t = torch.tensor([0.5, 0.25], dtype=torch.float32)
    inp = make_inputs("hybrid", dtype=torch.float32)
    torch.testing.assert_close(
        loaded(z, t, loaded.encode_conditioning(inp)),
        model(z, t, model.encode_conditioning(inp)),
        rtol=0, atol=0,
    )


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.egwt"
    p.write_bytes(b"WHAT" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(p))
