import pytest
import torch

from egworld.conditioning import (
    CameraEncoder,
    CondInputs,
    ConditioningError,
    CrossAttnBridge,
    HandAdaLN,
    MotionEncoder,
    Strategy,
    control_pixel_channels,
    parse_strategy,
    require_inputs,
    strategy_alias,
    uses_camera,
    uses_control_video,
    uses_motion,
)


def test_parse_strategy_aliases():
    assert parse_strategy("concat") is Strategy.TOKEN_CONCAT
    assert parse_strategy("add") is Strategy.TOKEN_ADD
    assert parse_strategy("xattn") is Strategy.CROSS_ATTN
    assert parse_strategy("skeleton") is Strategy.SKELETON
    assert parse_strategy("mask") is Strategy.MASK
    assert parse_strategy("token_concat") is Strategy.TOKEN_CONCAT
    assert parse_strategy("NONE") is Strategy.NONE
    for s in Strategy:
        assert parse_strategy(strategy_alias(s)) is s
    with pytest.raises(ConditioningError, match="unknown strategy"):
        parse_strategy("telepathy")


def test_strategy_requirements_table():
    assert not uses_motion(Strategy.NONE) and not uses_motion(Strategy.SKELETON)
    assert uses_motion(Strategy.TOKEN_ADD) and uses_motion(Strategy.JOINT)
    assert uses_control_video(Strategy.MASK) and uses_control_video(Strategy.HYBRID)
    assert not uses_control_video(Strategy.ADALN)
    assert uses_camera(Strategy.JOINT) and not uses_camera(Strategy.HYBRID)
    assert control_pixel_channels(Strategy.MASK) == 1
    assert control_pixel_channels(Strategy.SKELETON) == 3
    assert control_pixel_channels(Strategy.TOKEN_ADD) == 0


def test_require_inputs_reports_missing():
    scene = torch.zeros(1, 16)
    with pytest.raises(ConditioningError, match="hpp"):
        require_inputs(Strategy.TOKEN_ADD, CondInputs(scene=scene))
    with pytest.raises(ConditioningError, match="control_latent"):
        require_inputs(Strategy.MASK, CondInputs(scene=scene))
    with pytest.raises(ConditioningError, match="pluecker"):
        require_inputs(
            Strategy.JOINT,
            CondInputs(scene=scene, hpp=torch.zeros(1, 2, 52),
                       control_latent=torch.zeros(1, 2, 12, 24, 24)),
        )
    require_inputs(Strategy.NONE, CondInputs(scene=scene))


def test_motion_encoder_shapes_and_zero_tail():
    enc = MotionEncoder(52, 16, 32).double()
    with torch.no_grad():
        enc.out.weight.zero_()
        enc.out.bias.zero_()
    hpp = torch.randn(3, 7, 52, dtype=torch.float64)
    out = enc(hpp)
    assert out.shape == (3, 7, 32)
    assert torch.all(out == 0)
    with pytest.raises(ConditioningError):
        enc(torch.zeros(3, 52, dtype=torch.float64))


def test_camera_encoder_token_grid():
    enc = CameraEncoder(hidden=8, width=32, token_stride=8).double()
    rays = torch.randn(2, 3, 6, 48, 48, dtype=torch.float64)
    out = enc(rays)
    assert out.shape == (2, 3 * 36, 32)
    with pytest.raises(ConditioningError):
        enc(torch.randn(2, 3, 6, 50, 48, dtype=torch.float64))


def test_hand_adaln_identity_at_zero():
    mod = HandAdaLN(16).double()
    with torch.no_grad():
        mod.mod.weight.zero_()
        mod.mod.bias.zero_()
    x = torch.randn(2, 8, 16, dtype=torch.float64)
    motion = torch.randn(2, 2, 16, dtype=torch.float64)
    torch.testing.assert_close(mod(x, motion, 4), x, rtol=0, atol=0)
    # non-zero modulation actually changes the activations
    with torch.no_grad():
        mod.mod.weight.normal_()
    assert not torch.allclose(mod(x, motion, 4), x)


def test_cross_attn_bridge_noop_at_zero_out():
    bridge = CrossAttnBridge(32, 4).double()
    with torch.no_grad():
        bridge.out.weight.zero_()
        bridge.out.bias.zero_()
    x = torch.randn(2, 9, 32, dtype=torch.float64)
    motion = torch.randn(2, 3, 32, dtype=torch.float64)
    torch.testing.assert_close(bridge(x, motion), x, rtol=0, atol=0)
    with torch.no_grad():
        bridge.out.weight.normal_()
    assert not torch.allclose(bridge(x, motion), x)
