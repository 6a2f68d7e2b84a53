import numpy as np
import pytest

from zsvr import latentwarp as lw
from zsvr.flow import warp


def test_predict_x0_abar_one_is_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 4, 3))
    eps = rng.standard_normal((4, 4, 3))
    assert np.array_equal(lw.predict_x0(x, eps, 1.0), x)


def test_predict_x0_inverts_forward_noising():
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((5, 5, 3))
    eps = rng.standard_normal((5, 5, 3))
    abar = 0.37
    x_t = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * eps
    assert np.abs(lw.predict_x0(x_t, eps, abar) - x0).max() <= 1e-6


def test_predict_x0_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    x_t = rng.standard_normal((3, 4, 2))
    eps = rng.standard_normal((3, 4, 2))
    abar = 0.6
    got = lw.predict_x0(x_t, eps, abar)
    for y in range(3):
        for x in range(4):
            for c in range(2):
                want = (x_t[y, x, c] - np.sqrt(1 - abar) * eps[y, x, c]) / np.sqrt(abar)
                assert abs(got[y, x, c] - want) <= 1e-12


def test_predict_x0_rejects_bad_abar():
    x = np.zeros((2, 2, 3))
    with pytest.raises(ValueError, match="abar"):
        lw.predict_x0(x, x, 0.0)
    with pytest.raises(ValueError, match="abar"):
        lw.predict_x0(x, x, 1.5)


def test_blend_warped_is_convex_combination():
    rng = np.random.default_rng(3)
    own = rng.standard_normal((6, 6, 3))
    source = rng.standard_normal((6, 6, 3))
    fl = rng.uniform(-2, 2, (6, 6, 2))
    mask = rng.random((6, 6))
    out = lw.blend_warped(own, source, fl, mask)
    warped = warp(source, fl)
    lo = np.minimum(own, warped)
    hi = np.maximum(own, warped)
    assert np.all(out >= lo - 1e-12)
    assert np.all(out <= hi + 1e-12)


def test_chain_mask_one_keeps_keyframes():
    rng = np.random.default_rng(4)
    kfs = [rng.standard_normal((4, 4, 3)) for _ in range(3)]
    flows = [rng.uniform(-1, 1, (4, 4, 2)) for _ in range(2)]
    masks = [np.ones((4, 4))] * 2
    out = lw.warp_keyframe_chain(kfs, flows, masks)
    for a, b in zip(out, kfs):
        assert np.array_equal(a, b)


def test_chain_mask_zero_zero_flow_copies_first():
    rng = np.random.default_rng(5)
    kfs = [rng.standard_normal((4, 4, 3)) for _ in range(4)]
    flows = [np.zeros((4, 4, 2))] * 3
    masks = [np.zeros((4, 4))] * 3
    out = lw.warp_keyframe_chain(kfs, flows, masks)
    for latent in out:
        assert np.allclose(latent, kfs[0])


def test_chain_matches_elementwise_oracle():
    rng = np.random.default_rng(6)
    kfs = [rng.standard_normal((5, 5, 3)) for _ in range(3)]
    flows = [rng.uniform(-1.5, 1.5, (5, 5, 2)) for _ in range(2)]
    masks = [(rng.random((5, 5)) < 0.5).astype(float) for _ in range(2)]
    out = lw.warp_keyframe_chain(kfs, flows, masks)
    # apply the blend twice by hand, on the updated predecessor each time
    prev = kfs[0]
    want = [prev]
    for i in range(1, 3):
        m = masks[i - 1][:, :, None]
        cur = m * kfs[i] + (1 - m) * warp(prev, flows[i - 1])
        want.append(cur)
        prev = cur
    for a, b in zip(out, want):
        assert np.abs(a - b).max() <= 1e-12


def test_chain_uses_updated_predecessor_not_original():
    # with M=0 and zero flows, keyframe 2 must equal keyframe 0, which only
    # happens if keyframe 1's update feeds forward
    kfs = [np.full((2, 2, 3), v) for v in (1.0, 2.0, 3.0)]
    flows = [np.zeros((2, 2, 2))] * 2
    masks = [np.zeros((2, 2))] * 2
    out = lw.warp_keyframe_chain(kfs, flows, masks)
    assert np.allclose(out[2], 1.0)


def test_chain_length_validation():
    kfs = [np.zeros((2, 2, 3))] * 3
    with pytest.raises(ValueError, match="need 2"):
        lw.warp_keyframe_chain(kfs, [np.zeros((2, 2, 2))], [np.zeros((2, 2))])


def test_propagate_keyframe_copies_unchanged():
    rng = np.random.default_rng(7)
    kf = rng.standard_normal((4, 4, 3))
    members = [kf.copy(), kf.copy()]
    flows = [np.zeros((4, 4, 2))] * 2
    masks = [np.zeros((4, 4))] * 2
    out = lw.propagate_to_batch(kf, members, flows, masks)
    for latent in out:
        assert np.allclose(latent, kf)


def test_propagate_masked_member_untouched():
    rng = np.random.default_rng(8)
    kf = rng.standard_normal((4, 4, 3))
    member = rng.standard_normal((4, 4, 3))
    out = lw.propagate_to_batch(
        kf, [member], [rng.uniform(-1, 1, (4, 4, 2))], [np.ones((4, 4))]
    )
    assert np.array_equal(out[0], member)


def test_propagate_matches_per_member_oracle():
    rng = np.random.default_rng(9)
    kf = rng.standard_normal((5, 5, 3))
    members = [rng.standard_normal((5, 5, 3)) for _ in range(3)]
    flows = [rng.uniform(-1, 1, (5, 5, 2)) for _ in range(3)]
    masks = [(rng.random((5, 5)) < 0.5).astype(float) for _ in range(3)]
    out = lw.propagate_to_batch(kf, members, flows, masks)
    for i in range(3):
        m = masks[i][:, :, None]
        want = m * members[i] + (1 - m) * warp(kf, flows[i])
        assert np.abs(out[i] - want).max() <= 1e-12


def test_propagate_count_mismatch():
    kf = np.zeros((2, 2, 3))
    with pytest.raises(ValueError, match="per batch member"):
        lw.propagate_to_batch(kf, [kf], [], [])
