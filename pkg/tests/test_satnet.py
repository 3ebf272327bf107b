import numpy as np
import pytest

from satbev import satnet
from satbev import tensor as T
from satbev.satnet import ChannelPlan, GatedCnnConfig, gated_cnn, gfr, gfr_step, init_sat_params
from satbev.tensor import Tensor

from helpers import check_grads

CFG = GatedCnnConfig()
MICRO_PLAN = ChannelPlan(widths=(3, 3, 6, 12, 24), c_out=6)
MICRO_BEV = (20, 10)


def micro_params(seed=0, variant="full"):
    return init_sat_params(np.random.default_rng(seed), MICRO_PLAN, CFG, variant=variant)


def micro_patch(seed=1, h=64, w=32):
    return Tensor(np.random.default_rng(seed).normal(scale=0.5, size=(3, h, w)))


# ---------------------------------------------------------------------------
# channel arithmetic (Eq. 4 split)

def test_channel_split_d96():
    g, i, c = CFG.channel_split(96)
    assert (g, i, c) == (256, 160, 96)
    assert CFG.expanded_width(96) == 512
    assert g == i + c


def test_channel_split_every_default_level():
    plan = ChannelPlan()
    for lvl in range(4):
        d = plan.concat_width(lvl)
        g, i, c = CFG.channel_split(d)
        assert g == i + c
        assert CFG.expanded_width(d) == 2 * g


def test_channel_split_concat_width_144():
    plan = ChannelPlan()
    assert plan.concat_width(3) == 144
    assert 144 % 3 == 0
    assert CFG.channel_split(144)[0] == 384  # gamma * 144


def test_channel_split_rejects_non_integral():
    with pytest.raises(ValueError, match="gamma"):
        CFG.channel_split(100)  # 8/3 * 100 not integral


def test_channel_plan_rejects_bad_concat_widths():
    with pytest.raises(ValueError, match="divisible by 3"):
        ChannelPlan(widths=(10, 12, 24, 48, 96))


# ---------------------------------------------------------------------------
# pyramid extraction

def test_pyramid_shapes_default_plan():
    plan = ChannelPlan()
    params = init_sat_params(np.random.default_rng(0), plan, CFG)
    pyr = satnet.extract_pyramid(Tensor(np.zeros((3, 224, 96))), params, plan, (100, 50))
    assert [tuple(lv.shape) for lv in pyr.levels] == [
        (12, 56, 24), (24, 28, 12), (48, 14, 6), (96, 7, 3)
    ]
    assert pyr.r0.shape == (12, 100, 50)


def test_pyramid_rejects_indivisible_extents():
    params = micro_params()
    with pytest.raises(ValueError, match="divisible by 32"):
        satnet.extract_pyramid(Tensor(np.zeros((3, 60, 32))), params, MICRO_PLAN, MICRO_BEV)


def test_zero_patch_zero_bias_gives_zero_pyramid():
    params = micro_params()
    pyr = satnet.extract_pyramid(Tensor(np.zeros((3, 64, 32))), params, MICRO_PLAN, MICRO_BEV)
    assert np.all(pyr.r0.data == 0.0)
    for lv in pyr.levels:
        assert np.all(lv.data == 0.0)


# ---------------------------------------------------------------------------
# pre-alignment conv

def test_pre_align_identity_kernel():
    params = micro_params()
    d = MICRO_PLAN.widths[1]
    w = np.zeros((d, d, 3, 3))
    for ch in range(d):
        w[ch, ch, 1, 1] = 1.0
    params["sat.align1.w"] = Tensor(w, requires_grad=True)
    params["sat.align1.b"] = Tensor(np.zeros(d), requires_grad=True)
    x = Tensor(np.random.default_rng(2).normal(size=(d, 6, 5)))
    out = satnet.pre_align_conv(x, params, 1)
    np.testing.assert_allclose(out.data, x.data, atol=1e-15)


def test_pre_align_impulse_footprint():
    params = micro_params(seed=3)
    d = MICRO_PLAN.widths[0]
    x = np.zeros((d, 9, 9))
    x[0, 4, 4] = 1.0
    out = satnet.pre_align_conv(Tensor(x), params, 0)
    nz_rows, nz_cols = np.nonzero(np.abs(out.data).sum(axis=0))[0], np.nonzero(np.abs(out.data).sum(axis=0))[1]
    assert nz_rows.min() >= 3 and nz_rows.max() <= 5
    assert nz_cols.min() >= 3 and nz_cols.max() <= 5


def test_pre_align_gradients():
    params = micro_params(seed=4)
    d = MICRO_PLAN.widths[0]
    x = Tensor(np.random.default_rng(5).normal(size=(d, 4, 4)), requires_grad=True)
    probe = {"x": x, "w": params["sat.align0.w"], "b": params["sat.align0.b"]}

    def loss():
        y = satnet.pre_align_conv(x, params, 0)
        return T.sum_all(T.mul(y, y))

    check_grads(loss, probe, tol=1e-4)


# ---------------------------------------------------------------------------
# gated block

def test_gate_closure_reduces_to_final_projection_bitwise():
    params = micro_params(seed=6)
    dcat = MICRO_PLAN.concat_width(0)  # 6
    ex = CFG.expanded_width(dcat)
    params["sat.gfr0.expand.w"] = Tensor(np.zeros((ex, dcat)), requires_grad=True)
    params["sat.gfr0.expand.b"] = Tensor(np.zeros(ex), requires_grad=True)
    for trial in range(5):
        x = Tensor(np.random.default_rng(10 + trial).normal(size=(dcat, 5, 4)))
        out = gated_cnn(x, params, "sat.gfr0", CFG, MICRO_PLAN.widths[0])
        direct = T.channel_project(x, params["sat.gfr0.out.w"], params["sat.gfr0.out.b"])
        np.testing.assert_array_equal(out.data, direct.data)


def test_gate_saturation_closes_contribution():
    # when every gate channel input is <= -10 the modulated path vanishes
    params = micro_params(seed=7)
    dcat = MICRO_PLAN.concat_width(0)
    g, i, c = CFG.channel_split(dcat)
    ex = CFG.expanded_width(dcat)
    w = np.zeros((ex, dcat))
    b = np.zeros(ex)
    b[:g] = -10.0  # force gate pre-activations to -10 everywhere
    rng = np.random.default_rng(8)
    w[g:] = rng.normal(size=(ex - g, dcat))
    params["sat.gfr0.expand.w"] = Tensor(w, requires_grad=True)
    params["sat.gfr0.expand.b"] = Tensor(b, requires_grad=True)
    x_arr = rng.normal(size=(dcat, 4, 4))
    x = Tensor(x_arr)
    out = gated_cnn(x, params, "sat.gfr0", CFG, MICRO_PLAN.widths[0])
    # residual-only reference: projection bias path with s = 0 exactly
    ref = T.channel_project(x, params["sat.gfr0.out.w"], params["sat.gfr0.out.b"])
    resid_mag = np.abs(x_arr).max()
    assert np.max(np.abs(out.data - ref.data)) < 1e-6 * resid_mag


def test_gated_block_gradients_every_parameter():
    params = micro_params(seed=9)
    dcat = MICRO_PLAN.concat_width(0)
    x = Tensor(np.random.default_rng(11).normal(size=(dcat, 3, 3)), requires_grad=True)
    probe = {k: v for k, v in params.items() if k.startswith("sat.gfr0.")}
    probe["x"] = x

    def loss():
        y = gated_cnn(x, params, "sat.gfr0", CFG, MICRO_PLAN.widths[0])
        return T.sum_all(T.mul(y, y))

    check_grads(loss, probe, tol=1e-3)


# ---------------------------------------------------------------------------
# refinement steps

def test_gfr_step_shape_contract():
    plan = ChannelPlan()
    params = init_sat_params(np.random.default_rng(12), plan, CFG)
    r4 = Tensor(np.random.default_rng(13).normal(size=(96, 7, 3)))
    r3 = Tensor(np.random.default_rng(14).normal(size=(48, 14, 6)))
    out = gfr_step(r4, r3, 3, params, plan, CFG, "full")
    assert out.shape == (48, 14, 6)


def test_gfr_step_rejects_extent_inversion():
    params = micro_params(seed=15)
    big = Tensor(np.zeros((24, 8, 4)))
    small = Tensor(np.zeros((12, 4, 2)))
    with pytest.raises(ValueError, match="lower level"):
        gfr_step(big, small, 3, params, MICRO_PLAN, CFG, "full")


def test_gfr_step_deterministic():
    params = micro_params(seed=16)
    hi = Tensor(np.random.default_rng(17).normal(size=(24, 2, 1)))
    lo = Tensor(np.random.default_rng(18).normal(size=(12, 4, 2)))
    a = gfr_step(hi, lo, 3, params, MICRO_PLAN, CFG, "full")
    b = gfr_step(hi, lo, 3, params, MICRO_PLAN, CFG, "full")
    np.testing.assert_array_equal(a.data, b.data)


def test_gfr_output_shape_and_variant_compatibility():
    patch = micro_patch()
    for variant in ("full", "gfr_star"):
        params = micro_params(seed=19, variant=variant)
        pyr = satnet.extract_pyramid(patch, params, MICRO_PLAN, MICRO_BEV)
        out = gfr(pyr, params, MICRO_PLAN, CFG, variant)
        assert out.shape == (MICRO_PLAN.widths[0],) + MICRO_BEV
        f_sat = satnet.to_sat_feature(out, params)
        assert f_sat.shape == (MICRO_PLAN.c_out,) + MICRO_BEV


def test_param_count_matches_closed_form():
    def stage_count(d_in, d_out):
        return (d_out * d_in * 9 + d_out) + (d_out * d_out * 9 + d_out) + (d_out * d_in + d_out)

    def gated_count(dcat, d_next, k=3):
        g, i, c = CFG.channel_split(dcat)
        ex = CFG.expanded_width(dcat)
        return (
            ex * dcat + ex
            + c * c * k * k + c
            + dcat * g + dcat
            + d_next * dcat + d_next
        )

    for plan in (MICRO_PLAN, ChannelPlan()):
        d = plan.widths
        base = (d[0] * 3 * 49 + d[0]) + (plan.c_out * d[0] + plan.c_out)
        stages = sum(stage_count(d[l - 1], d[l]) for l in range(1, 5))
        aligns = sum(d[l] * d[l] * 9 + d[l] for l in range(4))
        full_blocks = sum(gated_count(plan.concat_width(l), d[l]) for l in range(4))
        star_blocks = sum(d[l] * plan.concat_width(l) * 9 + d[l] for l in range(4))

        full = init_sat_params(np.random.default_rng(0), plan, CFG, variant="full")
        star = init_sat_params(np.random.default_rng(0), plan, CFG, variant="gfr_star")
        assert satnet.param_count(full) == base + stages + aligns + full_blocks
        assert satnet.param_count(star) == base + stages + aligns + star_blocks
        # the two variants differ only inside the refinement blocks
        diff = set(full) ^ set(star)
        assert all(".gfr" in name for name in diff)


def test_refinement_golden_snapshot_zero_expansion():
    # all gate expansions zeroed: the recursion becomes a fixed linear image
    # of the pyramid; frozen fingerprint guards the wiring
    params = micro_params(seed=20)
    for lvl in range(4):
        ex = CFG.expanded_width(MICRO_PLAN.concat_width(lvl))
        params[f"sat.gfr{lvl}.expand.w"] = Tensor(
            np.zeros((ex, MICRO_PLAN.concat_width(lvl))), requires_grad=True)
        params[f"sat.gfr{lvl}.expand.b"] = Tensor(np.zeros(ex), requires_grad=True)
    pyr = satnet.extract_pyramid(micro_patch(seed=21), params, MICRO_PLAN, MICRO_BEV)
    out = gfr(pyr, params, MICRO_PLAN, CFG, "full")
    fingerprint = [float(out.data.sum()), float(out.data[0, 0, 0]), float(out.data[2, 10, 5])]
    np.testing.assert_allclose(
        fingerprint,
        [74.2296762922706, -1.8503534201747802, 1.9106755763289307],
        rtol=1e-12,
    )


@pytest.mark.slow
def test_full_satellite_pipeline_gradients_micro():
    # extract -> gfr -> lift on a 64x32 patch, sampled-coordinate FD probe
    params = micro_params(seed=22)
    patch = Tensor(np.random.default_rng(23).normal(scale=0.4, size=(3, 64, 32)),
                   requires_grad=True)
    probe = dict(params)
    probe["patch"] = patch

    def loss():
        pyr = satnet.extract_pyramid(patch, params, MICRO_PLAN, MICRO_BEV)
        f_sat = satnet.to_sat_feature(gfr(pyr, params, MICRO_PLAN, CFG, "full"), params)
        return T.sum_all(T.mul(f_sat, f_sat))

    check_grads(loss, probe, tol=1e-3, sample=6, rng=np.random.default_rng(24))


def test_to_sat_feature_zero_weights_zero_output():
    params = micro_params(seed=25)
    params["sat.out.w"] = Tensor(np.zeros((MICRO_PLAN.c_out, MICRO_PLAN.widths[0])),
                                 requires_grad=True)
    r0 = Tensor(np.random.default_rng(26).normal(size=(3, 8, 4)))
    out = satnet.to_sat_feature(r0, params)
    assert np.all(out.data == 0.0)


def test_to_sat_feature_gradients():
    params = micro_params(seed=27)
    r0 = Tensor(np.random.default_rng(28).normal(size=(3, 4, 3)), requires_grad=True)
    probe = {"w": params["sat.out.w"], "b": params["sat.out.b"], "r0": r0}

    def loss():
        y = satnet.to_sat_feature(r0, params)
        return T.sum_all(T.mul(y, y))

    check_grads(loss, probe, tol=1e-4)
