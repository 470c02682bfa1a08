"""Two-sided transport: identity exactness, grid, noise policy, edit, retarget."""
import numpy as np
import pytest

from skelflow import flowedit as fe_mod
from skelflow.features import FeatureLayout, NormStats, build_skeleton_condition
from skelflow.flow import ConditionSet, GuidanceWeights
from skelflow.flowedit import (EDIT_SOURCE_WEIGHTS, EDIT_TARGET_WEIGHTS,
                               RETARGET_SWEEP, RETARGET_WEIGHTS, EditConfig,
                               TransportTrace, edit_text, noisy_source,
                               retarget, transport)
from skelflow.kinematics import KinematicsError, forward_kinematics
from skelflow.metrics import bone_length_error
from skelflow.model import ModelConfig, init_parameters, model_forward
from skelflow.synthdata import (DataConfig, SkeletonParams, build_dataset,
                                make_skeleton, padding_prompt)

SMALL = ModelConfig(joints=16, feat_dim=392, hidden_dim=32, n_layers=1,
                    frame_heads=2, joint_heads=1)


@pytest.fixture(scope="module")
def layout():
    return FeatureLayout(16)


@pytest.fixture(scope="module")
def bundle():
    return build_dataset(DataConfig(n_clips=4, window=8, seed=3))


@pytest.fixture(scope="module")
def norm(bundle, layout):
    return NormStats.fit([it.features for it in bundle.items], layout)


@pytest.fixture(scope="module")
def small_params():
    return init_parameters(SMALL, np.random.default_rng(0), zero_init=False)


def make_cond(norm, layout, skel, prompt=None):
    svec = norm.apply_skeleton(build_skeleton_condition(skel, layout), layout)
    return ConditionSet.single(prompt if prompt is not None else padding_prompt(), svec)


# -- noisy source path ----------------------------------------------------------------

def test_noisy_source_endpoints():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 7))
    eps = rng.standard_normal((5, 7))
    assert np.array_equal(noisy_source(x, 0.0, eps), eps)
    assert np.array_equal(noisy_source(x, 1.0, eps), x)
    np.testing.assert_allclose(noisy_source(x, 0.3, eps), 0.7 * eps + 0.3 * x,
                               atol=1e-15)


def test_noisy_source_validation():
    x = np.zeros((4, 3))
    with pytest.raises(ValueError):
        noisy_source(x, 0.5, np.zeros((4, 2)))
    with pytest.raises(ValueError):
        noisy_source(x, 1.5, np.zeros((4, 3)))


def test_noisy_source_statistics():
    # marginal of the noisy path: mean tau * x, scatter (1 - tau)
    rng = np.random.default_rng(1)
    x = rng.standard_normal(6)
    tau = 0.4
    draws = np.stack([noisy_source(x, tau, rng.standard_normal(6))
                      for _ in range(20000)])
    np.testing.assert_allclose(draws.mean(axis=0), tau * x, atol=0.03)
    np.testing.assert_allclose(draws.std(axis=0), 1.0 - tau, atol=0.03)


# -- schedule -------------------------------------------------------------------------

def test_edit_config_validation():
    with pytest.raises(ValueError):
        EditConfig(tau_min=1.0)
    with pytest.raises(ValueError):
        EditConfig(tau_min=-0.1)
    with pytest.raises(ValueError):
        EditConfig(steps=0)
    with pytest.raises(ValueError):
        EditConfig(tau_min=0.999, steps=100)  # rounds onto the grid end
    with pytest.raises(ValueError):
        EditConfig(tau_clamp=0.0)


def test_edit_config_start_step():
    assert EditConfig(tau_min=0.1, steps=100).start_step == 10
    assert EditConfig(tau_min=0.33, steps=10).start_step == 3
    assert EditConfig(tau_min=0.0, steps=5).start_step == 0


def test_trace_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        TransportTrace(taus=np.array([0.2, 0.1]), delta_norms=np.zeros(2), h=0.1)
    with pytest.raises(ValueError):
        TransportTrace(taus=np.zeros(3), delta_norms=np.zeros(2), h=0.1)
    tr = TransportTrace(taus=np.array([0.1, 0.2]), delta_norms=np.array([3.0, 4.0]), h=0.1)
    out = tmp_path / "trace.csv"
    tr.write_csv(out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "tau,delta_norm"
    assert len(lines) == 3 and lines[1].startswith("0.1,")


# -- transport ------------------------------------------------------------------------

@pytest.mark.parametrize("weights", [RETARGET_WEIGHTS, EDIT_SOURCE_WEIGHTS],
                         ids=["skel-only", "text-and-skel"])
@pytest.mark.parametrize("frozen", [False, True], ids=["fresh", "frozen"])
def test_transport_identity_is_exact(small_params, norm, layout, bundle,
                                     weights, frozen):
    # same condition and same weights on both sides: the difference field
    # evaluates duplicate stacked rows and must cancel bitwise, so the
    # window passes through untouched
    item = bundle.items[0]
    cond = make_cond(norm, layout, item.skel, item.tokens)
    cfg = EditConfig(tau_min=0.25, steps=12, w_src=weights, w_tgt=weights,
                     frozen_noise=frozen)
    x = norm.apply(item.features)
    y, trace = transport(small_params, SMALL, x, cond, cond, cfg)
    assert np.array_equal(y, x)
    assert np.all(trace.delta_norms == 0.0)


def test_transport_grid(small_params, norm, layout, bundle):
    item = bundle.items[1]
    cond = make_cond(norm, layout, item.skel)
    cfg = EditConfig(tau_min=0.1, steps=20, w_src=RETARGET_WEIGHTS,
                     w_tgt=RETARGET_WEIGHTS)
    _, trace = transport(small_params, SMALL, norm.apply(item.features),
                         cond, cond, cfg)
    assert trace.taus.size == cfg.steps - cfg.start_step
    assert trace.taus[0] == cfg.tau_min
    assert np.all(np.diff(trace.taus) > 0)
    # the grid tiles [tau_min, 1 - tau_clamp] exactly
    assert trace.taus[-1] + trace.h == pytest.approx(1.0 - cfg.tau_clamp, abs=1e-12)


def test_weak_edit_limit_is_one_euler_step(small_params, norm, layout, bundle):
    # tau_min pushed against the end of the schedule leaves exactly one step,
    # so the displacement norm equals h times the recorded velocity norm
    item = bundle.items[2]
    c_src = make_cond(norm, layout, item.skel, item.tokens)
    c_tgt = make_cond(norm, layout, item.skel)  # padding prompt
    cfg = EditConfig(tau_min=0.99, steps=100)
    x = norm.apply(item.features)
    y, trace = transport(small_params, SMALL, x, c_src, c_tgt, cfg)
    assert trace.taus.size == 1
    assert np.linalg.norm(y - x) == pytest.approx(trace.h * trace.delta_norms[0],
                                                  rel=1e-12)


def test_transport_stacks_both_sides_into_one_forward(small_params, norm, layout,
                                                      bundle, monkeypatch):
    item = bundle.items[0]
    calls = []

    def spy(params, x, tau, tokens, skel, cfg, **kw):
        calls.append(x.shape[0])
        return model_forward(params, x, tau, tokens, skel, cfg, **kw)

    monkeypatch.setattr(fe_mod, "model_forward", spy)
    c_src = make_cond(norm, layout, item.skel, item.tokens)
    c_tgt = make_cond(norm, layout, item.skel)
    x = norm.apply(item.features)

    cfg = EditConfig(tau_min=0.5, steps=8, w_src=RETARGET_WEIGHTS,
                     w_tgt=RETARGET_WEIGHTS)
    transport(small_params, SMALL, x, c_src, c_tgt, cfg)
    # one live branch per side
    assert calls == [2] * (cfg.steps - cfg.start_step)

    calls.clear()
    cfg = EditConfig(tau_min=0.5, steps=8)  # default asymmetric text guidance
    transport(small_params, SMALL, x, c_src, c_tgt, cfg)
    # each side: uncond + text-only + skel-only survive, the both-branch
    # carries weight zero and is never evaluated
    assert calls == [6] * (cfg.steps - cfg.start_step)


def test_noise_policy(small_params, norm, layout, bundle, monkeypatch):
    # both sides of a step share one eps; fresh noise is redrawn per step,
    # frozen noise is sampled once
    item = bundle.items[3]
    x = norm.apply(item.features)
    seen = []

    def spy(params, xb, tau, tokens, skel, cfg, **kw):
        seen.append((xb.copy(), float(tau[0])))
        return model_forward(params, xb, tau, tokens, skel, cfg, **kw)

    monkeypatch.setattr(fe_mod, "model_forward", spy)
    c_src = make_cond(norm, layout, item.skel)
    c_tgt = make_cond(norm, layout, make_skeleton(SkeletonParams(legs=1.2)))

    def eps_per_step(frozen):
        seen.clear()
        cfg = EditConfig(tau_min=0.5, steps=8, w_src=RETARGET_WEIGHTS,
                         w_tgt=RETARGET_WEIGHTS, seed=7, frozen_noise=frozen)
        transport(small_params, SMALL, x, c_src, c_tgt, cfg)
        # rows are [z_tgt, x_tilde]; invert the path to recover eps
        return [(xb[1] - tau * x) / (1.0 - tau) for xb, tau in seen]

    fresh = eps_per_step(False)
    assert not np.allclose(fresh[0], fresh[1])
    frozen = eps_per_step(True)
    for e in frozen[1:]:
        np.testing.assert_allclose(e, frozen[0], atol=1e-9)
    # first step starts from y = x, so both stacked states coincide
    first = seen[0][0]
    np.testing.assert_allclose(first[0], first[1], atol=1e-12)


def test_transport_determinism(small_params, norm, layout, bundle):
    item = bundle.items[1]
    c_src = make_cond(norm, layout, item.skel, item.tokens)
    c_tgt = make_cond(norm, layout, item.skel)
    x = norm.apply(item.features)
    cfg = EditConfig(tau_min=0.5, steps=8, seed=3)
    y1, t1 = transport(small_params, SMALL, x, c_src, c_tgt, cfg)
    y2, t2 = transport(small_params, SMALL, x, c_src, c_tgt, cfg)
    assert np.array_equal(y1, y2)
    assert np.array_equal(t1.delta_norms, t2.delta_norms)
    y3, _ = transport(small_params, SMALL, x, c_src, c_tgt,
                      EditConfig(tau_min=0.5, steps=8, seed=4))
    assert not np.array_equal(y1, y3)


def test_transport_validation(small_params, norm, layout, bundle):
    item = bundle.items[0]
    cond = make_cond(norm, layout, item.skel)
    x = norm.apply(item.features)
    with pytest.raises(ValueError):
        transport(small_params, SMALL, x[None], cond, cond, EditConfig())
    two = ConditionSet(np.concatenate([cond.tokens] * 2),
                       np.concatenate([cond.skel] * 2))
    with pytest.raises(ValueError):
        transport(small_params, SMALL, x, two, cond, EditConfig())


def test_transport_snapshots(small_params, norm, layout, bundle):
    item = bundle.items[0]
    c_src = make_cond(norm, layout, item.skel, item.tokens)
    c_tgt = make_cond(norm, layout, item.skel)
    x = norm.apply(item.features)
    y, trace = transport(small_params, SMALL, x, c_src, c_tgt,
                         EditConfig(tau_min=0.5, steps=6), keep_snapshots=True)
    assert trace.snapshots.shape == (trace.taus.size,) + x.shape
    assert np.array_equal(trace.snapshots[-1], y)


# -- text editing ---------------------------------------------------------------------

def test_edit_text_identity_prompt_passthrough(small_params, norm, layout, bundle):
    # equal weights and equal prompts: the edit is a no-op up to the
    # normalization round trip, and FK decoding keeps bones exact
    item = bundle.items[0]
    cfg = EditConfig(tau_min=0.5, steps=8, w_src=EDIT_SOURCE_WEIGHTS,
                     w_tgt=EDIT_SOURCE_WEIGHTS)
    res = edit_text(small_params, SMALL, layout, norm, item.features,
                    item.tokens, item.tokens, item.skel, cfg, fps=item.fps)
    np.testing.assert_allclose(res.features, item.features, atol=1e-9)
    res.clip.validate()
    pos = forward_kinematics(item.skel, res.clip)
    assert bone_length_error(pos, item.skel) < 1e-9


def test_edit_text_prompt_changes_motion(small_params, norm, layout, bundle):
    item = bundle.items[0]
    cfg = EditConfig(tau_min=0.5, steps=8)
    res = edit_text(small_params, SMALL, layout, norm, item.features,
                    item.tokens, padding_prompt(), item.skel, cfg, fps=item.fps)
    assert not np.allclose(res.features, item.features, atol=1e-6)
    assert res.trace.taus.size == cfg.steps - cfg.start_step
    assert res.clip.frames == item.features.shape[0]


# -- retargeting ----------------------------------------------------------------------

def test_retarget_identity_skeleton_passthrough(small_params, norm, layout, bundle):
    item = bundle.items[0]
    res = retarget(small_params, SMALL, layout, norm, item.features,
                   item.skel, item.skel, steps=10, sweep=(2, 5), fps=item.fps)
    np.testing.assert_allclose(res.features, item.features, atol=1e-9)
    assert res.start_step in (2, 5)
    assert len(res.sweep_scores) == 2
    # duplicate conditions cancel exactly, so every candidate scores the same
    assert res.sweep_scores[0][1] == pytest.approx(res.sweep_scores[1][1], abs=1e-12)


def test_retarget_topology_mismatch_raises(small_params, norm, layout, bundle):
    item = bundle.items[0]
    with pytest.raises(KinematicsError):
        retarget(small_params, SMALL, layout, norm, item.features,
                 item.skel, make_skeleton(joints=24))


def test_retarget_sweep_and_result_fields(small_params, norm, layout, bundle):
    item = bundle.items[2]
    tgt = make_skeleton(SkeletonParams(arms=0.8, legs=1.2))
    res = retarget(small_params, SMALL, layout, norm, item.features,
                   item.skel, tgt, steps=10, sweep=(2, 4, 6), fps=item.fps)
    assert [k for k, _ in res.sweep_scores] == [2, 4, 6]
    assert all(np.isfinite(s) for _, s in res.sweep_scores)
    assert res.start_step == min(res.sweep_scores, key=lambda ks: ks[1])[0]
    assert res.tau_min == pytest.approx(res.start_step / 10)
    T = item.features.shape[0]
    assert res.direct_positions.shape == (T, 16, 3)
    assert res.clip_fk.joints == 16
    # FK decode against the target skeleton keeps its bones exact
    pos = forward_kinematics(tgt, res.clip_fk)
    assert bone_length_error(pos, tgt) < 1e-9


def test_retarget_gt_scoring(small_params, norm, layout, bundle):
    from skelflow.synthdata import ground_truth_clip

    item = bundle.items[1]
    tgt = make_skeleton(SkeletonParams(legs=1.1))
    gt = ground_truth_clip(item, tgt)
    res = retarget(small_params, SMALL, layout, norm, item.features,
                   item.skel, tgt, steps=10, sweep=(2, 4), gt_clip=gt,
                   fps=item.fps)
    assert all(np.isfinite(s) and s >= 0 for _, s in res.sweep_scores)
