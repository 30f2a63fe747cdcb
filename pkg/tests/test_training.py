import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from cascadepu import network as N
from cascadepu.geometry import PointCloud, chamfer_distance
from cascadepu.pipeline import toy_patchset
from cascadepu.tensor import DimensionError, Tensor, backward
from cascadepu import training as TR
from cascadepu.training import AdamState, TrainConfig, TrainReport


def small_cfg(**kw):
    base = dict(epochs=1, batch_size=2, patch_gt_size=64, patch_input_size=16, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def small_configs(n=3):
    return N.default_stage_configs(n, k_attention=4)


# ----------------------------------------------------------------- config

def test_config_requires_x4_patch_sizes():
    with pytest.raises(ValueError, match="4 \\* patch_input_size"):
        TrainConfig(patch_gt_size=1000, patch_input_size=256)
    with pytest.raises(ValueError):
        TrainConfig(supervision_mode="middle")


def test_auto_decay_interval_keeps_reference_fraction():
    cfg = TrainConfig(epochs=10)
    assert cfg.resolved_decay_interval(100) == round(1000 * 50_000 / 107_800)
    assert TrainConfig(decay_interval_iters=7).resolved_decay_interval(100) == 7


# ----------------------------------------------------------------- schedule

def test_lr_schedule_examples():
    cfg = TrainConfig(decay_interval_iters=50_000)
    assert TR.lr_at(0, cfg) == 0.001
    assert TR.lr_at(50_000, cfg) == pytest.approx(0.0007, rel=1e-15)
    assert TR.lr_at(100_000, cfg) == pytest.approx(0.00049, rel=1e-15)
    assert TR.lr_at(49_999, cfg) == 0.001


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(1, 10**5))
def test_lr_is_non_increasing(a, b, interval):
    cfg = TrainConfig(decay_interval_iters=interval)
    lo, hi = sorted((a, b))
    assert TR.lr_at(hi, cfg) <= TR.lr_at(lo, cfg)


def test_lr_rejects_negative_iteration():
    with pytest.raises(ValueError):
        TR.lr_at(-1, TrainConfig(decay_interval_iters=10))


# ----------------------------------------------------------------- Adam

def test_adam_zero_gradient_leaves_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState.for_params([p])
    TR.adam_step([p], [np.zeros(2)], state, 0.1)
    assert p.data.tolist() == [1.0, -2.0]


@pytest.mark.parametrize("g", [1e-3, 1.0, 1e4])
def test_adam_first_step_is_lr_whatever_the_scale(g):
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState.for_params([p])
    TR.adam_step([p], [np.array([g])], state, 0.01)
    assert p.data[0] == pytest.approx(-0.01, rel=1e-5)


def test_adam_converges_on_quadratic():
    target = np.array([1.5, -0.5])
    scale = np.array([1.0, 10.0])
    p = Tensor(np.zeros(2), requires_grad=True)
    state = AdamState.for_params([p])
    for it in range(2000):
        grad = 2 * scale * (p.data - target)
        TR.adam_step([p], [grad], state, 0.1 * 0.7 ** (it // 250))
    assert np.linalg.norm(p.data - target) < 1e-6


def test_adam_moments_persist():
    p = Tensor(np.zeros(1), requires_grad=True)
    state = AdamState.for_params([p])
    TR.adam_step([p], [np.array([1.0])], state, 0.1)
    TR.adam_step([p], [np.array([1.0])], state, 0.1)
    assert state.t == 2
    assert state.m[0][0] == pytest.approx(0.19)
    assert state.v[0][0] == pytest.approx(0.001999)


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(DimensionError):
        TR.adam_step([p], [np.zeros(3)], AdamState.for_params([p]), 0.1)
    with pytest.raises(DimensionError):
        TR.adam_step([p], [], AdamState.for_params([p]), 0.1)


# ----------------------------------------------------------------- loss

def test_total_loss_zero_when_outputs_equal_gt():
    gt = np.random.default_rng(0).standard_normal((32, 3))
    outs = [Tensor(gt.copy()) for _ in range(3)]
    assert float(TR.total_loss(outs, gt).data) == 0.0


def test_total_loss_is_sum_of_stage_chamfers():
    rng = np.random.default_rng(1)
    gt = rng.standard_normal((64, 3))
    outs = [Tensor(rng.standard_normal((n, 3))) for n in (32, 64, 64)]
    parts = [float(chamfer_distance(o.data, gt).data) for o in outs]
    assert float(TR.total_loss(outs, gt).data) == pytest.approx(sum(parts), abs=1e-12)
    assert float(TR.total_loss(outs, gt, "last_stage").data) == parts[-1]


def stage_grad_norms(mode):
    net = N.init_network(small_configs(), seed=0)
    pts = np.random.default_rng(2).uniform(-1, 1, (16, 3))
    gt = np.random.default_rng(3).uniform(-1, 1, (64, 3))
    backward(TR.total_loss(N.cascade_forward(pts, net), gt, mode))
    return [sum(float(np.abs(t.grad).sum()) for t in s.parameters()) for s in net.stages], net


def test_gradient_reaches_every_stage():
    norms, _ = stage_grad_norms("all_stages")
    assert all(n > 0 for n in norms)


def test_last_stage_mode_gradient_reachability():
    # Every stage feeds the refined output, so all are reachable; the
    # per-parameter gradients differ from all_stages mode wherever the
    # early stages' own losses contributed.
    last, net_last = stage_grad_norms("last_stage")
    every, net_all = stage_grad_norms("all_stages")
    assert all(n > 0 for n in last)
    s3_last = net_last.stages[2].parameters()
    s3_all = net_all.stages[2].parameters()
    assert all(np.array_equal(a.grad, b.grad) for a, b in zip(s3_last, s3_all))
    assert not np.array_equal(net_last.stages[0]["rc.mlp2.w"].grad, net_all.stages[0]["rc.mlp2.w"].grad)


# ----------------------------------------------------------------- sampling

def test_training_pair_is_subset_and_deterministic():
    gt = PointCloud(np.random.default_rng(4).standard_normal((64, 3)))
    cfg = small_cfg()
    a, tgt = TR.sample_training_pair(gt, cfg, np.random.default_rng(9))
    b, _ = TR.sample_training_pair(gt, cfg, np.random.default_rng(9))
    assert len(a) == 16 and tgt is gt
    np.testing.assert_array_equal(a.points, b.points)
    rows = {tuple(r) for r in gt.points}
    assert all(tuple(r) in rows for r in a.points)
    assert len({tuple(r) for r in a.points}) == 16


def test_training_pair_rejects_wrong_size():
    with pytest.raises(ValueError):
        TR.sample_training_pair(PointCloud(np.zeros((60, 3))), small_cfg(), np.random.default_rng(0))


def test_training_pair_indices_are_uniform():
    gt = PointCloud(np.arange(48, dtype=float).reshape(16, 3))
    cfg = TrainConfig(patch_gt_size=16, patch_input_size=4)
    rng = np.random.default_rng(5)
    counts = np.zeros(16)
    for _ in range(10_000):
        inp, _ = TR.sample_training_pair(gt, cfg, rng)
        counts[(inp.points[:, 0] / 3).astype(int)] += 1
    assert chisquare(counts).pvalue > 0.01


# ----------------------------------------------------------------- report

def test_report_text_round_trip(tmp_path):
    rep = TrainReport(["loss_stage1", "loss_stage2", "loss_refined"])
    rep.epochs.append(TR.EpochRecord(1, (0.1, 0.2, 0.30000000000000004), 0.001, 1.5))
    rep.epochs.append(TR.EpochRecord(2, (0.05, 0.1, 0.125), 0.0007, 1.25))
    rep.write(tmp_path / "r.tsv")
    text = (tmp_path / "r.tsv").read_text()
    assert text.splitlines()[0] == "epoch\tloss_stage1\tloss_stage2\tloss_refined\tlr\tseconds"
    back = TrainReport.read(tmp_path / "r.tsv")
    assert back.column(2) == [0.30000000000000004, 0.125]
    assert back.final_losses == [0.30000000000000004, 0.125]


def test_report_rejects_foreign_text():
    with pytest.raises(ValueError):
        TrainReport.from_text("a\tb\n1\t2\n")


def test_stage_column_names():
    assert TR.stage_column_names(N.default_stage_configs(3)) == ["loss_stage1", "loss_stage2", "loss_refined"]
    assert TR.stage_column_names(N.default_stage_configs(2)) == ["loss_stage1", "loss_stage2"]


# ----------------------------------------------------------------- training loop

@pytest.fixture(scope="module")
def tiny_data():
    return toy_patchset(["sphere"], 4, 64, seed=0)


def test_one_epoch_smoke(tiny_data, tmp_path):
    cfg = small_cfg(checkpoint_every=1)
    net, rep = TR.train(tiny_data, cfg, small_configs(), checkpoint_dir=tmp_path)
    assert len(rep.epochs) == 1
    assert all(math.isfinite(v) and v >= 0 for v in rep.epochs[0].stage_losses)
    assert (tmp_path / "checkpoint_epoch0001.bin").exists()
    assert all(np.all(np.isfinite(p.data)) for p in net.parameters())


def test_training_is_bitwise_deterministic(tiny_data, tmp_path):
    cfg = small_cfg(epochs=2)
    for name in ("a", "b"):
        net, _ = TR.train(tiny_data, cfg, small_configs())
        N.save_checkpoint(net, tmp_path / f"{name}.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_supervision_modes_differ_in_early_stage_losses(tiny_data):
    _, all_rep = TR.train(tiny_data, small_cfg(epochs=2), small_configs())
    _, last_rep = TR.train(tiny_data, small_cfg(epochs=2, supervision_mode="last_stage"), small_configs())
    # Epoch 1 starts from the same weights; after updates the trajectories part.
    assert all_rep.column(0) != last_rep.column(0)
    assert all_rep.column(1) != last_rep.column(1)


def test_reported_losses_decompose_the_objective(tiny_data):
    # With lr 0 the weights never move, so the report is a plain average of
    # per-patch stage losses that can be recomputed independently.
    cfg = small_cfg(lr0=0.0, batch_size=4)
    net, rep = TR.train(tiny_data, cfg, small_configs())
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(tiny_data))
    per = []
    for i in order:
        inp, tgt = TR.sample_training_pair(tiny_data.patches[i], cfg, rng)
        outs = N.cascade_forward(inp.points, net)
        stages = [float(c.data) for c in TR.stage_chamfers(outs, tgt.points)]
        assert float(TR.total_loss(outs, tgt.points).data) == pytest.approx(sum(stages), abs=1e-12)
        per.append(stages)
    np.testing.assert_allclose(rep.epochs[0].stage_losses, np.mean(per, axis=0), rtol=0, atol=1e-12)


def test_divergence_is_reported(tiny_data):
    net = N.init_network(small_configs(), seed=0)
    net.stages[0]["rc.mlp2.b"].data[0] = np.nan
    with pytest.raises(TR.TrainingDiverged, match=r"epoch 1, batch 0.*stage losses"):
        TR.train(tiny_data, small_cfg(), net=net)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        TR.train([], small_cfg())


def test_clip_gradients_caps_norm():
    ps = [Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)]
    ps[0].grad[...] = [3.0, 0.0]
    ps[1].grad[...] = [4.0]
    assert TR.clip_gradients(ps, 1.0) == 5.0
    assert np.sqrt(sum(float((p.grad ** 2).sum()) for p in ps)) == pytest.approx(1.0)


def test_evaluate_patches_reports_baseline(tiny_data):
    cfg = small_cfg()
    net = N.zero_offset_heads(N.init_network(small_configs(), seed=0))
    ev = TR.evaluate_patches(net, tiny_data, cfg, seed=0)
    # Zero offsets make every stage output the repeated input.
    assert ev.final_cd == pytest.approx(ev.baseline_cd, abs=1e-15)
    assert ev.baseline_ratio == pytest.approx(1.0)
