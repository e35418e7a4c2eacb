"""Training loop contracts: per-objective isolation, ablation gating,
determinism, checkpoint resume, and the discriminator-free inference path."""

import math

import numpy as np
import pytest

from edgeuda import synthdata
from edgeuda.checkpoint import CheckpointError, save_arrays
from edgeuda.losses import LossWeights
from edgeuda.nets import (
    ARCH_TAGS,
    contour_forward,
    decoder_forward,
    encoder_forward,
)
from edgeuda.tensor import ShapeError, Tensor, concat_channels, softmax_channels
from edgeuda.trainer import (
    ARM_PRESETS,
    LOSS_CSV_HEADER,
    LOSS_NAMES,
    ModelBundle,
    NumericalAbort,
    TrainConfig,
    apply_arm,
    benchmark_summary,
    infer,
    run_benchmark,
    run_experiment,
    train_step,
)


def tiny_config(**over):
    base = dict(steps=2, batch=2, eval_every=0, eval_n=2, image_hw=32, seed=0)
    base.update(over)
    return TrainConfig(**base)


def batches(seed=0, step=0, batch=2, hw=32):
    return synthdata.training_batches(seed, step, batch, hw=hw)


def snapshots_equal(a, b):
    return {
        tag: all(np.array_equal(x, y) for x, y in zip(a[tag], b[tag])) for tag in ARCH_TAGS
    }


# ---------------------------------------------------------------------------
# config and arms
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_nets=0.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_disc=-1e-4)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(eval_every=-1)


def test_effective_weights_follow_ablation_flags():
    cfg = tiny_config(weights=LossWeights(alpha=0.4, beta=0.3, lam=0.2))
    full = apply_arm(cfg, "full").effective_weights()
    assert (full.alpha, full.beta, full.lam) == (0.4, 0.3, 0.2)
    none = apply_arm(cfg, "no-uda").effective_weights()
    assert (none.alpha, none.beta, none.lam) == (0.0, 0.0, 0.0)
    feat = apply_arm(cfg, "feat").effective_weights()
    assert (feat.alpha, feat.beta, feat.lam) == (0.0, 0.3, 0.0)
    edge = apply_arm(cfg, "edge").effective_weights()
    assert (edge.alpha, edge.beta, edge.lam) == (0.4, 0.3, 0.0)


def test_apply_arm_rejects_unknown():
    with pytest.raises(ValueError, match="unknown arm"):
        apply_arm(tiny_config(), "everything")
    assert set(ARM_PRESETS) == {"no-uda", "feat", "edge", "full"}


# ---------------------------------------------------------------------------
# bundle checkpointing
# ---------------------------------------------------------------------------


def test_bundle_save_load_round_trip(tmp_path):
    cfg = tiny_config()
    bundle = ModelBundle.initialize(cfg.arch(), seed=3)
    src, tgt = batches()
    train_step(bundle, src, tgt, cfg)  # nonzero velocities and step
    path = tmp_path / "m.euda"
    bundle.save(path)
    back = ModelBundle.load(path)
    assert back.arch == bundle.arch
    assert back.step == 1
    for tag in ARCH_TAGS:
        for a, b in zip(bundle.nets[tag].tensors(), back.nets[tag].tensors()):
            np.testing.assert_array_equal(a.data, b.data)
        for va, vb in zip(bundle.velocities[tag], back.velocities[tag]):
            np.testing.assert_array_equal(va, vb)
            assert vb.flags.writeable


@pytest.mark.parametrize(
    "drop",
    ["meta/arch", "meta/step", "contour/down1_w", "vel/decoder/head_b"],
)
def test_bundle_load_missing_key(tmp_path, drop):
    bundle = ModelBundle.initialize(tiny_config().arch(), seed=0)
    arrays = bundle.state_arrays()
    assert drop in arrays
    del arrays[drop]
    path = tmp_path / "m.euda"
    save_arrays(path, arrays)
    with pytest.raises(CheckpointError):
        ModelBundle.load(path)


def test_bundle_load_shape_mismatch(tmp_path):
    bundle = ModelBundle.initialize(tiny_config().arch(), seed=0)
    arrays = bundle.state_arrays()
    arrays["encoder/conv1_b"] = np.zeros(99)
    path = tmp_path / "m.euda"
    save_arrays(path, arrays)
    with pytest.raises((CheckpointError, ShapeError)):
        ModelBundle.load(path)


# ---------------------------------------------------------------------------
# train_step contracts
# ---------------------------------------------------------------------------


def test_train_step_requires_labeled_source():
    cfg = tiny_config()
    bundle = ModelBundle.initialize(cfg.arch(), seed=0)
    src, tgt = batches()
    with pytest.raises(ValueError, match="labels"):
        train_step(bundle, tgt, src, cfg)


def test_train_step_rejects_unknown_objective():
    cfg = tiny_config()
    bundle = ModelBundle.initialize(cfg.arch(), seed=0)
    src, tgt = batches()
    with pytest.raises(ValueError, match="unknown objectives"):
        train_step(bundle, src, tgt, cfg, enabled={"contour", "critic"})


def test_no_uda_ignores_target_batch():
    cfg = apply_arm(tiny_config(), "no-uda")
    src, tgt_a = batches(seed=0)
    _, tgt_b = batches(seed=7)
    assert not np.array_equal(tgt_a.images, tgt_b.images)
    outs = []
    src2, _ = batches(step=1)
    for tgt in (tgt_a, tgt_b):
        bundle = ModelBundle.initialize(cfg.arch(), seed=1)
        train_step(bundle, src, tgt, cfg)
        train_step(bundle, src2, tgt, cfg)
        outs.append(bundle.parameter_snapshot())
    assert all(snapshots_equal(*outs).values())


def test_loss_record_nan_pattern():
    src, tgt = batches()
    cfg = apply_arm(tiny_config(), "no-uda")
    bundle = ModelBundle.initialize(cfg.arch(), seed=0)
    rec = train_step(bundle, src, tgt, cfg)
    assert set(rec) == set(LOSS_NAMES)
    for name in ("edge_disc", "feat_disc", "entropy"):
        assert math.isnan(rec[name])
    for name in ("contour", "encoder", "decoder"):
        assert math.isfinite(rec[name])
    assert rec["encoder"] == rec["decoder"]  # no adversarial term on either

    cfg = apply_arm(tiny_config(), "full")
    bundle = ModelBundle.initialize(cfg.arch(), seed=0)
    rec = train_step(bundle, src, tgt, cfg)
    assert all(math.isfinite(rec[k]) for k in LOSS_NAMES)
    # the encoder objective carries the adversarial term on top of the
    # decoder's; -log sigmoid is strictly positive
    assert rec["encoder"] > rec["decoder"]


@pytest.mark.parametrize("only", list(ARCH_TAGS))
def test_objective_updates_only_its_network(only):
    cfg = apply_arm(tiny_config(), "full")
    bundle = ModelBundle.initialize(cfg.arch(), seed=2)
    before = bundle.parameter_snapshot()
    src, tgt = batches()
    train_step(bundle, src, tgt, cfg, enabled={only})
    same = snapshots_equal(before, bundle.parameter_snapshot())
    for tag in ARCH_TAGS:
        if tag == only:
            assert not same[tag], f"{tag} should have been updated"
        else:
            assert same[tag], f"{tag} must stay untouched by the {only} objective"


def test_literal_adversarial_variant_runs_and_differs():
    src, tgt = batches()
    outs = []
    for literal in (False, True):
        cfg = apply_arm(tiny_config(literal_adversarial=literal), "full")
        bundle = ModelBundle.initialize(cfg.arch(), seed=0)
        train_step(bundle, src, tgt, cfg)
        outs.append(bundle.parameter_snapshot())
    same = snapshots_equal(*outs)
    assert not same["contour"] and not same["encoder"]
    # discriminators see detached inputs either way: same update
    assert same["edge_disc"] and same["feat_disc"]


def test_detached_edges_keep_contour_out_of_phase6():
    # pure supervised config, edge conditioning on; flipping detach_edges
    # must change only whether the contour net receives segmentation
    # gradients, never the encoder/decoder updates themselves
    src, tgt = batches()
    snaps = {}
    for detach in (True, False):
        cfg = apply_arm(tiny_config(detach_edges=detach), "no-uda")
        bundle = ModelBundle.initialize(cfg.arch(), seed=4)
        train_step(bundle, src, tgt, cfg)
        snaps[detach] = bundle.parameter_snapshot()
    same = snapshots_equal(snaps[True], snaps[False])
    assert same["encoder"] and same["decoder"] and same["edge_disc"] and same["feat_disc"]
    assert not same["contour"]

    # without the contour objective enabled, end-to-end mode leaves the
    # contour net at its initialization
    cfg = apply_arm(tiny_config(detach_edges=False), "no-uda")
    bundle = ModelBundle.initialize(cfg.arch(), seed=4)
    init = bundle.parameter_snapshot()
    train_step(bundle, src, tgt, cfg, enabled={"encoder", "decoder"})
    assert snapshots_equal(init, bundle.parameter_snapshot())["contour"]


def test_numerical_abort_names_phase_and_step():
    cfg = apply_arm(tiny_config(), "full")
    bundle = ModelBundle.initialize(cfg.arch(), seed=0)
    src, tgt = batches()
    src.images[0, 0, 3, 3] = np.nan
    with pytest.raises(NumericalAbort, match="'forward' phase at step 0"):
        train_step(bundle, src, tgt, cfg)
    assert bundle.step == 0  # aborted step does not count


def test_train_step_leaves_no_cyclic_graph_behind():
    # each step's tensor/tape graph is cyclic; train_step must release it so
    # memory frees by refcount instead of piling up until the cyclic GC (or
    # the OOM killer) gets there
    import gc

    cfg = apply_arm(tiny_config(), "full")
    bundle = ModelBundle.initialize(cfg.arch(), seed=0)
    for step in range(3):
        src, tgt = batches(step=step)
        train_step(bundle, src, tgt, cfg)
    gc.collect()
    for step in range(3, 6):
        src, tgt = batches(step=step)
        train_step(bundle, src, tgt, cfg)
    assert gc.collect() < 100  # leaky steps strand thousands of cycle members


# ---------------------------------------------------------------------------
# inference path
# ---------------------------------------------------------------------------


def test_infer_matches_manual_composition():
    cfg = tiny_config()
    bundle = ModelBundle.initialize(cfg.arch(), seed=5)
    src, _ = batches()
    for conditioned in (True, False):
        pred, edge, soft = infer(bundle, src.images, use_edge_conditioning=conditioned)
        x = Tensor(src.images)
        e = contour_forward(bundle.nets["contour"], x)
        cond = e if conditioned else Tensor(np.zeros_like(e.data))
        f = encoder_forward(bundle.nets["encoder"], concat_channels(x, cond))
        s = softmax_channels(decoder_forward(bundle.nets["decoder"], f))
        np.testing.assert_array_equal(pred, s.data.argmax(axis=1))
        np.testing.assert_array_equal(edge, e.data[:, 0])
        np.testing.assert_array_equal(soft, s.data)
    assert pred.shape == (2, 32, 32)
    assert pred.min() >= 0 and pred.max() < 4
    assert edge.min() > 0 and edge.max() < 1


def test_infer_accepts_unbatched_channel_axis():
    cfg = tiny_config()
    bundle = ModelBundle.initialize(cfg.arch(), seed=5)
    src, _ = batches()
    a = infer(bundle, src.images)
    b = infer(bundle, src.images[:, 0])  # [N,H,W] promoted to [N,1,H,W]
    np.testing.assert_array_equal(a[0], b[0])


def test_inference_reads_no_discriminator_parameters():
    cfg = tiny_config()
    bundle = ModelBundle.initialize(cfg.arch(), seed=0)
    src, tgt = batches()
    train_step(bundle, src, tgt, apply_arm(cfg, "full"))
    bundle.reset_reads()
    infer(bundle, src.images)
    assert bundle.nets["edge_disc"].reads == 0
    assert bundle.nets["feat_disc"].reads == 0
    for tag in ("contour", "encoder", "decoder"):
        assert bundle.nets[tag].reads > 0


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def rows_array(loss_rows):
    return np.array([[rec[k] for k in LOSS_NAMES] for _, rec in loss_rows])


def test_fixed_seed_runs_bit_identical():
    cfg = apply_arm(tiny_config(steps=3), "full")
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    np.testing.assert_array_equal(rows_array(a.loss_rows), rows_array(b.loss_rows))
    for k, arr in a.bundle.state_arrays().items():
        np.testing.assert_array_equal(arr, b.bundle.state_arrays()[k], err_msg=k)
    assert a.target_reports[-1][1].dice_whole == b.target_reports[-1][1].dice_whole


def test_resume_is_bit_identical_to_uninterrupted(tmp_path):
    cfg = apply_arm(tiny_config(steps=4), "full")
    whole = run_experiment(cfg)

    half = run_experiment(apply_arm(tiny_config(steps=2), "full"))
    ckpt = tmp_path / "half.euda"
    half.bundle.save(ckpt)
    resumed = run_experiment(cfg, resume_from=ckpt)

    assert resumed.bundle.step == 4
    for k, arr in whole.bundle.state_arrays().items():
        np.testing.assert_array_equal(arr, resumed.bundle.state_arrays()[k], err_msg=k)
    # the resumed run replays exactly steps 2 and 3
    np.testing.assert_array_equal(
        rows_array(whole.loss_rows)[2:], rows_array(resumed.loss_rows)
    )


def test_resume_rejects_architecture_mismatch(tmp_path):
    half = run_experiment(tiny_config(steps=1))
    ckpt = tmp_path / "m.euda"
    half.bundle.save(ckpt)
    with pytest.raises(ValueError, match="architecture"):
        run_experiment(tiny_config(steps=2, image_hw=64), resume_from=ckpt)


def test_eval_cadence():
    res = run_experiment(tiny_config(steps=3, eval_every=0))
    assert [s for s, _ in res.source_reports] == [3]
    res = run_experiment(tiny_config(steps=4, eval_every=2))
    assert [s for s, _ in res.target_reports] == [2, 4]


def test_run_experiment_writes_artifacts(tmp_path):
    cfg = apply_arm(tiny_config(steps=2), "no-uda")
    res = run_experiment(cfg, out_dir=tmp_path)
    losses = (tmp_path / "losses.csv").read_text().splitlines()
    assert losses[0] == LOSS_CSV_HEADER == "step," + ",".join(LOSS_NAMES)
    assert len(losses) == 3
    # repr round trip: parsed cells equal the recorded floats (NaN included)
    parsed = np.array([[float(c) for c in line.split(",")[1:]] for line in losses[1:]])
    np.testing.assert_array_equal(parsed, rows_array(res.loss_rows))
    for name in ("metrics_source.csv", "metrics_target.csv"):
        header = (tmp_path / name).read_text().splitlines()[0]
        assert header.startswith("epoch,dice_c1")
    back = ModelBundle.load(tmp_path / "model.euda")
    assert back.step == 2


def test_supervised_training_reduces_seg_loss():
    cfg = apply_arm(tiny_config(steps=100, batch=4), "no-uda")
    res = run_experiment(cfg)
    dec = rows_array(res.loss_rows)[:, LOSS_NAMES.index("decoder")]
    start, end = dec[:5].mean(), dec[-5:].mean()
    assert end < 0.6 * start, (start, end)


def test_run_benchmark_and_summary(tmp_path):
    outcomes = run_benchmark(
        tiny_config(steps=2), seeds=(0, 1), arms=("no-uda",), out_dir=tmp_path
    )
    assert [(o.arm, o.seed) for o in outcomes] == [("no-uda", 0), ("no-uda", 1)]
    lines = (tmp_path / "benchmark.csv").read_text().splitlines()
    assert lines[0].startswith("arm,seed,class")
    assert len(lines) == 1 + 2 * 4  # c1,c2,c3,whole per run
    summary = benchmark_summary(outcomes)
    want = np.mean([o.target.dice_whole for o in outcomes])
    np.testing.assert_allclose(summary["no-uda"]["target_whole"], want)
    assert (tmp_path / "no-uda-seed1" / "model.euda").exists()
