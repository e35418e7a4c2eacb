"""Joint adversarial training of the five networks, plus inference.

Every training step runs six phases in a fixed order:

1. contour forward on the source and target batches;
2. edge-discriminator update on detached edge maps;
3. contour update (edge cross-entropy + weighted adversarial term) with the
   edge discriminator frozen;
4. encoder/decoder forward on each image concatenated with its phase-1 edge
   map (detached by default, so segmentation gradients stay out of the
   contour net);
5. feature-discriminator update on detached encoder features;
6. encoder and decoder updates, each applying its own objective to the one
   shared forward of phase 4.

Parameter updates replace data buffers instead of mutating them, so the tape
recorded before an update stays valid for the later phases.  Batches are a
pure function of (seed, step), which makes checkpoint resume bit-identical
to an uninterrupted run.
"""

from __future__ import annotations

import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import synthdata
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .losses import (
    LossWeights,
    adversarial_generator_literal,
    adversarial_generator_term,
    disc_bce,
    edge_ce,
    seg_ce,
    self_entropy,
)
from .metrics import MetricsReport, evaluate, write_metrics_csv
from .nets import (
    ARCH_TAGS,
    ArchSpec,
    contour_forward,
    decoder_forward,
    edge_disc_forward,
    encoder_forward,
    feat_disc_forward,
    init_all,
)
from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    concat_channels,
    frozen,
    scale,
    sgd_momentum_step,
    softmax_channels,
    zero_grads,
)

OBJECTIVES = ("contour", "edge_disc", "encoder", "decoder", "feat_disc")
LOSS_NAMES = OBJECTIVES + ("entropy",)
LOSS_CSV_HEADER = "step," + ",".join(LOSS_NAMES)

ARM_PRESETS = {
    "no-uda": dict(use_edge_adv=False, use_feat_adv=False, use_entropy=False),
    "feat": dict(use_edge_adv=False, use_feat_adv=True, use_entropy=False),
    "edge": dict(use_edge_adv=True, use_feat_adv=True, use_entropy=False),
    "full": dict(use_edge_adv=True, use_feat_adv=True, use_entropy=True),
}
ARM_ORDER = ("no-uda", "feat", "edge", "full")


class NumericalAbort(ArithmeticError):
    """A loss or activation went non-finite; training cannot continue."""

    def __init__(self, objective: str, step: int, detail: str):
        super().__init__(f"non-finite value in {objective!r} phase at step {step}: {detail}")
        self.objective = objective
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on; two equal configs give
    bit-identical runs.

    Both task networks share lr_nets, both discriminators lr_disc, and every
    optimizer uses the same momentum.  The ablation flags gate the three
    adaptation terms and are what the benchmark arms toggle.
    """

    lr_nets: float = 1e-3
    lr_disc: float = 1e-4
    momentum: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    steps: int = 800
    batch: int = 8
    seed: int = 0
    use_edge_adv: bool = True
    use_feat_adv: bool = True
    use_entropy: bool = True
    use_edge_conditioning: bool = True
    detach_edges: bool = True
    literal_adversarial: bool = False
    eval_every: int = 200
    eval_n: int = 16
    image_hw: int = 64
    classes: int = 4
    tumor_probability: float = 1.0
    augment_data: bool = True

    def __post_init__(self):
        if self.lr_nets <= 0 or self.lr_disc <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0,1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1 or self.eval_n < 1:
            raise ValueError("batch and eval_n must be >= 1")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0 (0 disables periodic eval)")

    def arch(self) -> ArchSpec:
        return ArchSpec(image_hw=self.image_hw, classes=self.classes)

    def effective_weights(self) -> LossWeights:
        w = self.weights
        return LossWeights(
            alpha=w.alpha if self.use_edge_adv else 0.0,
            beta=w.beta if self.use_feat_adv else 0.0,
            lam=w.lam if self.use_entropy else 0.0,
        )


def apply_arm(config: TrainConfig, arm: str) -> TrainConfig:
    if arm not in ARM_PRESETS:
        raise ValueError(f"unknown arm {arm!r}; choose from {sorted(ARM_PRESETS)}")
    return replace(config, **ARM_PRESETS[arm])


# ---------------------------------------------------------------------------
# model bundle and checkpointing
# ---------------------------------------------------------------------------


def _arch_vector(arch: ArchSpec) -> np.ndarray:
    return np.array(
        [
            arch.image_hw,
            arch.classes,
            arch.feature_channels,
            arch.contour_width,
            *arch.encoder_widths,
            *arch.decoder_widths,
            *arch.edge_disc_widths,
            *arch.feat_disc_widths,
            arch.disc_fc_width,
            arch.leaky_slope,
        ],
        dtype=np.float64,
    )


def _arch_from_vector(vec: np.ndarray) -> ArchSpec:
    if vec.shape != (18,):
        raise CheckpointError(f"bad architecture record of length {vec.size}")
    ints = [int(round(v)) for v in vec[:17]]
    return ArchSpec(
        image_hw=ints[0],
        classes=ints[1],
        feature_channels=ints[2],
        contour_width=ints[3],
        encoder_widths=tuple(ints[4:6]),
        decoder_widths=tuple(ints[6:9]),
        edge_disc_widths=tuple(ints[9:13]),
        feat_disc_widths=tuple(ints[13:16]),
        disc_fc_width=ints[16],
        leaky_slope=float(vec[17]),
    )


class ModelBundle:
    """Five networks plus their momentum buffers and the step counter.

    Only the contour, encoder, and decoder take part in inference; the
    discriminators exist for training alone.
    """

    def __init__(self, arch: ArchSpec, nets: dict, velocities: dict | None = None, step: int = 0):
        self.arch = arch
        self.nets = nets
        if velocities is None:
            velocities = {
                tag: [np.zeros_like(t.data) for t in nets[tag].tensors()] for tag in ARCH_TAGS
            }
        self.velocities = velocities
        self.step = int(step)

    @classmethod
    def initialize(cls, arch: ArchSpec, seed: int) -> "ModelBundle":
        return cls(arch, init_all(arch, seed))

    def parameter_snapshot(self) -> dict:
        """tag -> list of parameter array copies, for parameter-delta checks."""
        return {tag: [t.data.copy() for t in self.nets[tag].tensors()] for tag in ARCH_TAGS}

    def reset_reads(self) -> None:
        for net in self.nets.values():
            net.reset_reads()

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        out["meta/arch"] = _arch_vector(self.arch)
        out["meta/step"] = np.array([self.step], dtype=np.float64)
        for tag in ARCH_TAGS:
            for name, arr in self.nets[tag].state_arrays().items():
                out[f"{tag}/{name}"] = arr
        for tag in ARCH_TAGS:
            for name, vel in zip(self.nets[tag].names(), self.velocities[tag]):
                out[f"vel/{tag}/{name}"] = vel
        return out

    def save(self, path) -> None:
        save_arrays(path, self.state_arrays())

    @classmethod
    def load(cls, path) -> "ModelBundle":
        arrays = load_arrays(path)
        try:
            arch = _arch_from_vector(arrays["meta/arch"])
            step = int(arrays["meta/step"][0])
        except KeyError as e:
            raise CheckpointError(f"checkpoint missing {e.args[0]!r}") from e
        bundle = cls.initialize(arch, seed=0)
        bundle.step = step
        for tag in ARCH_TAGS:
            prefix = f"{tag}/"
            state = {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}
            try:
                bundle.nets[tag].load_state(state)
            except KeyError as e:
                raise CheckpointError(str(e)) from e
            vels = []
            for name, t in bundle.nets[tag].items():
                key = f"vel/{tag}/{name}"
                if key not in arrays:
                    raise CheckpointError(f"checkpoint missing {key!r}")
                vel = np.asarray(arrays[key], dtype=np.float64)
                if vel.shape != t.data.shape:
                    raise CheckpointError(f"{key}: shape {vel.shape} != {t.data.shape}")
                vels.append(vel.copy())
            bundle.velocities[tag] = vels
        return bundle

    def infer(self, images, use_edge_conditioning: bool = True):
        return infer(self, images, use_edge_conditioning=use_edge_conditioning)


def infer(bundle: ModelBundle, images, *, use_edge_conditioning: bool = True):
    """Discriminator-free inference: contour -> concat -> encoder -> decoder.

    Returns (class map [N,H,W], edge probability [N,H,W], softmax [N,C,H,W]).
    With conditioning off the edge channel is replaced by zeros.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None, :, :]
    x = Tensor(images)
    edge_prob = contour_forward(bundle.nets["contour"], x)
    cond = edge_prob if use_edge_conditioning else Tensor(np.zeros_like(edge_prob.data))
    features = encoder_forward(bundle.nets["encoder"], concat_channels(x, cond))
    logits = decoder_forward(bundle.nets["decoder"], features)
    soft = softmax_channels(logits)
    return soft.data.argmax(axis=1), edge_prob.data[:, 0], soft.data


# ---------------------------------------------------------------------------
# one training step
# ---------------------------------------------------------------------------


def _zero_all(bundle: ModelBundle) -> None:
    for net in bundle.nets.values():
        zero_grads(net.tensors())


def _apply_grads(bundle: ModelBundle, tag: str, lr: float, momentum: float) -> None:
    tensors = bundle.nets[tag].tensors()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    sgd_momentum_step(tensors, grads, bundle.velocities[tag], lr, momentum)


def _step_net(bundle: ModelBundle, tag: str, loss: Tensor, lr: float, momentum: float) -> None:
    # zero every net's grads: this backward may reach leaves of other nets
    # (e.g. the encoder objective flows through decoder weights), and stale
    # grads must not leak into the next objective's step
    _zero_all(bundle)
    backward(loss)
    _apply_grads(bundle, tag, lr, momentum)


def train_step(
    bundle: ModelBundle,
    source: synthdata.SampleBatch,
    target: synthdata.SampleBatch,
    config: TrainConfig,
    enabled=None,
) -> dict:
    """One six-phase round; returns the six scalar losses by name.

    ``enabled`` restricts which networks receive updates (default: all five);
    forwards still run as needed, so a single-objective step is exactly the
    full step with the other updates skipped.  Losses that were not computed
    this step come back as NaN.
    """
    enabled = set(OBJECTIVES) if enabled is None else set(enabled)
    unknown = enabled - set(OBJECTIVES)
    if unknown:
        raise ValueError(f"unknown objectives {sorted(unknown)}")
    if source.labels is None or source.edges is None:
        raise ValueError("source batch must carry labels and edge maps")
    nets = bundle.nets
    w = config.effective_weights()
    alpha, beta, lam = w.alpha, w.beta, w.lam
    literal = config.literal_adversarial

    train_edge_disc = "edge_disc" in enabled and config.use_edge_adv
    train_feat_disc = "feat_disc" in enabled and config.use_feat_adv
    need_target_seg = beta > 0 or train_feat_disc or lam > 0
    need_target_contour = need_target_seg or alpha > 0 or train_edge_disc

    record = {name: float("nan") for name in LOSS_NAMES}
    phase = "forward"
    tape = Tape()
    try:
        with tape:
            xs = Tensor(source.images)
            es = contour_forward(nets["contour"], xs)
            xt = et = None
            if need_target_contour:
                xt = Tensor(target.images)
                et = contour_forward(nets["contour"], xt)

            if train_edge_disc:
                phase = "edge_disc"
                loss_ed = disc_bce(
                    edge_disc_forward(nets["edge_disc"], es.detach()),
                    edge_disc_forward(nets["edge_disc"], et.detach()),
                )
                record["edge_disc"] = loss_ed.item()
                _step_net(bundle, "edge_disc", loss_ed, config.lr_disc, config.momentum)

            if "contour" in enabled:
                phase = "contour"
                obj = edge_ce(es, source.edges)
                if alpha > 0:
                    with frozen(nets["edge_disc"].tensors()):
                        logit_t = edge_disc_forward(nets["edge_disc"], et)
                        if literal:
                            logit_s = edge_disc_forward(nets["edge_disc"], es)
                            adv = adversarial_generator_literal(logit_s, logit_t)
                        else:
                            adv = adversarial_generator_term(logit_t)
                    obj = obj + scale(adv, alpha)
                record["contour"] = obj.item()
                _step_net(bundle, "contour", obj, config.lr_nets, config.momentum)

            phase = "forward"

            def edge_channel(e: Tensor, x: Tensor) -> Tensor:
                if not config.use_edge_conditioning:
                    return Tensor(np.zeros_like(x.data))
                return e.detach() if config.detach_edges else e

            fs = encoder_forward(nets["encoder"], concat_channels(xs, edge_channel(es, xs)))
            logits_s = decoder_forward(nets["decoder"], fs)
            ft = soft_t = None
            if need_target_seg:
                ft = encoder_forward(nets["encoder"], concat_channels(xt, edge_channel(et, xt)))
                if lam > 0:
                    soft_t = softmax_channels(decoder_forward(nets["decoder"], ft))

            if train_feat_disc:
                phase = "feat_disc"
                loss_fd = disc_bce(
                    feat_disc_forward(nets["feat_disc"], fs.detach()),
                    feat_disc_forward(nets["feat_disc"], ft.detach()),
                )
                record["feat_disc"] = loss_fd.item()
                _step_net(bundle, "feat_disc", loss_fd, config.lr_disc, config.momentum)

            phase = "segmentation"
            seg = seg_ce(logits_s, source.labels)
            ent = None
            if lam > 0:
                ent = self_entropy(soft_t)
                record["entropy"] = ent.item()

            obj_dec = seg if ent is None else seg + scale(ent, lam)
            obj_enc = obj_dec
            if beta > 0 and "encoder" in enabled:
                with frozen(nets["feat_disc"].tensors()):
                    logit_t = feat_disc_forward(nets["feat_disc"], ft)
                    if literal:
                        logit_s = feat_disc_forward(nets["feat_disc"], fs)
                        adv = adversarial_generator_literal(logit_s, logit_t)
                    else:
                        adv = adversarial_generator_term(logit_t)
                obj_enc = obj_enc + scale(adv, beta)
            if "encoder" in enabled:
                record["encoder"] = obj_enc.item()
            if "decoder" in enabled:
                record["decoder"] = obj_dec.item()

            if "encoder" in enabled and "decoder" in enabled:
                # the adversarial term never reaches the decoder, so one
                # backward of the encoder objective carries both updates
                phase = "encoder"
                _zero_all(bundle)
                backward(obj_enc)
                _apply_grads(bundle, "encoder", config.lr_nets, config.momentum)
                phase = "decoder"
                _apply_grads(bundle, "decoder", config.lr_nets, config.momentum)
                if not config.detach_edges and "contour" in enabled:
                    # end-to-end mode: segmentation gradients flowed through
                    # the edge channel, so the contour net takes them too
                    phase = "contour"
                    _apply_grads(bundle, "contour", config.lr_nets, config.momentum)
            elif "encoder" in enabled:
                phase = "encoder"
                _step_net(bundle, "encoder", obj_enc, config.lr_nets, config.momentum)
            elif "decoder" in enabled:
                phase = "decoder"
                _step_net(bundle, "decoder", obj_dec, config.lr_nets, config.momentum)
    except NonFiniteError as e:
        raise NumericalAbort(phase, bundle.step, str(e)) from e
    finally:
        tape.release()  # the step's graph is cyclic; free it now, not at gen-2 GC

    bundle.step += 1
    return record


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    bundle: ModelBundle
    loss_rows: list  # (step, loss record dict)
    source_reports: list  # (step, MetricsReport)
    target_reports: list
    paths: dict


def write_loss_csv(path, rows) -> None:
    lines = [LOSS_CSV_HEADER]
    for step, rec in rows:
        lines.append(",".join([str(int(step))] + [repr(float(rec[k])) for k in LOSS_NAMES]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def run_experiment(
    config: TrainConfig, *, out_dir=None, resume_from=None, progress=None
) -> ExperimentResult:
    """Train per config, evaluating held-out source and target sets.

    Resume restores parameters, momentum buffers, and the step counter from a
    checkpoint; the remaining steps replay exactly what an uninterrupted run
    would have done.
    """
    if resume_from is not None:
        bundle = ModelBundle.load(resume_from)
        want = config.arch()
        if bundle.arch != want:
            raise ValueError(
                f"checkpoint architecture {bundle.arch} does not match config {want}"
            )
    else:
        bundle = ModelBundle.initialize(config.arch(), config.seed)

    kwargs = dict(hw=config.image_hw, tumor_probability=config.tumor_probability)
    src_eval = synthdata.eval_samples(config.seed, config.eval_n, domain="source", **kwargs)
    tgt_eval = synthdata.eval_samples(config.seed, config.eval_n, domain="target", **kwargs)

    def infer_fn(images):
        return infer(bundle, images, use_edge_conditioning=config.use_edge_conditioning)

    loss_rows, source_reports, target_reports = [], [], []

    def run_eval():
        source_reports.append((bundle.step, evaluate(infer_fn, src_eval)))
        target_reports.append((bundle.step, evaluate(infer_fn, tgt_eval)))

    while bundle.step < config.steps:
        src, tgt = synthdata.training_batches(
            config.seed,
            bundle.step,
            config.batch,
            hw=config.image_hw,
            augment_data=config.augment_data,
            tumor_probability=config.tumor_probability,
        )
        step_index = bundle.step
        rec = train_step(bundle, src, tgt, config)
        loss_rows.append((step_index, rec))
        if progress is not None:
            progress(step_index, rec)
        if config.eval_every > 0 and bundle.step % config.eval_every == 0:
            run_eval()
    if not target_reports or target_reports[-1][0] != bundle.step:
        run_eval()

    paths = {}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        paths["losses"] = os.path.join(out_dir, "losses.csv")
        write_loss_csv(paths["losses"], loss_rows)
        paths["metrics_source"] = os.path.join(out_dir, "metrics_source.csv")
        write_metrics_csv(paths["metrics_source"], source_reports)
        paths["metrics_target"] = os.path.join(out_dir, "metrics_target.csv")
        write_metrics_csv(paths["metrics_target"], target_reports)
        paths["checkpoint"] = os.path.join(out_dir, "model.euda")
        bundle.save(paths["checkpoint"])
    return ExperimentResult(bundle, loss_rows, source_reports, target_reports, paths)


# ---------------------------------------------------------------------------
# four-arm benchmark
# ---------------------------------------------------------------------------


@dataclass
class ArmOutcome:
    arm: str
    seed: int
    source: MetricsReport
    target: MetricsReport


BENCH_CSV_HEADER = "arm,seed,class,dice_source,dice_target,hd_source,hd_target,entropy_target"


def run_benchmark(
    base_config: TrainConfig,
    *,
    seeds=(0, 1, 2),
    arms=ARM_ORDER,
    out_dir=None,
    max_workers: int = 1,
    progress=None,
) -> list[ArmOutcome]:
    """Train every (arm, seed) pair and collect final held-out reports."""

    def one(job):
        arm, seed = job
        cfg = replace(apply_arm(base_config, arm), seed=seed)
        run_dir = os.path.join(out_dir, f"{arm}-seed{seed}") if out_dir is not None else None
        res = run_experiment(cfg, out_dir=run_dir)
        outcome = ArmOutcome(arm, seed, res.source_reports[-1][1], res.target_reports[-1][1])
        if progress is not None:
            progress(outcome)
        return outcome

    jobs = [(arm, seed) for arm in arms for seed in seeds]
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(one, jobs))
    else:
        outcomes = [one(j) for j in jobs]
    if out_dir is not None:
        write_benchmark_csv(os.path.join(out_dir, "benchmark.csv"), outcomes)
    return outcomes


def write_benchmark_csv(path, outcomes) -> None:
    lines = [BENCH_CSV_HEADER]
    for o in outcomes:
        names = ["c1", "c2", "c3", "whole"]
        ds = [*o.source.dice_per_class, o.source.dice_whole]
        dt = [*o.target.dice_per_class, o.target.dice_whole]
        hs = [*o.source.hd_per_class, o.source.hd_whole]
        ht = [*o.target.hd_per_class, o.target.hd_whole]
        for name, a, b, c, d in zip(names, ds, dt, hs, ht):
            lines.append(
                ",".join(
                    [o.arm, str(o.seed), name]
                    + [repr(float(v)) for v in (a, b, c, d, o.target.mean_entropy)]
                )
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def benchmark_summary(outcomes) -> dict:
    """Per-arm means of the headline quantities the arms are compared on."""
    summary: dict = {}
    for o in outcomes:
        s = summary.setdefault(
            o.arm, {"source_whole": [], "target_whole": [], "target_entropy": []}
        )
        s["source_whole"].append(o.source.dice_whole)
        s["target_whole"].append(o.target.dice_whole)
        s["target_entropy"].append(o.target.mean_entropy)
    return {
        arm: {k: sum(v) / len(v) for k, v in cols.items()} for arm, cols in summary.items()
    }
