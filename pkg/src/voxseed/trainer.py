"""The semi-supervised training loop: batches, losses, Adam, EMA, selection.

One train_step consumes equal-sized labeled and unlabeled batches.  Teacher
passes (MC uncertainty, feature donation) are gradient-free; the student sees
strong-noise inputs and receives gradients from L_S, L_UA, L_NN through its
logits and from L_EN through its penultimate features.  All randomness flows
through a single stream in a fixed draw order, so a (config, dataset, seed)
triple reproduces checkpoints bit for bit.
"""

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import losses, metrics, net, nnlabel, uncertainty
from .errors import TrainingDivergenceError
from .nnlabel import KernelChoice
from .phantom import DatasetSplit
from .volume import FeatureMap, Mask3D, ProbMap, add_gaussian_noise, stable_softmax


@dataclass
class TrainConfig:
    epochs: int = 40
    val_every: int = 1
    batch_size: int = 2
    mc_passes: int = 5
    k: int = 16
    l: int = 5
    band: int = 2
    ema_decay: float = 0.99
    teacher_noise: float = 0.01
    student_noise: float = 0.02
    dropout: float = 0.15
    lr: float = 1e-4
    w_ua_max: float = 0.25
    w_ps_max: float = 0.125
    kernel: str = "cosine"
    reducer: str = "mean"
    use_nn: bool = True
    use_en: bool = True
    en_unreliable_only: bool = False
    levels: int = 3
    base_filters: int = 8
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("val_every", "batch_size", "mc_passes", "k", "l", "band"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        for name in ("teacher_noise", "student_noise", "w_ua_max", "w_ps_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        KernelChoice(self.kernel, self.reducer).validate()
        self.net_config().validate()
        return self

    def net_config(self):
        return net.NetConfig(levels=self.levels, base_filters=self.base_filters,
                             dropout_rate=self.dropout)

    def choice(self):
        return KernelChoice(self.kernel, self.reducer)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, rec):
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(rec) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**rec).validate()


@dataclass
class TrainState:
    student: net.NetParams
    opt: net.OptimizerState
    teacher: net.NetParams
    iteration: int
    total_iterations: int

    def copy(self):
        opt = net.OptimizerState({k: v.copy() for k, v in self.opt.m.items()},
                                 {k: v.copy() for k, v in self.opt.v.items()},
                                 self.opt.t, self.opt.lr, self.opt.beta1,
                                 self.opt.beta2, self.opt.eps)
        return TrainState(self.student.copy(), opt, self.teacher.copy(),
                          self.iteration, self.total_iterations)


def iterations_per_epoch(n_labeled, n_unlabeled, batch_size):
    return math.ceil(max(n_labeled, n_unlabeled) / batch_size)


def init_state(config: TrainConfig, n_labeled, n_unlabeled, rng) -> TrainState:
    """He-initialized student, teacher as its exact twin, fresh optimizer."""
    student = net.he_init(config.net_config(), rng)
    teacher = student.copy()
    opt = net.init_optimizer(student, lr=config.lr)
    t_n = config.epochs * iterations_per_epoch(n_labeled, n_unlabeled, config.batch_size)
    return TrainState(student, opt, teacher, 0, t_n)


def train_step(state: TrainState, labeled_batch, unlabeled_batch, config: TrainConfig, rng):
    """One optimization step; returns (new state, LossReport).

    labeled_batch: list of (Volume3D, Mask3D); unlabeled_batch: list of
    Volume3D (may be empty for supervised-only training).
    """
    n_l = len(labeled_batch)
    n_u = len(unlabeled_batch)
    if n_l == 0:
        raise ValueError("labeled batch must be nonempty")
    T = state.iteration
    t_n = max(state.total_iterations, 1)
    lam = uncertainty.uncertainty_threshold(T, t_n)
    w_ua = losses.ramp_up(T, losses.RampSchedule(config.w_ua_max, t_n))
    w_ps = losses.ramp_up(T, losses.RampSchedule(config.w_ps_max, t_n))
    need_features = n_u > 0 and (config.use_nn or config.use_en)

    # fixed draw order: labeled strong noise, per-unlabeled MC passes,
    # labeled weak noise for feature donation, unlabeled strong noise,
    # student dropout, then per-unlabeled ensemble sampling
    strong_l = [add_gaussian_noise(v, config.student_noise, rng) for v, _ in labeled_batch]
    mc = [uncertainty.mc_uncertainty(state.teacher, u, config.mc_passes,
                                     config.teacher_noise, rng)
          for u in unlabeled_batch]
    feats_l = None
    if need_features:
        weak_l = np.stack([add_gaussian_noise(v, config.teacher_noise, rng).data
                           for v, _ in labeled_batch])[:, None]
        teacher_trace = net.forward_batch(state.teacher, weak_l, False)
        feats_l = teacher_trace.penultimate
    strong_u = [add_gaussian_noise(u, config.student_noise, rng) for u in unlabeled_batch]

    xs = np.stack([v.data for v in strong_l] + [v.data for v in strong_u])[:, None]
    trace = net.forward_batch(state.student, xs, True, rng, need_cache=True)
    probs = stable_softmax(trace.logits, axis=1)

    d_logits = np.zeros_like(trace.logits)
    d_penult = None
    l_s = l_ua = l_nn = l_en = 0.0
    reliable_count = 0
    unreliable_count = 0
    for i, (vol, y) in enumerate(labeled_batch):
        val, g = losses.supervised_loss(ProbMap(probs[i], vol.spacing), y)
        l_s += val / n_l
        d_logits[i] += g / n_l

    for j, u in enumerate(unlabeled_batch):
        b = n_l + j
        umap, _, pseudo_t = mc[j]
        rel, unrel = uncertainty.reliability_split(umap, lam)
        reliable_count += int(rel.data.sum())
        unreliable_count += int(unrel.data.sum())
        p_b = ProbMap(probs[b], u.spacing)
        val, g = uncertainty.loss_ua(pseudo_t, p_b, rel)
        l_ua += val / n_u
        d_logits[b] += (w_ua / n_u) * g
        if need_features:
            pair = j % n_l
            y_pair = labeled_batch[pair][1]
            f_l = FeatureMap(feats_l[pair], u.spacing)
            f_u = FeatureMap(trace.penultimate[b], u.spacing)
            kp, km = nnlabel.ensemble_similarity(y_pair, f_l, f_u, config.k,
                                                 config.l, config.band,
                                                 config.choice(), rng)
            if config.use_nn:
                y_nn = nnlabel.pseudo_label_nn(kp, km)
                val, g = nnlabel.loss_nn(y_nn, p_b, unrel)
                l_nn += val / n_u
                d_logits[b] += (w_ps / n_u) * g
            if config.use_en:
                en_mask = unrel if config.en_unreliable_only else None
                val, d_kp, d_km = nnlabel.loss_entropy_min(kp, km, en_mask)
                l_en += val / n_u
                d_f = (nnlabel.similarity_backward(kp, d_kp)
                       + nnlabel.similarity_backward(km, d_km))
                if d_penult is None:
                    d_penult = np.zeros_like(trace.penultimate)
                d_penult[b] += (w_ps / n_u) * d_f

    report = losses.total_loss(l_s, l_ua, l_nn, l_en, T, t_n,
                               config.w_ua_max, config.w_ps_max)
    report.counts = {"labeled": n_l, "unlabeled": n_u,
                     "reliable": reliable_count, "unreliable": unreliable_count}
    grads = net.backward_batch(trace, d_logits, d_penult)
    student, opt = net.adam_step(state.student, grads, state.opt)
    teacher = net.ema_update(state.teacher, student, config.ema_decay)
    new_state = TrainState(student, opt, teacher, state.iteration + 1,
                           state.total_iterations)
    return new_state, report


def _predict_batch(params, vols, chunk=8):
    preds = []
    for lo in range(0, len(vols), chunk):
        xs = np.stack([v.data for v in vols[lo:lo + chunk]])[:, None]
        trace = net.forward_batch(params, xs, False)
        preds.extend((trace.logits[i, 1] > trace.logits[i, 0]).astype(np.uint8)
                     for i in range(trace.logits.shape[0]))
    return preds


def case_metrics(pred: Mask3D, gt: Mask3D):
    """IoU and HD95 with the empty-prediction diagonal penalty."""
    iou = metrics.iou(pred, gt)
    if pred.data.any() and gt.data.any():
        hd = metrics.hd95(pred, gt, pred.spacing)
    else:
        hd = metrics.volume_diagonal_mm(pred.data.shape, pred.spacing)
    return iou, hd


def validate(state: TrainState, cases, config: TrainConfig):
    """Mean (IoU, HD95) of the teacher over (Volume3D, Mask3D) cases."""
    if not cases:
        raise ValueError("validation requires at least one case")
    preds = _predict_batch(state.teacher, [v for v, _ in cases])
    ious, hds = [], []
    for pred_arr, (vol, gt) in zip(preds, cases):
        pred = Mask3D(pred_arr, vol.spacing)
        iou, hd = case_metrics(pred, gt)
        ious.append(iou)
        hds.append(hd)
    return float(np.mean(ious)), float(np.mean(hds))


@dataclass
class FitResult:
    best_state: TrainState
    final_state: TrainState
    best_epoch: int
    best_iou: float
    best_hd95: float
    log: list = field(default_factory=list)


class _Cycler:
    """Endless permutation stream over a pool; batches are always full size."""

    def __init__(self, items, rng):
        self.items = items
        self.rng = rng
        self.order = []

    def next_batch(self, size):
        out = []
        while len(out) < size:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.items)))
            out.append(self.items[self.order.pop(0)])
        return out


def fit(config: TrainConfig, dataset: DatasetSplit, out_dir=None) -> FitResult:
    """Full training run with best-HD95 checkpoint selection.

    Validation runs every val_every epochs (and always at the last one),
    so arms with different epoch granularity can share one selection
    schedule in wall-step terms.

    Writes log.jsonl, best.vck1 and final.vck1 under out_dir when given.  On
    divergence the last healthy state is checkpointed before re-raising.
    """
    config.validate()
    if not dataset.labeled:
        raise ValueError("training requires at least one labeled case")
    n_l = len(dataset.labeled)
    n_u = len(dataset.unlabeled)
    rng = np.random.default_rng(config.seed)
    state = init_state(config, n_l, n_u, rng)
    ipe = iterations_per_epoch(n_l, n_u, config.batch_size)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "log.jsonl", "w")

    log = []

    def emit(line):
        log.append(json.loads(line))
        if log_fh is not None:
            log_fh.write(line + "\n")
            log_fh.flush()

    lab = _Cycler(dataset.labeled, rng)
    unl = _Cycler(dataset.unlabeled, rng) if n_u else None
    best = state.copy()
    best_epoch = 0
    best_iou = best_hd = None
    try:
        for epoch in range(1, config.epochs + 1):
            for _ in range(ipe):
                labeled_batch = lab.next_batch(config.batch_size)
                unlabeled_batch = unl.next_batch(config.batch_size) if unl else []
                prev = state
                try:
                    state, report = train_step(state, labeled_batch,
                                               unlabeled_batch, config, rng)
                except TrainingDivergenceError:
                    state = prev
                    raise
                total_vox = report.counts["reliable"] + report.counts["unreliable"]
                frac = report.counts["reliable"] / total_vox if total_vox else 0.0
                emit(report.json_line(state.iteration - 1, frac))
            due = epoch % config.val_every == 0 or epoch == config.epochs
            if dataset.validation and due:
                iou, hd = validate(state, dataset.validation, config)
                emit(json.dumps({"epoch": epoch, "iteration": state.iteration,
                                 "val_iou": iou, "val_hd95": hd}))
                if best_hd is None or hd < best_hd:
                    best = state.copy()
                    best_epoch = epoch
                    best_iou, best_hd = iou, hd
        if best_hd is None:
            # epochs == 0 or no validation cases: the initial/final state stands
            best = state.copy()
            best_epoch = config.epochs
            if dataset.validation:
                best_iou, best_hd = validate(state, dataset.validation, config)
                emit(json.dumps({"epoch": config.epochs, "iteration": state.iteration,
                                 "val_iou": best_iou, "val_hd95": best_hd}))
            else:
                best_iou, best_hd = float("nan"), float("nan")
    except TrainingDivergenceError:
        # state was rolled back to the last healthy step before re-raising
        if out is not None:
            net.save_checkpoint(out / "best.vck1", best.student, best.teacher,
                                best.opt, best.iteration, best.total_iterations)
            net.save_checkpoint(out / "final.vck1", state.student, state.teacher,
                                state.opt, state.iteration, state.total_iterations)
        if log_fh is not None:
            log_fh.close()
        raise
    if out is not None:
        net.save_checkpoint(out / "best.vck1", best.student, best.teacher,
                            best.opt, best.iteration, best.total_iterations)
        net.save_checkpoint(out / "final.vck1", state.student, state.teacher,
                            state.opt, state.iteration, state.total_iterations)
    if log_fh is not None:
        log_fh.close()
    return FitResult(best, state, best_epoch, best_iou, best_hd, log)
