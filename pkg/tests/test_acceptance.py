"""End-to-end acceptance gate.

Nine criteria covering gradient correctness, exact oracles, formula
endpoints, the desk-scale semi-supervised study, and bitwise
reproducibility.  Each test emits one PASS/FAIL line.

The gradient oracle needs two words of care.  First, the network is
piecewise smooth: a central difference straddling a ReLU sign change or
a pool argmax switch does not estimate the derivative at the base point
and would wrongly flag a correct gradient, so the harness compares the
exact gate signatures of the perturbed evaluations and shrinks the step
only for coordinates whose interval crosses a kink.  Second, a lone
h = 1e-3 stencil has an O(h^2) truncation error that swamps the 1e-4
relative target on small-gradient coordinates, so the stencil at h is
paired with one at h/2 and the two are Richardson-combined, cancelling
the truncation term while keeping h = 1e-3 as the principal step.
"""

import json
import math
import time

import numpy as np
import pytest

from test_metrics import brute_distance_to_set, cube_mask
from test_nnlabel import COMBOS, oracle_ensemble, random_instance
from voxseed import cli, losses, metrics, net, nnlabel, phantom, trainer, uncertainty
from voxseed.cli import _score_cases
from voxseed.phantom import DatasetSplit
from voxseed.volume import FeatureMap, Mask3D, ProbMap, Volume3D, stable_softmax

LN2 = math.log(2.0)
SEEDS = (0, 1, 2)
FULL_EPOCHS = 15
BASE_EPOCHS = 210  # ceil(4/2)=2 iterations/epoch: step count matches FULL_EPOCHS*28


def record(name, ok, detail=""):
    tail = f"  [{detail}]" if detail else ""
    print(f"{'PASS' if ok else 'FAIL'} {name}{tail}")
    assert ok, f"{name}{tail}"


# ---------------------------------------------------------------------------
# criterion 1: gradient oracle
# ---------------------------------------------------------------------------

class GradScene:
    """Frozen inputs, teacher quantities and masks for the four losses."""

    def __init__(self):
        cfg = net.NetConfig(levels=2, base_filters=4)
        rng = np.random.default_rng(42)
        params = net.he_init(cfg, rng, dtype=np.float64)
        # structured inputs plus a short supervised warm-up keep every loss
        # away from degenerate flat spots: at raw he-init the 4-channel
        # penultimate collapses to one direction, K+ - K- is exactly zero,
        # and the entropy term sits on its flat maximum where no finite
        # difference can resolve the (vanishing) gradient
        vol_a, mask_a = phantom.generate_phantom(
            phantom.PhantomSpec(dims=(8, 8, 8), lobes=(((3.5, 3.5, 3.5), 2.2),),
                                noise_sigma=0.05), np.random.default_rng(50))
        vol_b, _ = phantom.generate_phantom(
            phantom.PhantomSpec(dims=(8, 8, 8), lobes=(((4.5, 4.0, 3.0), 2.0),),
                                noise_sigma=0.05), np.random.default_rng(51))
        self.x_lab = vol_a.data.astype(np.float64)[None, None]
        self.x_unl = vol_b.data.astype(np.float64)[None, None]
        self.y_lab = mask_a
        opt = net.init_optimizer(params, lr=3e-3)
        teacher = params.copy()
        for step in range(40):
            tr = net.forward_batch(params, self.x_lab, True, rng, need_cache=True)
            pm = ProbMap(stable_softmax(tr.logits, axis=1)[0])
            _, d = losses.supervised_loss(pm, self.y_lab)
            params, opt = net.adam_step(params, net.backward_batch(tr, d[None]), opt)
            if step == 24:
                teacher = params.copy()
        self.params = params
        self.teacher = teacher
        umap, _, pseudo = uncertainty.mc_uncertainty(self.teacher, vol_b,
                                                     3, 0.05, rng)
        self.pseudo_t = pseudo
        lam = float(np.median(umap.data))
        self.reliable, self.unreliable = uncertainty.reliability_split(umap, lam)
        assert 0 < self.reliable.data.sum() < self.reliable.data.size
        t_tr = net.forward_batch(self.teacher, self.x_lab, False)
        self.f_l = FeatureMap(t_tr.penultimate[0])
        self.choice = nnlabel.KernelChoice("cosine", "mean")
        self.knn = dict(k=6, l=2, band=1)
        self.ens_seed = 1234
        kp0, km0, _ = self._similarity(self._trace(self.params))
        self.y_nn = nnlabel.pseudo_label_nn(kp0, km0)

    def _trace(self, params, need_cache=True):
        return net.forward_batch(params, self.x_unl if self._on_unl else self.x_lab,
                                 True, np.random.default_rng(7), need_cache=need_cache)

    _on_unl = True

    def _similarity(self, trace):
        f_u = FeatureMap(trace.penultimate[0])
        kp, km = nnlabel.ensemble_similarity(
            self.y_lab, self.f_l, f_u, self.knn["k"], self.knn["l"],
            self.knn["band"], self.choice, np.random.default_rng(self.ens_seed))
        return kp, km, f_u

    @staticmethod
    def _gates(trace):
        sig = b"".join(blk.sign.tobytes() for blk in trace.blocks)
        return sig + b"".join(p.tobytes() for p in trace.pool_idx)

    def loss_eval(self, which, params):
        """Scalar loss value plus the exact gate signature of the forward."""
        self._on_unl = which != "L_S"
        tr = self._trace(params, need_cache=True)
        probs = stable_softmax(tr.logits, axis=1)
        pm = ProbMap(probs[0])
        if which == "L_S":
            val, _ = losses.supervised_loss(pm, self.y_lab)
        elif which == "L_UA":
            val, _ = uncertainty.loss_ua(self.pseudo_t, pm, self.reliable)
        elif which == "L_NN":
            val, _ = nnlabel.loss_nn(self.y_nn, pm, self.unreliable)
        else:
            kp, km, _ = self._similarity(tr)
            val, _, _ = nnlabel.loss_entropy_min(kp, km)
        return val, self._gates(tr)

    def analytic(self, which):
        self._on_unl = which != "L_S"
        tr = self._trace(self.params, need_cache=True)
        probs = stable_softmax(tr.logits, axis=1)
        pm = ProbMap(probs[0])
        if which == "L_S":
            _, d = losses.supervised_loss(pm, self.y_lab)
            return net.backward_batch(tr, d[None])
        if which == "L_UA":
            _, d = uncertainty.loss_ua(self.pseudo_t, pm, self.reliable)
            return net.backward_batch(tr, d[None])
        if which == "L_NN":
            _, d = nnlabel.loss_nn(self.y_nn, pm, self.unreliable)
            return net.backward_batch(tr, d[None])
        kp, km, _ = self._similarity(tr)
        _, d_kp, d_km = nnlabel.loss_entropy_min(kp, km)
        d_f = (nnlabel.similarity_backward(kp, d_kp)
               + nnlabel.similarity_backward(km, d_km))
        return net.backward_batch(tr, np.zeros_like(tr.logits), d_f[None])

    def fd(self, which, name, i):
        """Richardson-refined central difference along one coordinate.

        A single h = 1e-3 stencil carries an O(h^2) truncation term that
        exceeds the 1e-4 relative target wherever a coordinate's gradient
        is small against its local curvature, so stencils at h and h/2
        are combined to cancel that term.  All four evaluations must
        share one gate signature (no ReLU or pool-argmax flip inside the
        interval bridged by the stencil); otherwise h shrinks and the
        stencil pair is retried.
        """
        for h in (1e-3, 1e-4, 1e-5, 1e-6, 1e-7):
            vals, sigs = [], set()
            for step in (h, 0.5 * h, -0.5 * h, -h):
                p = self.params.copy()
                p.tensors[name].ravel()[i] += step
                v, sig = self.loss_eval(which, p)
                vals.append(v)
                sigs.add(sig)
            d_h = (vals[0] - vals[3]) / (2.0 * h)
            d_half = (vals[1] - vals[2]) / h
            if len(sigs) == 1:
                break
        return (4.0 * d_half - d_h) / 3.0


def test_criterion_1_gradient_oracle():
    t0 = time.monotonic()
    scene = GradScene()
    worst = {}
    for which in ("L_S", "L_UA", "L_NN", "L_EN"):
        grads = scene.analytic(which)
        w = 0.0
        for name, g in grads.items():
            flat = g.ravel()
            for i in range(flat.size):
                num = scene.fd(which, name, i)
                a = flat[i]
                if abs(a) < 1e-12 and abs(num) < 1e-12:
                    continue
                w = max(w, abs(a - num) / max(abs(a), abs(num), 1e-6))
        worst[which] = w
    elapsed = time.monotonic() - t0
    detail = " ".join(f"{k} {v:.2e}" for k, v in worst.items()) + f", {elapsed:.0f}s"
    record("criterion 1: gradient oracle (h=1e-3, 64-bit, rel<=1e-4)",
           max(worst.values()) <= 1e-4 and elapsed < 120, detail)


# ---------------------------------------------------------------------------
# criterion 2: brute-force kNN oracle
# ---------------------------------------------------------------------------

def test_criterion_2_knn_oracle():
    t0 = time.monotonic()
    checked = 0
    exact = True
    for kernel, reducer in COMBOS:
        rng = np.random.default_rng(hash((kernel, reducer, "acceptance")) % 2**32)
        for _ in range(26):
            y, fl, fu, k, l, band = random_instance(rng)
            seed = int(rng.integers(0, 2**31))
            choice = nnlabel.KernelChoice(kernel, reducer)
            kp, km = nnlabel.ensemble_similarity(
                Mask3D(y), FeatureMap(fl), FeatureMap(fu), k, l, band, choice,
                np.random.default_rng(seed))
            labels = nnlabel.pseudo_label_nn(kp, km)
            ref_labels, _, _ = oracle_ensemble(y, fl, fu, k, l, band,
                                               kernel, reducer, seed)
            exact = exact and np.array_equal(labels.data, ref_labels)
            checked += 1
    elapsed = time.monotonic() - t0
    record("criterion 2: kNN pseudo-labels voxel-exact vs naive all-pairs",
           exact and checked >= 100 and elapsed < 60,
           f"{checked} instances, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: distance-transform oracle
# ---------------------------------------------------------------------------

def test_criterion_3_distance_oracle():
    t0 = time.monotonic()
    rng = np.random.default_rng(33)
    ok = True
    for _ in range(100):
        dims = tuple(int(d) for d in rng.integers(2, 9, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.4, 3.0, size=3))
        m = (rng.random(dims) < 0.35).astype(np.uint8)
        if not m.any():
            m.flat[int(rng.integers(m.size))] = 1
        got = metrics.distance_transform(Mask3D(m, spacing), spacing)
        ref = brute_distance_to_set(dims, np.argwhere(m), spacing).astype(np.float32)
        ulp = np.spacing(np.maximum(np.abs(got), np.abs(ref)))
        ok = ok and bool((np.abs(got - ref) <= ulp).all())
    base = cube_mask((8, 8, 8), (2, 2, 2), (5, 5, 5))
    shifted = cube_mask((8, 8, 8), (3, 2, 2), (6, 5, 5))
    hd_iso = metrics.hd95(Mask3D(base), Mask3D(shifted), (1.0, 1.0, 1.0))
    hd_aniso = metrics.hd95(Mask3D(base), Mask3D(shifted), (2.0, 1.0, 1.0))
    elapsed = time.monotonic() - t0
    record("criterion 3: exact anisotropic distance transform + cube HD95",
           ok and hd_iso == 1.0 and hd_aniso == 2.0 and elapsed < 60,
           f"100 masks, hd {hd_iso}/{hd_aniso} mm, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: formula endpoints
# ---------------------------------------------------------------------------

def test_criterion_4_formula_endpoints():
    t_n = 100
    sched = losses.RampSchedule(0.25, t_n)
    maturity = losses.ramp_up(t_n, sched)
    start = losses.ramp_up(0, sched)
    lam_end = uncertainty.uncertainty_threshold(t_n, t_n)
    uniform = np.full((2, 4, 4, 4), 0.5, np.float32)
    ent = uncertainty.entropy_map(uniform)
    ent_err = float(np.abs(ent.astype(np.float64) - LN2).max())
    ok = (maturity == 0.25
          and abs(start - 0.25 * math.exp(-5.0)) <= 1e-9
          and abs(lam_end - LN2) <= 1e-9
          and ent_err <= 1e-6)
    record("criterion 4: ramp endpoints, threshold maturity, uniform entropy",
           ok, f"ramp {maturity}, start err {abs(start - 0.25 * math.exp(-5.0)):.1e}, "
               f"lambda err {abs(lam_end - LN2):.1e}, entropy err {ent_err:.1e}")


# ---------------------------------------------------------------------------
# criterion 5: EMA recurrence
# ---------------------------------------------------------------------------

def test_criterion_5_ema_recurrence():
    cfg = net.NetConfig(levels=2, base_filters=2)
    rng = np.random.default_rng(5)
    teacher = net.he_init(cfg, rng, dtype=np.float64)
    students = [net.he_init(cfg, rng, dtype=np.float64) for _ in range(100)]
    decay = 0.99
    t = teacher
    for s in students:
        t = net.ema_update(t, s, decay)
    probe = lambda p: float(p.tensors["out_w"][0, 0])
    closed = decay ** 100 * probe(teacher) + (1.0 - decay) * sum(
        decay ** (99 - j) * probe(students[j]) for j in range(100))
    err = abs(probe(t) - closed)
    record("criterion 5: iterated EMA matches closed form over 100 steps",
           err <= 1e-7, f"err {err:.2e}")


# ---------------------------------------------------------------------------
# criteria 6-8: desk-scale study
# ---------------------------------------------------------------------------

ROWS = {
    "baseline": dict(use_nn=False, use_en=False, unlabeled=False),
    "full": dict(),
    "ua": dict(use_nn=False, use_en=False),
    "ua_nn": dict(use_en=False),
    "ua_en": dict(use_nn=False),
    "cosine_max": dict(reducer="max"),
    "euclidean_mean": dict(kernel="euclidean"),
    "euclidean_max": dict(kernel="euclidean", reducer="max"),
}


class DeskStudy:
    def __init__(self, data_dir):
        self.data_dir = data_dir
        self.ds = phantom.load_dataset(data_dir / "manifest.json")
        self.base_ds = DatasetSplit(self.ds.labeled, [], self.ds.validation,
                                    self.ds.test)
        self.test_cases = [(i, v, m) for i, (v, m) in enumerate(self.ds.test)]
        self.results = {}
        self.times = {}
        for seed in SEEDS:
            for row, spec in ROWS.items():
                self._run(row, seed, dict(spec))

    def _run(self, row, seed, spec):
        unlabeled = spec.pop("unlabeled", True)
        epochs = FULL_EPOCHS if unlabeled else BASE_EPOCHS
        cfg = trainer.TrainConfig(epochs=epochs, seed=seed, **spec)
        t0 = time.monotonic()
        res = trainer.fit(cfg, self.ds if unlabeled else self.base_ds, None)
        scored = _score_cases(res.best_state.teacher, self.test_cases)
        iou = sum(r[1] for r in scored) / len(scored)
        hd = sum(r[2] for r in scored) / len(scored)
        self.results[(row, seed)] = (iou, hd)
        self.times[(row, seed)] = time.monotonic() - t0
        print(f"  desk {row} seed {seed}: IoU {iou:.4f} HD95 {hd:.2f} "
              f"({self.times[(row, seed)]:.0f}s)", flush=True)

    def mean(self, row):
        vals = [self.results[(row, s)] for s in SEEDS]
        return (sum(v[0] for v in vals) / len(vals),
                sum(v[1] for v in vals) / len(vals))

    def row_time(self, row):
        return sum(self.times[(row, s)] for s in SEEDS)


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("desk")
    phantom.write_dataset(str(d), 60, 4, 12, 20, phantom.SpecRanges(), seed=101)
    return d


@pytest.fixture(scope="session")
def desk(desk_data):
    return DeskStudy(desk_data)


def test_criterion_6_desk_gain(desk):
    full_iou, full_hd = desk.mean("full")
    base_iou, base_hd = desk.mean("baseline")
    elapsed = desk.row_time("full") + desk.row_time("baseline")
    ok = (full_iou >= base_iou + 0.01 and full_hd <= base_hd
          and elapsed <= 1800)
    record("criterion 6: full method beats supervised baseline",
           ok, f"IoU {full_iou:.4f} vs {base_iou:.4f}, "
               f"HD95 {full_hd:.2f} vs {base_hd:.2f} mm, {elapsed:.0f}s")


def test_criterion_7_desk_ablation(desk):
    full_iou, full_hd = desk.mean("full")
    ua_iou, ua_hd = desk.mean("ua")
    four = {r: desk.mean(r)[0] for r in ("ua", "ua_nn", "ua_en", "full")}
    best = max(four.values())
    ok = (full_iou >= ua_iou - 0.005 and full_hd <= ua_hd
          and full_iou >= best - 0.005)
    record("criterion 7: ablation ordering across the four rows", ok,
           " ".join(f"{r} {v:.4f}" for r, v in four.items())
           + f"; HD95 full {full_hd:.2f} vs ua {ua_hd:.2f}")


def test_criterion_8_desk_kernel_robustness(desk):
    variants = ("full", "cosine_max", "euclidean_mean", "euclidean_max")
    ious = {v: desk.mean(v)[0] for v in variants}
    spread = max(ious.values()) - min(ious.values())
    record("criterion 8: kernel/reducer variants agree within 0.02 IoU",
           spread <= 0.02,
           " ".join(f"{v} {x:.4f}" for v, x in ious.items())
           + f"; spread {spread:.4f}")


# ---------------------------------------------------------------------------
# criterion 9: bitwise reproducibility through the CLI
# ---------------------------------------------------------------------------

def test_criterion_9_desk_reproducible_checkpoints(desk_data, tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps({"epochs": 2, "seed": 0}))
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        rc = cli.main(["train", "--config", str(cfg_path),
                       "--data", str(desk_data), "--out", str(out)])
        assert rc == 0
        outs.append(out)
    same = ((outs[0] / "best.vck1").read_bytes()
            == (outs[1] / "best.vck1").read_bytes())
    final_same = ((outs[0] / "final.vck1").read_bytes()
                  == (outs[1] / "final.vck1").read_bytes())
    record("criterion 9: identical runs produce byte-identical best.vck1",
           same and final_same, "best + final compared")
