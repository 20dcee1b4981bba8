"""Console entry point: gen-data, train, eval, ablate, pseudolabel.

Heavy imports happen inside the command handlers so the thread environment
(VOXSEED_THREADS) can be applied to the BLAS runtime before numpy loads.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import json
import os
import sys


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _apply_thread_env():
    n = os.environ.get("VOXSEED_THREADS", "").strip()
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, n)


def build_parser():
    p = _Parser(prog="voxseed",
                description="Semi-supervised volumetric segmentation toolkit")
    sub = p.add_subparsers(dest="command", metavar="command")

    g = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n-train", type=int, default=60)
    g.add_argument("--n-labeled", type=int, default=4)
    g.add_argument("--n-val", type=int, default=12)
    g.add_argument("--n-test", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--delta-max", type=float, default=None,
                   help="cap on the lobe deformation amplitude")
    g.add_argument("--artifact-prob", type=float, default=None,
                   help="probability a case receives darkening artifacts")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training job")
    t.add_argument("--config", default=None, help="JSON training config file")
    t.add_argument("--data", required=True, help="dataset manifest.json")
    t.add_argument("--out", required=True, help="run output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset manifest.json")
    e.add_argument("--split", choices=("validation", "test"), default="test")
    e.add_argument("--out", default=None, help="optional CSV output path")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score the ablation grid")
    a.add_argument("--config", default=None, help="JSON training config file")
    a.add_argument("--data", required=True, help="dataset manifest.json")
    a.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("pseudolabel",
                       help="dump uncertainty and propagated labels for one case")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="dataset manifest.json")
    s.add_argument("--case", required=True, help="case id from the manifest")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", default=None, help="JSON training config file")
    s.add_argument("--labeled-case", default=None,
                   help="labeled case id donating embeddings (default: first)")
    s.set_defaults(func=cmd_pseudolabel)
    return p


def _load_config(path):
    from .trainer import TrainConfig
    if path is None:
        return TrainConfig().validate()
    with open(path) as fh:
        return TrainConfig.from_dict(json.load(fh))


def _manifest_path(data):
    return data if os.path.isfile(data) else os.path.join(data, "manifest.json")


def _manifest_cases(manifest_path, split, labeled_only=False):
    """(case_id, Volume3D, Mask3D) triples for one split, manifest order."""
    from pathlib import Path

    from .volume import load_mask, load_volume
    root = Path(manifest_path).parent
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    out = []
    for rec in manifest["cases"]:
        if rec["split"] != split or (labeled_only and not rec["labeled"]):
            continue
        out.append((rec["id"], load_volume(root / rec["vol"]),
                    load_mask(root / rec["mask"])))
    return out


def cmd_gen_data(args):
    from .phantom import SpecRanges, write_dataset
    ranges = SpecRanges()
    if args.delta_max is not None:
        ranges.delta = (ranges.delta[0], args.delta_max)
    if args.artifact_prob is not None:
        ranges.artifact_prob = args.artifact_prob
    manifest = write_dataset(args.out, args.n_train, args.n_labeled,
                             args.n_val, args.n_test, ranges, args.seed)
    c = manifest["counts"]
    print(f"wrote {args.out}/manifest.json: {c['train']} train "
          f"({c['labeled']} labeled), {c['validation']} validation, "
          f"{c['test']} test")
    return 0


def cmd_train(args):
    from .phantom import load_dataset
    from .trainer import fit
    config = _load_config(args.config)
    dataset = load_dataset(_manifest_path(args.data))
    result = fit(config, dataset, args.out)
    print(f"best epoch {result.best_epoch}: val IoU {result.best_iou:.4f}, "
          f"val HD95 {result.best_hd95:.3f} mm; checkpoints in {args.out}")
    return 0


def _checkpoint_teacher(path):
    from .net import load_checkpoint
    student, teacher, opt, iteration, total = load_checkpoint(path)
    return teacher, iteration, total


def _score_cases(teacher, cases):
    from .trainer import _predict_batch, case_metrics
    from .volume import Mask3D
    preds = _predict_batch(teacher, [v for _, v, _ in cases])
    rows = []
    for pred_arr, (case_id, vol, gt) in zip(preds, cases):
        iou, hd = case_metrics(Mask3D(pred_arr, vol.spacing), gt)
        rows.append((case_id, iou, hd))
    return rows


def cmd_eval(args):
    manifest = _manifest_path(args.data)
    cases = _manifest_cases(manifest, args.split)
    if not cases:
        raise ValueError(f"no cases in split {args.split!r}")
    teacher, _, _ = _checkpoint_teacher(args.checkpoint)
    rows = _score_cases(teacher, cases)
    for case_id, iou, hd in rows:
        print(json.dumps({"case_id": case_id, "iou": iou, "hd95_mm": hd}))
    mean_iou = sum(r[1] for r in rows) / len(rows)
    mean_hd = sum(r[2] for r in rows) / len(rows)
    print(json.dumps({"split": args.split, "cases": len(rows),
                      "mean_iou": mean_iou, "mean_hd95_mm": mean_hd}))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("case_id,iou,hd95_mm\n")
            for case_id, iou, hd in rows:
                fh.write(f"{case_id},{iou:.6f},{hd:.6f}\n")
    return 0


ABLATION_ROWS = (
    ("baseline", False, False, False),
    ("ua", True, False, False),
    ("ua_nn", True, True, False),
    ("ua_nn_en", True, True, True),
    ("ua_en", True, False, True),
)


def run_ablation_row(name, use_unlabeled, use_nn, use_en, config, dataset,
                     test_cases, seed, out_dir=None):
    """Train one grid cell and score its best teacher on the test cases."""
    from dataclasses import replace

    from .phantom import DatasetSplit
    from .trainer import fit
    cfg = replace(config, seed=seed, use_nn=use_nn, use_en=use_en)
    ds = dataset if use_unlabeled else DatasetSplit(
        dataset.labeled, [], dataset.validation, dataset.test)
    result = fit(cfg, ds, out_dir)
    rows = _score_cases(result.best_state.teacher, test_cases)
    mean_iou = sum(r[1] for r in rows) / len(rows)
    mean_hd = sum(r[2] for r in rows) / len(rows)
    return mean_iou, mean_hd


def cmd_ablate(args):
    from pathlib import Path

    from .phantom import load_dataset
    config = _load_config(args.config)
    manifest = _manifest_path(args.data)
    dataset = load_dataset(manifest)
    test_cases = _manifest_cases(manifest, "test")
    if not test_cases:
        raise ValueError("ablation needs a nonempty test split")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    if not seeds:
        raise ValueError("at least one seed is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    detail = []
    summary = []
    for name, use_unlabeled, use_nn, use_en in ABLATION_ROWS:
        ious, hds = [], []
        for seed in seeds:
            run_dir = out / name / f"seed{seed}"
            iou, hd = run_ablation_row(name, use_unlabeled, use_nn, use_en,
                                       config, dataset, test_cases, seed, run_dir)
            detail.append((name, seed, iou, hd))
            ious.append(iou)
            hds.append(hd)
            print(f"{name} seed {seed}: test IoU {iou:.4f}, HD95 {hd:.3f} mm")
        summary.append((name, sum(ious) / len(ious), sum(hds) / len(hds)))
    with open(out / "results.csv", "w") as fh:
        fh.write("row,mean_iou,mean_hd95\n")
        for name, iou, hd in summary:
            fh.write(f"{name},{iou:.6f},{hd:.6f}\n")
    with open(out / "details.csv", "w") as fh:
        fh.write("row,seed,iou,hd95_mm\n")
        for name, seed, iou, hd in detail:
            fh.write(f"{name},{seed},{iou:.6f},{hd:.6f}\n")
    for name, iou, hd in summary:
        print(f"{name}: mean IoU {iou:.4f}, mean HD95 {hd:.3f} mm")
    return 0


def cmd_pseudolabel(args):
    from pathlib import Path

    import numpy as np

    from . import nnlabel, uncertainty
    from .net import forward_batch, load_checkpoint
    from .volume import (FeatureMap, Volume3D, add_gaussian_noise, save_mask,
                         save_volume)
    config = _load_config(args.config)
    student, teacher, _, iteration, total = load_checkpoint(args.checkpoint)
    manifest = _manifest_path(args.data)
    by_id = {cid: (v, m) for cid, v, m in
             _manifest_cases(manifest, "train") + _manifest_cases(manifest, "validation")
             + _manifest_cases(manifest, "test")}
    if args.case not in by_id:
        raise ValueError(f"case {args.case!r} not found in manifest")
    vol, _ = by_id[args.case]
    labeled = _manifest_cases(manifest, "train", labeled_only=True)
    if not labeled:
        raise ValueError("manifest holds no labeled training case for embeddings")
    if args.labeled_case is None:
        lab_id, lab_vol, lab_mask = labeled[0]
    else:
        match = [c for c in labeled if c[0] == args.labeled_case]
        if not match:
            raise ValueError(f"labeled case {args.labeled_case!r} not found")
        lab_id, lab_vol, lab_mask = match[0]

    rng = np.random.default_rng(config.seed)
    lam = uncertainty.uncertainty_threshold(iteration, max(total, 1))
    umap, probs, pseudo_t = uncertainty.mc_uncertainty(
        teacher, vol, config.mc_passes, config.teacher_noise, rng)
    reliable, unreliable = uncertainty.reliability_split(umap, lam)

    weak_l = add_gaussian_noise(lab_vol, config.teacher_noise, rng)
    f_l = FeatureMap(forward_batch(teacher, weak_l.data[None, None], False)
                     .penultimate[0], lab_vol.spacing)
    strong_u = add_gaussian_noise(vol, config.student_noise, rng)
    f_u = FeatureMap(forward_batch(student, strong_u.data[None, None], False)
                     .penultimate[0], vol.spacing)
    kp, km = nnlabel.ensemble_similarity(lab_mask, f_l, f_u, config.k, config.l,
                                         config.band, config.choice(), rng)
    pseudo_nn = nnlabel.pseudo_label_nn(kp, km)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(out / "uncertainty.vv1", Volume3D(umap.data, vol.spacing))
    save_volume(out / "teacher_prob_fg.vv1", Volume3D(probs.data[1], vol.spacing))
    save_mask(out / "reliable.vv1", reliable)
    save_mask(out / "pseudo_teacher.vv1", pseudo_t)
    save_volume(out / "k_plus.vv1", Volume3D(kp.values.astype(np.float32), vol.spacing))
    save_volume(out / "k_minus.vv1", Volume3D(km.values.astype(np.float32), vol.spacing))
    save_mask(out / "pseudo_nn.vv1", pseudo_nn)
    frac = float(reliable.data.mean())
    with open(out / "summary.json", "w") as fh:
        json.dump({"case": args.case, "labeled_case": lab_id,
                   "iteration": iteration, "total_iterations": total,
                   "lambda": lam, "reliable_fraction": frac}, fh, indent=2)
        fh.write("\n")
    print(f"wrote {out}: lambda {lam:.4f}, reliable fraction {frac:.3f}")
    return 0


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    _apply_thread_env()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as err:  # --help and friends
        return 0 if err.code in (0, None) else 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - boundary turns failures into exit 2
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
