"""Command-line interface.

Subcommands: gen-data, synth-oov, mine, ld-loss, train-toy, eval. Exit
codes: 0 success, 1 domain or input errors, 2 usage errors. Every command
confines its file output to --out (written atomically) and drops a
resolved_config.json there for provenance.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .alignment import softmax
from .attribution import (
    GradientMapSet,
    attribution_stats,
    mine_pseudo_oov,
    uncertainty,
)
from .density import LDPConfig, density_threshold, kde_density, ld_hinge
from .io import (
    JsonlError,
    atomic_write_text,
    detection_from_record,
    ground_truth_from_record,
    labeled_embedding_from_record,
    load_config,
    read_jsonl,
    write_jsonl,
)
from .metrics import ClassSplit, EvalSet, full_report
from .prompts import MaskedNoiseSpec, PromptQueue, fit_class_gaussians, synthesize_oov_prompt
from .types import RunConfig, derived_rng

__all__ = ["main"]


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _write_resolved_config(out_dir: Path, cfg: RunConfig) -> None:
    atomic_write_text(
        out_dir / "resolved_config.json",
        json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n",
    )


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing input file: {p}")
    return p


def _proposal_record(p: harness.Proposal) -> dict:
    rec = {
        "proposal_id": p.proposal_id,
        "values": [float(x) for x in p.feature],
        "box": list(p.box),
        "class_index": int(p.label),
        "role": p.role,
    }
    if p.gt_box is not None:
        rec["gt_box"] = list(p.gt_box)
    return rec


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    dataset = harness.generate_synthetic_dataset(cfg, derived_rng(cfg.seed, 1))
    state = harness.init_state(dataset, cfg, cfg.lambda_ld, derived_rng(cfg.seed, 2))

    def scene_record(scene):
        return {
            "image_id": scene.image_id,
            "proposals": [_proposal_record(p) for p in scene.proposals],
            "ground_truth": [
                {"box": list(g.box), "class_index": g.class_index, "image_id": g.image_id}
                for g in scene.ground_truth
            ],
        }

    write_jsonl(out / "train_scenes.jsonl", (scene_record(s) for s in dataset.train))
    write_jsonl(out / "test_scenes.jsonl", (scene_record(s) for s in dataset.test))
    write_jsonl(
        out / "prompt_queue.jsonl",
        (
            {"values": [float(x) for x in v], "class_index": i, "role": "foreground"}
            for i, arr in enumerate(dataset.queue.embeddings)
            for v in arr
        ),
    )

    # gradient maps and feature bank under the initial projection, so the
    # mine and ld-loss commands can run standalone on real harness data
    grad_records = []
    bank_rows = []
    table = state.prompt_table(harness.eval_oov_prompt(state, cfg, derived_rng(cfg.seed, 3)))
    prompts = table.as_matrix()
    for scene in dataset.train:
        feats = np.stack([p.feature for p in scene.proposals])
        u, _, z = harness.project_features(state, feats)
        probs = softmax((z @ prompts.T) / cfg.temperature_tau)
        for i, p in enumerate(scene.proposals):
            grad_records.append(
                {
                    "proposal_id": p.proposal_id,
                    "maps": harness.synth_gradient_maps(probs[i], cfg.map_size).tolist(),
                    "is_foreground": p.role == "foreground",
                    "values": [float(x) for x in u[i]],
                }
            )
            if p.role == "foreground" and p.label < cfg.n_seen:
                bank_rows.append({"values": [float(x) for x in u[i]]})
    write_jsonl(out / "gradient_maps.jsonl", grad_records)
    write_jsonl(out / "bank.jsonl", bank_rows)
    _write_resolved_config(out, cfg)
    print(
        f"wrote {len(dataset.train)} train scenes, {len(dataset.test)} test scenes, "
        f"{sum(len(a) for a in dataset.queue.embeddings)} queue prompts to {out}"
    )
    return 0


def cmd_synth_oov(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    samples = [
        labeled_embedding_from_record(r) for r in read_jsonl(_require_file(args.queue))
    ]
    queue = PromptQueue.from_labeled(samples)
    spec = MaskedNoiseSpec(
        mask_ratio=cfg.mask_ratio, alpha_noise=cfg.alpha_noise, noise_sigma=cfg.noise_sigma
    )
    rng = derived_rng(cfg.seed, 10)
    model = fit_class_gaussians(queue, spec, cfg.beta_reg, rng)
    prompt, candidates = synthesize_oov_prompt(
        model, cfg.pool_size, rng, return_candidates=True
    )
    write_jsonl(out / "oov_prompt.jsonl", [{"values": [float(x) for x in prompt]}])
    write_jsonl(
        out / "candidates.jsonl",
        (
            {
                "class_index": c.class_index,
                "mahalanobis_sq": c.mahalanobis_sq,
                "log_density": c.log_density,
                "selected": c.selected,
            }
            for c in candidates
        ),
    )
    _write_resolved_config(out, cfg)
    chosen = next(c for c in candidates if c.selected)
    print(
        f"synthesized OOV prompt from class {chosen.class_index} "
        f"(mahalanobis^2 {chosen.mahalanobis_sq:.3f}, log density {chosen.log_density:.3f}); "
        f"pool {len(candidates)} candidates"
    )
    return 0


def _gset_from_record(rec: dict) -> tuple[GradientMapSet, np.ndarray]:
    for key in ("proposal_id", "maps", "is_foreground"):
        if key not in rec:
            raise ValueError(f"gradient-map record is missing field {key!r}")
    gset = GradientMapSet(
        proposal_id=str(rec["proposal_id"]),
        maps=np.asarray(rec["maps"], dtype=np.float64),
        is_foreground=bool(rec["is_foreground"]),
    )
    feature = np.asarray(rec.get("values", []), dtype=np.float64)
    return gset, feature


def cmd_mine(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    proposals = [_gset_from_record(r) for r in read_jsonl(_require_file(args.grads))]
    batch = mine_pseudo_oov(proposals, cfg.top_k, cfg.fg_bg_ratio)
    stats = {g.proposal_id: attribution_stats(g) for g, _ in proposals}
    records = []
    for group, mined in (("foreground", batch.foreground), ("background", batch.background)):
        for m in mined:
            s = stats[m.proposal_id]
            records.append(
                {
                    "group": group,
                    "proposal_id": m.proposal_id,
                    "uncertainty": m.uncertainty,
                    "x_g": [float(x) for x in s.x_g],
                    "alpha_g": [int(a) for a in s.alpha_g],
                    "values": [float(x) for x in m.feature],
                }
            )
    write_jsonl(out / "pseudo_oov.jsonl", records)
    _write_resolved_config(out, cfg)
    print(
        f"mined {len(batch.foreground)} foreground + {len(batch.background)} background "
        f"pseudo-OOV proposals from {len(proposals)} candidates"
    )
    return 0


def cmd_ld_loss(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    batch_recs = list(read_jsonl(_require_file(args.batch)))
    bank_recs = list(read_jsonl(_require_file(args.bank)))
    if not bank_recs:
        raise ValueError("feature bank is empty")
    bank = np.stack([np.asarray(r["values"], dtype=np.float64) for r in bank_recs])
    tau_hat = cfg.tau_hat
    if tau_hat is None:
        tau_hat = density_threshold(bank, cfg.h, cfg.tau_percentile)
    ldp = LDPConfig(h=cfg.h, tau_hat=tau_hat, focal_alpha=cfg.focal_alpha)

    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["sample_id", "group", "s", "density", "log_density", "weight", "loss", "grad_norm"]
    )
    total = 0.0
    for i, rec in enumerate(batch_recs):
        z = np.asarray(rec["values"], dtype=np.float64)
        s = float(rec.get("s", 0.5))
        loss, grad = ld_hinge(z, bank, ldp, s)
        dens = kde_density(z, bank, cfg.h)
        weight = s * (1.0 - s) ** cfg.focal_alpha
        writer.writerow(
            [
                rec.get("proposal_id", f"sample{i}"),
                rec.get("group", "foreground"),
                repr(s),
                repr(dens),
                repr(float(np.log(dens))),
                repr(weight),
                repr(loss),
                repr(float(np.linalg.norm(grad))),
            ]
        )
        total += loss
    atomic_write_text(out / "ld_losses.csv", buf.getvalue())
    _write_resolved_config(out, cfg)
    print(
        f"evaluated low-density prior on {len(batch_recs)} samples "
        f"(bank {bank.shape[0]} x {bank.shape[1]}, tau_hat {tau_hat:.6g}); "
        f"summed loss {total:.6f}"
    )
    return 0


def cmd_train_toy(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = harness.run_experiment(cfg, out_dir=out)
    _write_resolved_config(out, cfg)
    for arm in (report.with_prior, report.baseline):
        m = arm.metrics
        print(
            f"{arm.name}: mAP_IV/mAP_OOV {m.map_iv:.2f}/{m.map_oov:.2f}  "
            f"mAP_Seen/mAP_Unseen {m.map_seen:.2f}/{m.map_unseen:.2f}  "
            f"R/AR {m.r_oov:.2f}/{m.ar_oov:.2f}  WI/AOSE {m.wi:.2f}/{m.aose}"
        )
    print(
        f"mean OOV density ratio (prior/baseline): {report.density_ratio:.4f}; "
        f"R_OOV gain: {report.r_oov_gain:+.2f} points"
    )
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    dets = [detection_from_record(r) for r in read_jsonl(_require_file(args.dets))]
    gts = [ground_truth_from_record(r) for r in read_jsonl(_require_file(args.gt))]
    with open(_require_file(args.splits), "r", encoding="utf-8") as fh:
        splits = json.load(fh)
    split = ClassSplit(
        seen=splits["seen"], unseen=splits["unseen"], oov=int(splits["oov"])
    )
    eval_set = EvalSet(
        detections=dets,
        ground_truth=gts,
        iou_threshold=args.iou,
        n_class_slots=split.oov + 1,
    )
    report = full_report(eval_set, split)
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["map_iv", "map_oov", "map_seen", "map_unseen", "r_oov", "ar_oov", "wi", "aose"]
    )
    writer.writerow(
        [
            repr(report.map_iv),
            repr(report.map_oov),
            repr(report.map_seen),
            repr(report.map_unseen),
            repr(report.r_oov),
            repr(report.ar_oov),
            repr(report.wi),
            report.aose,
        ]
    )
    atomic_write_text(out / "metrics.csv", buf.getvalue())
    print(
        f"mAP_IV/mAP_OOV {report.map_iv:.2f}/{report.map_oov:.2f}  "
        f"mAP_Seen/mAP_Unseen {report.map_seen:.2f}/{report.map_unseen:.2f}  "
        f"R/AR {report.r_oov:.2f}/{report.ar_oov:.2f}  "
        f"WI/AOSE {report.wi:.2f}/{report.aose}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oovkit",
        description="Out-of-vocabulary detection toolkit: synthesis, mining, "
        "density priors, training harness, and open-set metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--config", help="RunConfig JSON or TOML file")
        p.add_argument("--seed", type=int, help="seed override")
        if out_default is None:
            p.add_argument("--out", required=True, help="output directory")
        else:
            p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("gen-data", help="generate the synthetic embedding dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("synth-oov", help="synthesize a virtual OOV prompt embedding")
    p.add_argument("--queue", required=True, help="prompt queue JSONL (values, class_index)")
    common(p)
    p.set_defaults(func=cmd_synth_oov)

    p = sub.add_parser("mine", help="mine pseudo-OOV proposals from gradient maps")
    p.add_argument("--grads", required=True, help="gradient-map sets JSONL")
    common(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("ld-loss", help="evaluate the low-density prior per sample")
    p.add_argument("--batch", required=True, help="pseudo-OOV batch JSONL")
    p.add_argument("--bank", required=True, help="feature bank JSONL")
    common(p)
    p.set_defaults(func=cmd_ld_loss)

    p = sub.add_parser("train-toy", help="run the paired synthetic training experiment")
    common(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval", help="evaluate detections against ground truth")
    p.add_argument("--dets", required=True, help="detections JSONL")
    p.add_argument("--gt", required=True, help="ground-truth JSONL")
    p.add_argument("--splits", required=True, help="class split JSON (seen/unseen/oov)")
    p.add_argument("--iou", type=float, default=0.5, help="IoU threshold")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except JsonlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
