"""Command-line interface.

Subcommands mirror the library surface: pair enumeration and subset
selection, protocol runs and ablations, report regeneration, label
transport, intensity profiling, pairwise registration, and synthetic
dataset generation for smoke tests.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .features import histogram_profile
from .geometry import AffineTransform
from .harness import (
    HarnessConfig,
    PairManifest,
    EvalRecord,
    emit_report,
    enumerate_pairs,
    load_subject_data,
    load_subjects,
    parse_method,
    run_ablation,
    run_protocol,
    select_subset,
    split_counts,
)
from .nifti import read_displacement_field, read_volume, write_volume
from .register import RegistrationConfig, affine_register, greedy_register
from .synth import make_dataset
from .transport import LabelTransportConfig, warp_labels


def save_affine_json(a: AffineTransform, path) -> None:
    Path(path).write_text(json.dumps(
        {"matrix": a.matrix.tolist()}, indent=2, sort_keys=True))


def load_affine_json(path) -> AffineTransform:
    doc = json.loads(Path(path).read_text())
    return AffineTransform(np.asarray(doc["matrix"], dtype=np.float64))


def load_transform(spec: str):
    """Resolve a CLI transform argument: 'identity', a .json affine, or a
    displacement-field NIfTI."""
    if spec == "identity":
        return AffineTransform.identity()
    if spec.endswith(".json"):
        return load_affine_json(spec)
    return read_displacement_field(spec)


def _registration_config(path: str | None) -> RegistrationConfig:
    if not path:
        return RegistrationConfig()
    doc = json.loads(Path(path).read_text())
    if "levels" in doc:
        doc["levels"] = tuple((int(f), int(n)) for f, n in doc["levels"])
    return replace(RegistrationConfig(), **doc)


def _transport_config(args) -> LabelTransportConfig:
    mode = {"prob": "probabilistic", "nearest": "nearest"}[args.mode]
    return LabelTransportConfig(mode=mode,
                                background_probability_floor=args.floor)


def _harness_config(args) -> HarnessConfig:
    return HarnessConfig(
        transport=_transport_config(args),
        registration=_registration_config(getattr(args, "config", None)),
        affine_iterations=args.affine_iterations,
        trim_percent=args.trim,
        threads=args.threads,
        label_groups={name: tuple(int(c) for c in codes.split(","))
                      for name, codes in
                      (g.split("=", 1) for g in args.label_group or [])},
    )


def _add_transport_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("prob", "nearest"), default="prob",
                   help="label transport mode (default: prob)")
    p.add_argument("--floor", type=float, default=0.5,
                   help="background probability floor for prob transport")


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="subjects manifest JSON")
    p.add_argument("--methods", nargs="+", required=True,
                   help="identity | greedy | greedy-lncc | external:<name>=<dir>")
    p.add_argument("--protocols", nargs="+", default=None,
                   help="label protocols to score (default: all in manifest)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--trim", type=float, default=5.0,
                   help="lower-tail trim percent for summaries")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: REGEVAL_THREADS or auto)")
    p.add_argument("--affine-iterations", type=int, default=50)
    p.add_argument("--config", default=None,
                   help="registration config JSON for engine methods")
    p.add_argument("--label-group", action="append", default=None,
                   metavar="NAME=1,2,3", help="extra label group to score")
    _add_transport_args(p)


def _protocols(subjects, requested):
    if requested:
        return list(requested)
    protocols = sorted({p for s in subjects for p in s.label_paths})
    if not protocols:
        raise SystemExit("manifest declares no label protocols")
    return protocols


def cmd_pairs(args) -> int:
    subjects, _ = load_subjects(args.manifest, check_paths=False)
    manifest = enumerate_pairs(subjects, split_rule=args.split_rule)
    manifest.save(args.out)
    for split, count in sorted(split_counts(manifest).items()):
        print(f"{split}: {count}")
    return 0


def cmd_subset(args) -> int:
    manifest = PairManifest.load(args.pairs)
    subset = select_subset(manifest, n=args.n, seed=args.seed)
    subset.save(args.out)
    print(f"selected {len(subset.pairs)} of {len(manifest.pairs)} pairs "
          f"(seed={args.seed})")
    return 0


def _provenance(args, manifest, cfg, subjects) -> dict:
    return {
        "command": args.command,
        "manifest_seed": manifest.seed,
        "selection": manifest.selection,
        "n_subjects": len(subjects),
        "n_pairs": len(manifest.pairs),
        "methods": list(args.methods),
        "transport_mode": cfg.transport.mode,
        "background_probability_floor": cfg.transport.background_probability_floor,
        "trim_percent": cfg.trim_percent,
        "threads": cfg.worker_count(),
    }


def cmd_run(args) -> int:
    subjects, base = load_subjects(args.manifest)
    data = load_subject_data(subjects, base)
    if args.pairs:
        manifest = PairManifest.load(args.pairs)
    else:
        manifest = enumerate_pairs(subjects)
    cfg = _harness_config(args)
    protocols = _protocols(subjects, args.protocols)
    records = run_protocol(data, manifest, args.methods, protocols, cfg)
    paths = emit_report(records, args.out_dir, trim_percent=cfg.trim_percent,
                        provenance=_provenance(args, manifest, cfg, subjects))
    n_failed = sum(1 for r in records if r.status != "ok")
    print(f"{len(records)} records ({n_failed} failed) -> {paths['summary_json']}")
    return 0


def cmd_ablate(args) -> int:
    subjects, base = load_subjects(args.manifest)
    data = load_subject_data(subjects, base)
    cfg = _harness_config(args)
    protocols = _protocols(subjects, args.protocols)
    result = run_ablation(data, args.variants, args.methods, protocols, cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for variant, records in result["records"].items():
        safe = variant.replace("=", "-").replace("x", "x")
        emit_report(records, out_dir / safe, trim_percent=cfg.trim_percent,
                    provenance={"command": "ablate", "variant": variant,
                                "methods": list(args.methods)})
    (out_dir / "ablation.json").write_text(json.dumps(
        {"variants": list(args.variants),
         "summaries": result["summaries"],
         "comparisons": result["comparisons"]},
        indent=2, sort_keys=True))
    print(f"{len(result['records'])} variants -> {out_dir / 'ablation.json'}")
    return 0


def cmd_report(args) -> int:
    docs = json.loads(Path(args.records).read_text())
    records = [EvalRecord.from_dict(d) for d in docs]
    provenance = None
    if args.provenance:
        provenance = json.loads(Path(args.provenance).read_text())
    paths = emit_report(records, args.out_dir, trim_percent=args.trim,
                        provenance=provenance)
    print(f"report -> {paths['summary_json']}")
    return 0


def cmd_warp_labels(args) -> int:
    labels = read_volume(args.labels, kind="label")
    transform = load_transform(args.transform)
    target = read_volume(args.like).header if args.like else None
    warped = warp_labels(labels, transform, target=target,
                         cfg=_transport_config(args))
    write_volume(warped, args.out)
    print(f"warped labels -> {args.out}")
    return 0


def cmd_profile(args) -> int:
    image = read_volume(args.image)
    profile = histogram_profile(image)
    doc = {
        "modality_guess": profile.modality_guess,
        "classifier": profile.classifier,
        "n_peaks": len(profile.peaks),
        "peaks": [{"bin": int(i), "prominence": float(p)}
                  for i, p in profile.peaks],
        "bin_edges": [float(x) for x in profile.bin_edges],
        "counts": [int(c) for c in profile.counts],
    }
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(f"{profile.modality_guess} ({len(profile.peaks)} peaks) -> {args.out}")
    return 0


def cmd_register(args) -> int:
    fixed = read_volume(args.fixed)
    moving = read_volume(args.moving)
    cfg = replace(_registration_config(args.config), similarity=args.similarity)
    init = None
    if args.affine_iterations > 0:
        init = affine_register(fixed, moving, similarity=args.similarity,
                               iterations=args.affine_iterations, cfg=cfg)
    result = greedy_register(fixed, moving, init=init, cfg=cfg)
    from .nifti import write_displacement_field

    write_displacement_field(result.total_field(), args.out_field)
    if args.out_affine:
        save_affine_json(result.affine, args.out_affine)
    trace_path = _sibling_trace_path(args.out_field)
    with open(trace_path, "w", encoding="utf-8") as fh:
        json.dump({"similarity": args.similarity,
                   "loss_trace": [[int(lv), int(it), float(loss)]
                                  for lv, it, loss in result.loss_trace],
                   "min_jacobian": float(result.min_jacobian),
                   "peak_memory_bytes": int(result.peak_memory_bytes)},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    final = result.loss_trace[-1][2] if result.loss_trace else float("nan")
    print(f"final loss {final:.6g}, min Jacobian {result.min_jacobian:.4f} "
          f"-> {args.out_field} (trace {trace_path})")
    return 0


def _sibling_trace_path(out_field: str) -> str:
    name = str(out_field)
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)] + ".trace.json"
    return name + ".trace.json"


def cmd_synth(args) -> int:
    path = make_dataset(args.out_dir, n_subjects=args.subjects,
                        dims=(args.dims,) * 3, seed=args.seed)
    print(f"synthetic dataset -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regeval",
        description="Bias-aware evaluation harness for deformable registration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pairs", help="enumerate ordered registration pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split-rule", choices=("by-sequence", "none"),
                   default="by-sequence")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("subset", help="seeded subset of a pair manifest")
    p.add_argument("--pairs", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_subset)

    p = sub.add_parser("run", help="run the evaluation protocol")
    _add_run_args(p)
    p.add_argument("--pairs", default=None,
                   help="pair manifest JSON (default: all ordered pairs)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="rerun the protocol across preprocessing variants")
    _add_run_args(p)
    p.add_argument("--variants", nargs="+", required=True,
                   help="native | crop=AxBxC | orient=RAS | iso=<mm>")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="regenerate a report from records.json")
    p.add_argument("--records", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--trim", type=float, default=5.0)
    p.add_argument("--provenance", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("warp-labels", help="transport a labelmap through a transform")
    p.add_argument("--labels", required=True)
    p.add_argument("--transform", required=True,
                   help="'identity', affine .json, or displacement-field NIfTI")
    p.add_argument("--like", default=None, help="reference grid volume")
    p.add_argument("--out", required=True)
    _add_transport_args(p)
    p.set_defaults(func=cmd_warp_labels)

    p = sub.add_parser("profile", help="histogram profile and modality guess")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("register", help="register one pair (affine + greedy)")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--similarity", choices=("ssd", "lncc", "mind"),
                   default="ssd")
    p.add_argument("--out-field", required=True)
    p.add_argument("--out-affine", default=None)
    p.add_argument("--config", default=None, help="registration config JSON")
    p.add_argument("--affine-iterations", type=int, default=50)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("synth", help="generate a synthetic demo dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--subjects", type=int, default=3)
    p.add_argument("--dims", type=int, default=48)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
