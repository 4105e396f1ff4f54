"""Evaluation harness: manifests, pair enumeration, protocol runs, ablations,
and report emission.

Pairs are ordered (both directions count), so n subjects give n(n-1) pairs.
With the by-sequence split rule each pair is tagged same-sequence
("MPRAGE-to-MPRAGE", "MP2RAGE-to-MP2RAGE", ...) or "cross-sequence".
Subsets are drawn without replacement by a counter-based Philox generator
keyed by the seed, then reordered to manifest order, so selection is a pure
function of (manifest, n, seed) on every platform.

One bias control is enforced mechanically rather than by convention: any
record for a cross-sequence pair produced by a feature-capable method must
carry the multimodal similarity ("mind"). The run loop selects it
automatically and a validation pass rejects violations.

Per-pair failures (missing external transform, grid mismatch, memory
exhaustion) become failure rows with a reason code; they are excluded from
summaries and the exclusion count is reported, because a method falling
over on a pair is a finding, not an excuse to drop the pair silently.

Reports are split by volatility: dice_scores.csv holds only deterministic
values (stable for golden-file comparison), records.csv adds runtimes and
memory, summary.json carries trimmed summaries, effect sizes, violin data,
and a provenance block. Regenerating a report from the same records is
byte-identical.
"""
from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    GridMismatchError,
    LabelIntegrityError,
    ManifestError,
    NiftiCorruptionError,
    NiftiFormatError,
    OptimizationFailureError,
    RegevalError,
    TransformIntegrityError,
)
from .geometry import AffineTransform, crop_or_pad, resample
from .metrics import DiceRecord, dice, trim_count
from .nifti import read_displacement_field, read_volume
from .register import (
    RegistrationConfig,
    affine_register,
    greedy_register,
    track_peak_memory,
)
from .stats import effect_size_report, summary, violin
from .transport import LabelTransportConfig, warp_labels
from .volume import LabelVolume, Volume, reorient

CONTRASTS = ("T1w", "T2w", "T2*", "FLAIR")
SEQUENCES = ("MPRAGE", "MP2RAGE", "other")
MULTIMODAL_SIMILARITY = "mind"

REASON_MISSING_TRANSFORM = "missing-transform"
REASON_GRID_MISMATCH = "grid-mismatch"
REASON_RESOURCE_EXHAUSTED = "resource-exhausted"
REASON_OPTIMIZATION_FAILURE = "optimization-failure"
REASON_IO_ERROR = "io-error"


# ---------------------------------------------------------------------------
# subjects and pairs


@dataclass
class SubjectEntry:
    subject_id: str
    image_path: str
    label_paths: dict
    contrast: str = "T1w"
    sequence: str = "other"
    native_spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.contrast not in CONTRASTS:
            raise ManifestError(
                f"{self.subject_id}: contrast {self.contrast!r} not in {CONTRASTS}")
        if self.sequence not in SEQUENCES:
            raise ManifestError(
                f"{self.subject_id}: sequence {self.sequence!r} not in {SEQUENCES}")
        self.native_spacing = tuple(float(s) for s in self.native_spacing)


def load_subjects(manifest_path, check_paths: bool = True):
    """Read a subjects manifest (JSON); returns (entries, base_dir)."""
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {manifest_path}: {exc}") from exc
    base = manifest_path.parent
    entries = []
    seen = set()
    for raw in doc.get("subjects", []):
        entry = SubjectEntry(
            subject_id=raw["subject_id"],
            image_path=raw["image_path"],
            label_paths=dict(raw.get("label_paths", {})),
            contrast=raw.get("contrast", "T1w"),
            sequence=raw.get("sequence", "other"),
            native_spacing=tuple(raw.get("native_spacing", (1.0, 1.0, 1.0))),
        )
        if entry.subject_id in seen:
            raise ManifestError(f"duplicate subject_id {entry.subject_id!r}")
        seen.add(entry.subject_id)
        if check_paths:
            for p in [entry.image_path, *entry.label_paths.values()]:
                if not (base / p).exists():
                    raise ManifestError(f"{entry.subject_id}: missing file {p}")
        entries.append(entry)
    return entries, base


@dataclass(frozen=True)
class Pair:
    fixed_id: str
    moving_id: str
    split: str = "all"


@dataclass
class PairManifest:
    pairs: list
    seed: int | None = None
    selection: str = "all"

    def to_dict(self) -> dict:
        return {"pairs": [[p.fixed_id, p.moving_id, p.split] for p in self.pairs],
                "seed": self.seed, "selection": self.selection}

    @classmethod
    def from_dict(cls, doc: dict) -> "PairManifest":
        pairs = [Pair(f, m, s) for f, m, s in doc["pairs"]]
        return cls(pairs=pairs, seed=doc.get("seed"),
                   selection=doc.get("selection", "all"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "PairManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def enumerate_pairs(subjects, split_rule: str = "by-sequence") -> PairManifest:
    """All ordered (fixed, moving) pairs, each tagged with its split."""
    if split_rule not in ("by-sequence", "none"):
        raise ValueError(f"split_rule must be 'by-sequence' or 'none', got {split_rule!r}")
    ids = [s.subject_id for s in subjects]
    if len(ids) != len(set(ids)):
        raise ManifestError("duplicate subject ids in manifest")
    if len(ids) < 2:
        raise ManifestError("pair enumeration needs at least 2 subjects")
    seq = {s.subject_id: s.sequence for s in subjects}
    pairs = []
    for f in ids:
        for m in ids:
            if f == m:
                continue
            if split_rule == "none":
                split = "all"
            elif seq[f] == seq[m]:
                split = f"{seq[f]}-to-{seq[m]}"
            else:
                split = "cross-sequence"
            pairs.append(Pair(f, m, split))
    return PairManifest(pairs=pairs, seed=None, selection="all")


def select_subset(manifest: PairManifest, n: int, seed: int) -> PairManifest:
    """Seeded sample of n pairs without replacement, in manifest order."""
    total = len(manifest.pairs)
    if n > total:
        raise ValueError(f"subset size {n} exceeds pair count {total}")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    idx = np.sort(rng.choice(total, size=n, replace=False))
    pairs = [manifest.pairs[i] for i in idx]
    return PairManifest(pairs=pairs, seed=int(seed), selection=f"subset({n})")


def split_counts(manifest: PairManifest) -> dict:
    counts = {}
    for p in manifest.pairs:
        counts[p.split] = counts.get(p.split, 0) + 1
    counts["total"] = len(manifest.pairs)
    return counts


# ---------------------------------------------------------------------------
# methods and run configuration


@dataclass(frozen=True)
class MethodSpec:
    """How to obtain a transform for a pair.

    kind "identity" is the null baseline, "engine" runs the in-repo affine +
    greedy registration, "external" ingests displacement fields from
    ``transforms_dir/<fixed>__<moving>.nii.gz``. Only feature-capable
    methods switch to the multimodal similarity on cross-sequence pairs.
    """

    name: str
    kind: str
    similarity: str = "ssd"
    feature_capable: bool = False
    transforms_dir: str | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "engine", "external"):
            raise ValueError(f"unknown method kind {self.kind!r}")
        if self.kind == "external" and not self.transforms_dir:
            raise ValueError("external methods need transforms_dir")


def parse_method(text: str) -> MethodSpec:
    """Parse a CLI method token.

    identity | greedy | greedy-lncc | external:<name>=<dir>
    """
    if text == "identity":
        return MethodSpec(name="identity", kind="identity", similarity="none")
    if text in ("greedy", "greedy-ssd"):
        return MethodSpec(name=text, kind="engine", similarity="ssd",
                          feature_capable=True)
    if text == "greedy-lncc":
        return MethodSpec(name=text, kind="engine", similarity="lncc",
                          feature_capable=True)
    if text.startswith("external:"):
        body = text[len("external:"):]
        name, sep, path = body.partition("=")
        if not sep or not name or not path:
            raise ValueError(f"external method must be external:<name>=<dir>, got {text!r}")
        return MethodSpec(name=name, kind="external", similarity="external",
                          transforms_dir=path)
    raise ValueError(f"unknown method {text!r}")


@dataclass
class HarnessConfig:
    transport: LabelTransportConfig = field(default_factory=LabelTransportConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    affine_iterations: int = 50
    trim_percent: float = 5.0
    d_variant: str = "pooled"
    label_groups: dict = field(default_factory=dict)  # name -> label codes
    volume_weighted: bool = False
    threads: int | None = None

    def worker_count(self) -> int:
        if self.threads is not None:
            return max(1, int(self.threads))
        env = os.environ.get("REGEVAL_THREADS")
        if env:
            return max(1, int(env))
        return min(4, os.cpu_count() or 1)


@dataclass
class EvalRecord:
    pair: Pair
    method: str
    protocol: str
    similarity: str
    transport_mode: str
    contrast: str
    status: str = "ok"
    failure_reason: str = ""
    dice: DiceRecord | None = None
    extra_groups: list = field(default_factory=list)
    runtime_seconds: float = 0.0
    peak_memory_bytes: int = 0
    min_jacobian: float | None = None

    def to_dict(self) -> dict:
        def dice_dict(d):
            if d is None:
                return None
            return {"pair_id": d.pair_id, "label_group": d.label_group,
                    "macro_mean": d.macro_mean,
                    "per_label": {str(k): v for k, v in d.per_label.items()}}

        return {"pair": [self.pair.fixed_id, self.pair.moving_id, self.pair.split],
                "method": self.method, "protocol": self.protocol,
                "similarity": self.similarity,
                "transport_mode": self.transport_mode, "contrast": self.contrast,
                "status": self.status, "failure_reason": self.failure_reason,
                "dice": dice_dict(self.dice),
                "extra_groups": [dice_dict(d) for d in self.extra_groups],
                "runtime_seconds": self.runtime_seconds,
                "peak_memory_bytes": self.peak_memory_bytes,
                "min_jacobian": self.min_jacobian}

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalRecord":
        def undice(d):
            if d is None:
                return None
            return DiceRecord(pair_id=d["pair_id"],
                              per_label={int(k): v for k, v in d["per_label"].items()},
                              macro_mean=d["macro_mean"],
                              label_group=d["label_group"])

        return cls(pair=Pair(*doc["pair"]), method=doc["method"],
                   protocol=doc["protocol"], similarity=doc["similarity"],
                   transport_mode=doc["transport_mode"], contrast=doc["contrast"],
                   status=doc["status"], failure_reason=doc["failure_reason"],
                   dice=undice(doc["dice"]),
                   extra_groups=[undice(d) for d in doc["extra_groups"]],
                   runtime_seconds=doc["runtime_seconds"],
                   peak_memory_bytes=doc["peak_memory_bytes"],
                   min_jacobian=doc["min_jacobian"])


@dataclass
class SubjectData:
    """A subject with its volumes in memory (harness working set)."""

    entry: SubjectEntry
    image: Volume
    labels: dict  # protocol -> LabelVolume


def load_subject_data(subjects, base_dir) -> list:
    base = Path(base_dir)
    out = []
    for entry in subjects:
        image = read_volume(base / entry.image_path, kind="scalar")
        labels = {proto: read_volume(base / p, kind="label")
                  for proto, p in entry.label_paths.items()}
        out.append(SubjectData(entry=entry, image=image, labels=labels))
    return out


# ---------------------------------------------------------------------------
# protocol execution


def pair_id(pair: Pair) -> str:
    return f"{pair.fixed_id}__{pair.moving_id}"


def _pair_contrast(fixed: SubjectEntry, moving: SubjectEntry) -> str:
    if fixed.contrast == moving.contrast:
        return fixed.contrast
    return f"{fixed.contrast}-{moving.contrast}"


def _is_cross_sequence(pair: Pair, by_id: dict) -> bool:
    return by_id[pair.fixed_id].entry.sequence != by_id[pair.moving_id].entry.sequence


def _failure_reason(exc: Exception) -> str:
    if isinstance(exc, FileNotFoundError):
        return REASON_MISSING_TRANSFORM
    if isinstance(exc, GridMismatchError):
        return REASON_GRID_MISMATCH
    if isinstance(exc, MemoryError):
        return REASON_RESOURCE_EXHAUSTED
    if isinstance(exc, OptimizationFailureError):
        return REASON_OPTIMIZATION_FAILURE
    if isinstance(exc, (NiftiFormatError, NiftiCorruptionError,
                        LabelIntegrityError, TransformIntegrityError)):
        return REASON_IO_ERROR
    if isinstance(exc, RegevalError):
        return REASON_IO_ERROR
    raise exc


def _obtain_transform(method: MethodSpec, fixed: SubjectData, moving: SubjectData,
                      similarity: str, cfg: HarnessConfig):
    """Returns (transform, min_jacobian, engine_peak_bytes)."""
    if method.kind == "identity":
        return AffineTransform.identity(), None, 0
    if method.kind == "external":
        path = Path(method.transforms_dir) / \
            f"{fixed.entry.subject_id}__{moving.entry.subject_id}.nii.gz"
        if not path.exists():
            raise FileNotFoundError(str(path))
        return read_displacement_field(path), None, 0
    reg_cfg = replace(cfg.registration, similarity=similarity)
    init = AffineTransform.identity()
    if cfg.affine_iterations > 0:
        init = affine_register(fixed.image, moving.image, similarity=similarity,
                               iterations=cfg.affine_iterations, cfg=reg_cfg)
    result = greedy_register(fixed.image, moving.image, init=init, cfg=reg_cfg)
    return result.total_field(), result.min_jacobian, result.peak_memory_bytes


def _run_one(task, cfg: HarnessConfig):
    method, protocol, pair, fixed, moving = task
    cross = fixed.entry.sequence != moving.entry.sequence
    if method.kind == "engine" and method.feature_capable and cross:
        similarity = MULTIMODAL_SIMILARITY
    else:
        similarity = method.similarity
    record = EvalRecord(pair=pair, method=method.name, protocol=protocol,
                        similarity=similarity,
                        transport_mode=cfg.transport.mode,
                        contrast=_pair_contrast(fixed.entry, moving.entry))
    started = time.perf_counter()
    mem = {}
    try:
        with track_peak_memory(mem):
            transform, min_jac, engine_peak = _obtain_transform(
                method, fixed, moving, similarity, cfg)
            warped = warp_labels(moving.labels[protocol], transform,
                                 target=fixed.image.header, cfg=cfg.transport)
            record.dice = dice(fixed.labels[protocol], warped,
                               pair_id=pair_id(pair),
                               volume_weighted=cfg.volume_weighted)
            for gname, codes in cfg.label_groups.items():
                record.extra_groups.append(
                    dice(fixed.labels[protocol], warped, label_group=codes,
                         group_name=gname, pair_id=pair_id(pair),
                         volume_weighted=cfg.volume_weighted))
        record.min_jacobian = min_jac
        record.peak_memory_bytes = max(mem.get("peak_bytes", 0), engine_peak)
    except (RegevalError, FileNotFoundError, MemoryError) as exc:
        record.status = "failed"
        record.failure_reason = _failure_reason(exc)
        record.peak_memory_bytes = mem.get("peak_bytes", 0)
    record.runtime_seconds = time.perf_counter() - started
    return record


def validate_similarity_invariant(records, data_by_id) -> list:
    """Records violating the cross-sequence multimodal-similarity control."""
    bad = []
    for r in records:
        cross = _is_cross_sequence(r.pair, data_by_id)
        capable = r.method.startswith("greedy")
        if cross and capable and r.similarity != MULTIMODAL_SIMILARITY:
            bad.append(r)
    return bad


def run_protocol(subject_data, manifest: PairManifest, methods,
                 label_protocols, cfg: HarnessConfig | None = None) -> list:
    """Evaluate every manifest pair under each method and label protocol.

    ``subject_data`` is a list of SubjectData (see load_subject_data).
    Records come back in manifest-major order (pair, then method, then
    protocol) regardless of worker scheduling. Failures are recorded, not
    raised.
    """
    cfg = cfg or HarnessConfig()
    if isinstance(methods, str):
        raise TypeError("methods must be a list of MethodSpec or strings")
    methods = [parse_method(m) if isinstance(m, str) else m for m in methods]
    by_id = {sd.entry.subject_id: sd for sd in subject_data}

    tasks = []
    for pair in manifest.pairs:
        if pair.fixed_id not in by_id or pair.moving_id not in by_id:
            raise ManifestError(f"pair references unknown subject: {pair}")
        for method in methods:
            for protocol in label_protocols:
                for sid in (pair.fixed_id, pair.moving_id):
                    if protocol not in by_id[sid].labels:
                        raise ManifestError(
                            f"subject {sid} has no {protocol!r} labels")
                tasks.append((method, protocol, pair,
                              by_id[pair.fixed_id], by_id[pair.moving_id]))

    workers = cfg.worker_count()
    if workers == 1:
        records = [_run_one(t, cfg) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda t: _run_one(t, cfg), tasks))

    violations = validate_similarity_invariant(records, by_id)
    if violations:
        raise RegevalError(
            f"{len(violations)} records violate the multimodal similarity control")
    return records


# ---------------------------------------------------------------------------
# ablations


def _iso_header(header, iso_mm: float):
    cols = header.voxel_to_world[:3, :3]
    units = cols / np.linalg.norm(cols, axis=0, keepdims=True)
    new_dims = tuple(max(1, int(round(d * s / iso_mm)))
                     for d, s in zip(header.dims, header.spacing))
    affine = np.eye(4)
    affine[:3, :3] = units * iso_mm
    affine[:3, 3] = header.voxel_to_world[:3, 3]
    return header.copy(dims=new_dims, voxel_to_world=affine,
                       spacing=(iso_mm,) * 3, orientation=header.orientation)


def _intensity_centroid(data: np.ndarray):
    w = np.abs(np.asarray(data, dtype=np.float64))
    total = w.sum()
    if total == 0:
        return [(d - 1) / 2.0 for d in data.shape]
    return [float((w.sum(axis=tuple(k for k in range(3) if k != ax))
                   * np.arange(data.shape[ax])).sum() / total) for ax in range(3)]


def apply_variant(sd: SubjectData, variant: str,
                  transport: LabelTransportConfig | None = None) -> SubjectData:
    """Preprocess one subject for an ablation variant.

    Variants: "native", "crop=AxBxC", "orient=RAS|LPS", "iso=<mm>".
    Crop centers on the image intensity centroid and applies the same
    window to the labelmaps so they stay aligned. Resolution changes
    resample the image trilinearly and transport labels probabilistically
    through the identity transform.
    """
    if variant == "native":
        return sd
    key, sep, value = variant.partition("=")
    if not sep:
        raise ValueError(f"malformed variant {variant!r}")
    if key == "crop":
        dims = tuple(int(t) for t in value.lower().split("x"))
        if len(dims) != 3:
            raise ValueError(f"crop variant needs AxBxC, got {value!r}")
        if any(t <= 0 for t in dims):
            raise ValueError(f"crop dims must be positive, got {dims}")
        center = _intensity_centroid(sd.image.data)
        image = crop_or_pad(sd.image, dims, center=center)
        labels = {p: crop_or_pad(lv, dims, center=center)
                  for p, lv in sd.labels.items()}
    elif key == "orient":
        image = reorient(sd.image, value)
        labels = {p: reorient(lv, value) for p, lv in sd.labels.items()}
    elif key == "iso":
        target = _iso_header(sd.image.header, float(value))
        image = resample(sd.image, target, mode="trilinear")
        cfg = transport or LabelTransportConfig()
        labels = {p: warp_labels(lv, AffineTransform.identity(), target=target,
                                 cfg=cfg)
                  for p, lv in sd.labels.items()}
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return SubjectData(entry=sd.entry, image=image, labels=labels)


def run_ablation(subject_data, variants, methods, label_protocols,
                 cfg: HarnessConfig | None = None,
                 split_rule: str = "by-sequence") -> dict:
    """Rerun the protocol per preprocessing variant on identical pairs.

    Returns {"records": {variant: [EvalRecord]}, "summaries": {...},
    "comparisons": [EffectSizeReport-like dicts]} where comparisons pair the
    same method across two variants on common pairs.
    """
    cfg = cfg or HarnessConfig()
    variants = list(variants)
    if not variants:
        raise ValueError("at least one variant required")
    entries = [sd.entry for sd in subject_data]
    manifest = enumerate_pairs(entries, split_rule=split_rule)

    per_variant = {}
    for variant in variants:
        prepped = [apply_variant(sd, variant, cfg.transport)
                   for sd in subject_data]
        per_variant[variant] = run_protocol(prepped, manifest, methods,
                                            label_protocols, cfg)

    summaries = {v: summarize_records(recs, cfg.trim_percent)
                 for v, recs in per_variant.items()}
    comparisons = []
    method_names = sorted({r.method for recs in per_variant.values() for r in recs})
    for i, va in enumerate(variants):
        for vb in variants[i + 1:]:
            for m in method_names:
                a = macro_scores(per_variant[va], method=m)
                b = macro_scores(per_variant[vb], method=m)
                common = [k for k in a if k in b]
                if len(common) < 2:
                    continue
                rep = effect_size_report(f"{m}@{va}", f"{m}@{vb}",
                                         [a[k] for k in common],
                                         [b[k] for k in common],
                                         d_variant=cfg.d_variant)
                comparisons.append(asdict(rep))
    return {"records": per_variant, "summaries": summaries,
            "comparisons": comparisons}


# ---------------------------------------------------------------------------
# reporting


def macro_scores(records, method: str | None = None,
                 protocol: str | None = None) -> dict:
    """(pair_id, protocol) -> macro Dice for successful records."""
    out = {}
    for r in records:
        if r.status != "ok" or r.dice is None:
            continue
        if method is not None and r.method != method:
            continue
        if protocol is not None and r.protocol != protocol:
            continue
        out[(pair_id(r.pair), r.protocol)] = r.dice.macro_mean
    return out


def _trim_survivor_keys(scores: dict, percent: float) -> set:
    keys = list(scores)
    vals = [scores[k] for k in keys]
    k = trim_count(len(vals), percent)
    if k == 0:
        return set(keys)
    drop = set(np.argsort(vals, kind="stable")[:k].tolist())
    return {key for i, key in enumerate(keys) if i not in drop}


def summarize_records(records, trim_percent: float = 5.0) -> list:
    """Per (method, protocol, contrast, split): trimmed summary statistics."""
    groups = {}
    failed = {}
    for r in records:
        key = (r.method, r.protocol, r.contrast, r.pair.split)
        if r.status != "ok" or r.dice is None:
            failed[key] = failed.get(key, 0) + 1
            continue
        groups.setdefault(key, []).append(r.dice.macro_mean)

    rows = []
    for key in sorted(set(groups) | set(failed)):
        scores = groups.get(key, [])
        row = {"method": key[0], "protocol": key[1], "contrast": key[2],
               "split": key[3], "n": len(scores),
               "n_failed": failed.get(key, 0), "trim_percent": trim_percent}
        kept = scores
        if scores and trim_percent > 0:
            keyed = {i: s for i, s in enumerate(scores)}
            surv = _trim_survivor_keys(keyed, trim_percent)
            kept = [s for i, s in enumerate(scores) if i in surv]
        if kept:
            s = summary(kept)
            row.update(trimmed_n=s.n, mean=s.mean, median=s.median, std=s.std)
        else:
            row.update(trimmed_n=0, mean=None, median=None, std=None)
        rows.append(row)
    return rows


def method_comparisons(records, trim_percent: float = 5.0,
                       d_variant: str = "pooled") -> list:
    """Effect sizes for every method pair, paired on common surviving pairs.

    Each method's distribution is trimmed independently; the paired test
    then uses pairs surviving both trims, keeping the pairing valid.
    """
    methods = sorted({r.method for r in records})
    out = []
    for i, ma in enumerate(methods):
        for mb in methods[i + 1:]:
            sa = macro_scores(records, method=ma)
            sb = macro_scores(records, method=mb)
            common = [k for k in sa if k in sb]
            if len(common) < 2:
                continue
            da = {k: sa[k] for k in common}
            db = {k: sb[k] for k in common}
            if trim_percent > 0:
                keep = _trim_survivor_keys(da, trim_percent) \
                    & _trim_survivor_keys(db, trim_percent)
                common = [k for k in common if k in keep]
            if len(common) < 2:
                continue
            rep = effect_size_report(ma, mb, [da[k] for k in common],
                                     [db[k] for k in common],
                                     d_variant=d_variant)
            out.append(asdict(rep))
    return out


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def write_dice_csv(records, path) -> None:
    """Deterministic per-label score table (golden-file stable)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pair_id", "method", "contrast", "split", "label_group",
                    "label", "dice"])
        for r in records:
            if r.status != "ok" or r.dice is None:
                continue
            for d in [r.dice, *r.extra_groups]:
                for code in sorted(d.per_label):
                    w.writerow([d.pair_id, r.method, r.contrast, r.pair.split,
                                d.label_group, code, _fmt(d.per_label[code])])
                w.writerow([d.pair_id, r.method, r.contrast, r.pair.split,
                            d.label_group, "__macro__", _fmt(d.macro_mean)])


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pair_id", "fixed_id", "moving_id", "method", "protocol",
                    "contrast", "split", "similarity", "transport_mode",
                    "status", "failure_reason", "macro_dice",
                    "runtime_seconds", "peak_memory_bytes", "min_jacobian"])
        for r in records:
            macro = _fmt(r.dice.macro_mean) if r.dice is not None else ""
            w.writerow([pair_id(r.pair), r.pair.fixed_id, r.pair.moving_id,
                        r.method, r.protocol, r.contrast, r.pair.split,
                        r.similarity, r.transport_mode, r.status,
                        r.failure_reason, macro,
                        f"{r.runtime_seconds:.3f}", r.peak_memory_bytes,
                        "" if r.min_jacobian is None else _fmt(r.min_jacobian)])


def emit_report(records, out_dir, comparisons=None, trim_percent: float = 5.0,
                d_variant: str = "pooled", provenance: dict | None = None) -> dict:
    """Write the full report bundle; returns the emitted paths.

    Bundle: dice_scores.csv (stable values only), records.csv (adds runtime
    and memory), records.json (full fidelity, input for regeneration), and
    summary.json (trimmed summaries, effect sizes, violin data, provenance).
    """
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    paths = {"dice_csv": out_dir / "dice_scores.csv",
             "records_csv": out_dir / "records.csv",
             "records_json": out_dir / "records.json",
             "summary_json": out_dir / "summary.json"}

    write_dice_csv(records, paths["dice_csv"])
    write_records_csv(records, paths["records_csv"])
    paths["records_json"].write_text(json.dumps(
        [r.to_dict() for r in records], indent=2, sort_keys=True))

    violins = []
    for m in sorted({r.method for r in records}):
        scores = list(macro_scores(records, method=m).values())
        if len(scores) >= 2:
            v = violin(scores, method=m)
            violins.append({"method": m,
                            "kde_support": [float(x) for x in v.kde_support],
                            "kde_density": [float(x) for x in v.kde_density],
                            "quartiles": list(v.quartiles)})

    doc = {
        "provenance": provenance or {},
        "trim_percent": trim_percent,
        "n_records": len(records),
        "n_failed": sum(1 for r in records if r.status != "ok"),
        "failure_reasons": sorted({r.failure_reason for r in records
                                   if r.status != "ok"}),
        "summaries": summarize_records(records, trim_percent),
        "effect_sizes": method_comparisons(records, trim_percent, d_variant),
        "violins": violins,
        "comparisons": comparisons or [],
    }
    paths["summary_json"].write_text(json.dumps(doc, indent=2, sort_keys=True))
    return {k: str(v) for k, v in paths.items()}
