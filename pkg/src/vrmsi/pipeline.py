"""Staged experiment pipeline: phantom -> acquire -> recon -> train -> infer -> eval.

Every stage writes its artifacts plus a ``provenance.json`` capturing the
config hash, tool version, seeds, and hashes of the upstream provenance
files.  Re-running a stage whose provenance already matches is a no-op;
``force`` rebuilds.  Stages are deterministic given config and seed.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from vrmsi import __version__
from vrmsi.config import ExperimentConfig
from vrmsi.core import DOMAIN_IMAGE, MultiSpectralStack, load_stack, save_stack
from vrmsi.learn import (
    TrainConfig,
    UNet,
    infer_full_stack,
    infer_zreplace,
    load_model,
    save_history,
    save_model,
    train,
)
from vrmsi.learn.model import ModelConfig
from vrmsi.metrics import (
    EdgeSegment,
    EvalReport,
    psnr,
    resi,
    ssim,
    write_edge_csv,
    write_report_csv,
    write_report_json,
)
from vrmsi.phantom import Ellipse, Implant, PhantomSpec, PhantomTruth, generate_phantom, simulate_bins, to_kspace
from vrmsi.recon import (
    METHOD_CR_VR,
    METHOD_CR_ZREPLACE,
    METHOD_DL_VR,
    METHOD_DL_ZREPLACE,
    METHOD_REFERENCE,
    ReconOutput,
    load_recon,
    reconstruct,
    rsos_bins,
    save_recon,
)
from vrmsi.sampling import ACS_ONLY, build_vr_plan, load_plan, save_plan

PROVENANCE = "provenance.json"

STAGE_DATASET = "dataset"
STAGE_KSPACE = "kspace"
STAGE_RECON = "recon"
STAGE_MODELS = "models"
STAGE_INFERRED = "inferred"
STAGE_EVAL = "eval"


class MissingArtifactError(RuntimeError):
    """An upstream stage has not produced its artifacts yet."""


class StageExistsError(RuntimeError):
    """Output directory holds unrelated content and --force was not given."""


# ---------------------------------------------------------------------------
# Provenance and caching
# ---------------------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _stage_provenance(cfg: ExperimentConfig, stage: str, upstream: list[str]) -> dict:
    root = Path(cfg.out_dir)
    inputs = {}
    for up in upstream:
        prov = root / up / PROVENANCE
        if not prov.exists():
            raise MissingArtifactError(
                f"stage '{stage}' needs stage '{up}': run it first (missing {prov})"
            )
        inputs[f"{up}/{PROVENANCE}"] = _sha256_file(prov)
    return {
        "stage": stage,
        "tool_version": __version__,
        "config_hash": cfg.config_hash(),
        "dataset_hash": cfg.dataset_hash(),
        "seed": cfg.seed,
        "input_hashes": inputs,
    }


def _stage_ready(stage_dir: Path, provenance: dict, force: bool) -> bool:
    """True when the stage is already up to date; raises on conflicts."""
    prov_path = stage_dir / PROVENANCE
    if prov_path.exists():
        existing = json.loads(prov_path.read_text())
        if existing == provenance and not force:
            return True
    if stage_dir.exists() and any(stage_dir.iterdir()) and not prov_path.exists() and not force:
        raise StageExistsError(f"{stage_dir} is not empty; pass --force to overwrite")
    stage_dir.mkdir(parents=True, exist_ok=True)
    return False


def _finish_stage(stage_dir: Path, provenance: dict) -> None:
    (stage_dir / PROVENANCE).write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")


def _parallel(jobs: int, fn, items):
    """Run fn over items, preserving item order in the returned list."""
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Phantom geometry templates
# ---------------------------------------------------------------------------


def _subject_ids(cfg: ExperimentConfig) -> dict[str, list[str]]:
    s = cfg.split
    n = s["train_subjects"] + s["val_subjects"] + s["test_subjects"]
    ids = [f"s{i:03d}" for i in range(n)]
    return {
        "train": ids[: s["train_subjects"]],
        "val": ids[s["train_subjects"]: s["train_subjects"] + s["val_subjects"]],
        "test": ids[s["train_subjects"] + s["val_subjects"]:],
    }


def _slice_spec(cfg: ExperimentConfig, subject_idx: int, slice_idx: int) -> PhantomSpec:
    """Jittered geometry for one slice; family alternates by subject."""
    p = cfg.phantom
    rows, cols = p["rows"], p["cols"]
    rng = np.random.default_rng([cfg.seed, subject_idx, slice_idx])
    mixed = p["families"] == "mixed"
    family = "knee" if (not mixed or subject_idx % 2 == 0) else "hip"

    def jit(scale):
        return float(rng.uniform(-scale, scale))

    cy, cx = rows / 2.0, cols / 2.0
    if family == "knee":
        body = Ellipse((cy + jit(2), cx + jit(2)), (0.42 * rows + jit(3), 0.44 * cols + jit(3)), 0.9, "body")
        inner = Ellipse(
            (cy + 0.08 * rows + jit(2), cx - 0.05 * cols + jit(2)),
            (0.17 * rows + jit(2), 0.13 * cols + jit(2)),
            0.55,
            "inner",
        )
        bright = Ellipse(
            (cy - 0.18 * rows + jit(1.5), cx - 0.16 * cols + jit(1.5)),
            (0.08 * rows + jit(1), 0.1 * cols + jit(1)),
            1.0,
            "bright",
        )
        implant_center = (cy - 0.16 * rows + jit(1.5), cx + 0.22 * cols + jit(1.5))
    else:
        body = Ellipse((cy + jit(2), cx + jit(2)), (0.38 * rows + jit(3), 0.46 * cols + jit(3)), 0.8, "body")
        inner = Ellipse(
            (cy - 0.06 * rows + jit(2), cx + 0.08 * cols + jit(2)),
            (0.14 * rows + jit(2), 0.17 * cols + jit(2)),
            0.5,
            "inner",
        )
        bright = Ellipse(
            (cy + 0.2 * rows + jit(1.5), cx - 0.12 * cols + jit(1.5)),
            (0.09 * rows + jit(1), 0.08 * cols + jit(1)),
            1.0,
            "bright",
        )
        implant_center = (cy + 0.14 * rows + jit(1.5), cx - 0.24 * cols + jit(1.5))

    implant = Implant(implant_center, p["implant_radius"], p["implant_amplitude_khz"])
    segments = _edge_segments(inner, implant, p["edges_per_slice"], rows, cols, rng)
    return PhantomSpec(
        rows=rows,
        cols=cols,
        shapes=(body, inner, bright),
        implant=implant,
        field_span_khz=p["field_span_khz"],
        n_coils=p["n_coils"],
        noise_sigma=p["noise_sigma"],
        edge_segments=segments,
        texture=p["texture"],
    )


def _edge_segments(inner: Ellipse, implant: Implant, count, rows, cols, rng):
    """Segments crossing the inner-ellipse boundary, pointing away from metal."""
    away = math.atan2(inner.center[1] - implant.center[1], inner.center[0] - implant.center[0])
    segments = []
    half_len = 5.0
    attempts = 0
    while len(segments) < count and attempts < 50 * count:
        attempts += 1
        phi = away + rng.uniform(-1.0, 1.0)
        pr = inner.center[0] + inner.semi_axes[0] * math.cos(phi)
        pc = inner.center[1] + inner.semi_axes[1] * math.sin(phi)
        nr = math.cos(phi) / max(inner.semi_axes[0], 1e-6)
        nc = math.sin(phi) / max(inner.semi_axes[1], 1e-6)
        norm = math.hypot(nr, nc)
        nr, nc = nr / norm, nc / norm
        p0 = (pr - half_len * nr, pc - half_len * nc)
        p1 = (pr + half_len * nr, pc + half_len * nc)
        if all(1 <= r <= rows - 2 and 1 <= c <= cols - 2 for r, c in (p0, p1)):
            segments.append((p0, p1))
    if len(segments) < count:
        raise ValueError("could not place the requested edge segments inside the image")
    return tuple(segments)


# ---------------------------------------------------------------------------
# Truth persistence: stack channels are [pd, off_resonance, coil maps...]
# ---------------------------------------------------------------------------


def _save_truth(truth: PhantomTruth, stack_path: Path, sidecar_path: Path, extra: dict) -> None:
    channels = np.concatenate(
        [
            truth.proton_density[None].astype(np.complex128),
            truth.off_resonance_khz[None].astype(np.complex128),
            truth.coil_maps,
        ]
    )[:, None]
    stack = MultiSpectralStack(
        channels, np.arange(channels.shape[0], dtype=float), DOMAIN_IMAGE, "phantom-truth-v1"
    )
    save_stack(stack, stack_path)
    sidecar = dict(extra)
    sidecar["edge_segments"] = [[list(p0), list(p1)] for p0, p1 in truth.edge_segments]
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def _load_truth(stack_path: Path, sidecar_path: Path) -> tuple[PhantomTruth, dict]:
    if not stack_path.exists():
        raise MissingArtifactError(f"missing phantom truth {stack_path}: run the phantom stage")
    stack = load_stack(stack_path)
    sidecar = json.loads(sidecar_path.read_text())
    segments = tuple(
        (tuple(p0), tuple(p1)) for p0, p1 in sidecar["edge_segments"]
    )
    truth = PhantomTruth(
        np.real(stack.data[0, 0]),
        np.real(stack.data[1, 0]),
        stack.data[2:, 0],
        segments,
    )
    return truth, sidecar


def _iter_slices(cfg: ExperimentConfig, roles=("train", "val", "test")):
    ids = _subject_ids(cfg)
    for role in roles:
        for sid in ids[role]:
            subject_idx = int(sid[1:])
            for slice_idx in range(cfg.split["slices_per_subject"]):
                yield role, sid, subject_idx, slice_idx


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def cmd_phantom(cfg: ExperimentConfig, force: bool = False) -> Path:
    stage_dir = Path(cfg.out_dir) / STAGE_DATASET
    provenance = _stage_provenance(cfg, STAGE_DATASET, upstream=[])
    if _stage_ready(stage_dir, provenance, force):
        return stage_dir

    manifest = {"subjects": [], "dataset_hash": cfg.dataset_hash()}
    ids = _subject_ids(cfg)
    for role in ("train", "val", "test"):
        for sid in ids[role]:
            subject_idx = int(sid[1:])
            subject_dir = stage_dir / sid
            subject_dir.mkdir(parents=True, exist_ok=True)
            mixed = cfg.phantom["families"] == "mixed"
            family = "knee" if (not mixed or subject_idx % 2 == 0) else "hip"
            for slice_idx in range(cfg.split["slices_per_subject"]):
                spec = _slice_spec(cfg, subject_idx, slice_idx)
                truth = generate_phantom(spec, seed=cfg.seed + 7919 * subject_idx + slice_idx)
                _save_truth(
                    truth,
                    subject_dir / f"slice{slice_idx:02d}.truth.msstack",
                    subject_dir / f"slice{slice_idx:02d}.meta.json",
                    {"subject": sid, "slice": slice_idx, "family": family, "role": role},
                )
            manifest["subjects"].append(
                {"id": sid, "role": role, "family": family, "slices": cfg.split["slices_per_subject"]}
            )
    (stage_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _finish_stage(stage_dir, provenance)
    return stage_dir


def cmd_acquire(cfg: ExperimentConfig, force: bool = False) -> Path:
    root = Path(cfg.out_dir)
    stage_dir = root / STAGE_KSPACE
    provenance = _stage_provenance(cfg, STAGE_KSPACE, upstream=[STAGE_DATASET])
    if _stage_ready(stage_dir, provenance, force):
        return stage_dir

    plan = build_vr_plan(cfg.acquisition_params())
    save_plan(plan, stage_dir / "plan.msstack")
    centers = np.asarray(cfg.bin_centers())
    fwhm = cfg.acquisition["fwhm_khz"]
    noise = cfg.phantom["noise_sigma"]

    def acquire_one(task):
        _, sid, subject_idx, slice_idx = task
        truth, _ = _load_truth(
            root / STAGE_DATASET / sid / f"slice{slice_idx:02d}.truth.msstack",
            root / STAGE_DATASET / sid / f"slice{slice_idx:02d}.meta.json",
        )
        stack = simulate_bins(truth, centers, fwhm)
        ksp = to_kspace(stack, noise, seed=cfg.seed + 104729 * subject_idx + 13 * slice_idx)
        return sid, slice_idx, ksp

    tasks = list(_iter_slices(cfg))
    for sid, slice_idx, ksp in _parallel(cfg.jobs, acquire_one, tasks):
        subject_dir = stage_dir / sid
        subject_dir.mkdir(parents=True, exist_ok=True)
        save_stack(ksp, subject_dir / f"slice{slice_idx:02d}.ksp.msstack")
    _finish_stage(stage_dir, provenance)
    return stage_dir


def cmd_recon(cfg: ExperimentConfig, force: bool = False) -> Path:
    root = Path(cfg.out_dir)
    stage_dir = root / STAGE_RECON
    provenance = _stage_provenance(cfg, STAGE_RECON, upstream=[STAGE_KSPACE])
    if _stage_ready(stage_dir, provenance, force):
        return stage_dir

    plan = load_plan(root / STAGE_KSPACE / "plan.msstack")
    out_shape = cfg.out_shape()
    r = cfg.recon

    def recon_one(task):
        _, sid, _, slice_idx = task
        ksp_path = root / STAGE_KSPACE / sid / f"slice{slice_idx:02d}.ksp.msstack"
        if not ksp_path.exists():
            raise MissingArtifactError(f"missing k-space {ksp_path}: run the acquire stage")
        ksp = load_stack(ksp_path)
        outputs = {}
        for method in (METHOD_REFERENCE, METHOD_CR_VR, METHOD_CR_ZREPLACE):
            outputs[method] = reconstruct(
                plan,
                ksp,
                method,
                out_shape=out_shape,
                apod_sigma_fraction=r["apod_sigma_fraction"],
                kernel_taps=(r["kernel_ky"], r["kernel_kz"]),
                ridge=r["ridge"],
            )
        return sid, slice_idx, outputs

    tasks = list(_iter_slices(cfg))
    for sid, slice_idx, outputs in _parallel(cfg.jobs, recon_one, tasks):
        subject_dir = stage_dir / sid
        subject_dir.mkdir(parents=True, exist_ok=True)
        for method, output in outputs.items():
            save_recon(output, subject_dir / f"slice{slice_idx:02d}.{method}.msstack")
    _finish_stage(stage_dir, provenance)
    return stage_dir


def _load_method(root: Path, sid: str, slice_idx: int, method: str) -> ReconOutput:
    stage = STAGE_INFERRED if method in (METHOD_DL_VR, METHOD_DL_ZREPLACE) else STAGE_RECON
    path = root / stage / sid / f"slice{slice_idx:02d}.{method}.msstack"
    if not path.exists():
        missing_stage = "infer" if stage == STAGE_INFERRED else "recon"
        raise MissingArtifactError(f"missing {method} output {path}: run the {missing_stage} stage")
    return load_recon(path)


def _training_pairs(cfg: ExperimentConfig, roles, input_method: str):
    """(input bins, reference ACS bins) pairs for the requested subjects."""
    root = Path(cfg.out_dir)
    plan = load_plan(root / STAGE_KSPACE / "plan.msstack")
    acs_bins = plan.bins_with_scheme(ACS_ONLY)
    pairs = []
    for _, sid, _, slice_idx in _iter_slices(cfg, roles):
        inputs = _load_method(root, sid, slice_idx, input_method)
        reference = _load_method(root, sid, slice_idx, METHOD_REFERENCE)
        pairs.append((inputs.images, reference.images[acs_bins]))
    return pairs, acs_bins


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> Path:
    root = Path(cfg.out_dir)
    stage_dir = root / STAGE_MODELS
    provenance = _stage_provenance(cfg, STAGE_MODELS, upstream=[STAGE_RECON])
    if _stage_ready(stage_dir, provenance, force):
        return stage_dir

    n_bins = cfg.acquisition["n_bins"]
    model_cfg = ModelConfig(
        in_channels=n_bins,
        out_channels=n_bins // 2,
        n_levels=cfg.model["n_levels"],
        channels=cfg.model["channels"],
    )
    train_cfg = TrainConfig(
        learning_rate=cfg.train["learning_rate"],
        epochs=cfg.train["epochs"],
        batch_size=cfg.train["batch_size"],
        seed=cfg.seed,
        mode=cfg.train["mode"],
    )

    for variant, input_method, model_seed in (
        ("vr", METHOD_CR_VR, cfg.seed + 1),
        ("zr", METHOD_CR_ZREPLACE, cfg.seed + 2),
    ):
        train_pairs, _ = _training_pairs(cfg, ("train",), input_method)
        val_pairs, _ = _training_pairs(cfg, ("val",), input_method)
        model = UNet(model_cfg, seed=model_seed)
        model, history, optimizer = train(train_pairs, val_pairs, model, train_cfg)
        save_model(
            model,
            stage_dir / f"model_{variant}.msmodel",
            optimizer=optimizer,
            config=train_cfg,
            provenance=f"{variant}:{input_method}",
        )
        save_history(history, stage_dir / f"loss_{variant}.csv")
    _finish_stage(stage_dir, provenance)
    return stage_dir


def cmd_infer(cfg: ExperimentConfig, force: bool = False) -> Path:
    root = Path(cfg.out_dir)
    stage_dir = root / STAGE_INFERRED
    provenance = _stage_provenance(cfg, STAGE_INFERRED, upstream=[STAGE_RECON, STAGE_MODELS])
    if _stage_ready(stage_dir, provenance, force):
        return stage_dir

    plan = load_plan(root / STAGE_KSPACE / "plan.msstack")
    model_vr, _ = load_model(root / STAGE_MODELS / "model_vr.msmodel")
    model_zr, _ = load_model(root / STAGE_MODELS / "model_zr.msmodel")

    def infer_one(task):
        _, sid, _, slice_idx = task
        cr_vr = _load_method(root, sid, slice_idx, METHOD_CR_VR)
        cr_zr = _load_method(root, sid, slice_idx, METHOD_CR_ZREPLACE)
        return (
            sid,
            slice_idx,
            infer_full_stack(model_vr, cr_vr, plan),
            infer_zreplace(model_zr, cr_zr, plan),
        )

    tasks = list(_iter_slices(cfg, roles=("test",)))
    for sid, slice_idx, dl_vr, dl_zr in _parallel(cfg.jobs, infer_one, tasks):
        subject_dir = stage_dir / sid
        subject_dir.mkdir(parents=True, exist_ok=True)
        save_recon(dl_vr, subject_dir / f"slice{slice_idx:02d}.{METHOD_DL_VR}.msstack")
        save_recon(dl_zr, subject_dir / f"slice{slice_idx:02d}.{METHOD_DL_ZREPLACE}.msstack")
    _finish_stage(stage_dir, provenance)
    return stage_dir


def _scaled_segment(seg, scale_r: float, scale_c: float) -> EdgeSegment:
    (r0, c0), (r1, c1) = seg
    return EdgeSegment((r0 * scale_r, c0 * scale_c), (r1 * scale_r, c1 * scale_c))


def _high_gradient_region(truth: PhantomTruth, out_shape) -> np.ndarray:
    gr, gc = np.gradient(truth.off_resonance_khz)
    grad = np.hypot(gr, gc)
    support = truth.proton_density > 0.05
    if not support.any():
        return np.zeros(out_shape, dtype=bool)
    threshold = np.percentile(grad[support], 75.0)
    region = support & (grad >= threshold)
    if region.shape == tuple(out_shape):
        return region
    ri = (np.arange(out_shape[0]) * region.shape[0] / out_shape[0]).astype(int)
    ci = (np.arange(out_shape[1]) * region.shape[1] / out_shape[1]).astype(int)
    return region[np.ix_(ri, ci)]


def cmd_eval(cfg: ExperimentConfig, force: bool = False, allow_mixed: bool = False) -> Path:
    root = Path(cfg.out_dir)
    stage_dir = root / STAGE_EVAL
    provenance = _stage_provenance(cfg, STAGE_EVAL, upstream=[STAGE_RECON, STAGE_INFERRED])
    if _stage_ready(stage_dir, provenance, force):
        return stage_dir

    if not allow_mixed:
        _check_provenance_chain(cfg)

    plan = load_plan(root / STAGE_KSPACE / "plan.msstack")
    acs_bins = plan.bins_with_scheme(ACS_ONLY)
    out_shape = cfg.out_shape()
    scale_r = out_shape[0] / cfg.phantom["rows"]
    scale_c = out_shape[1] / cfg.phantom["cols"]

    report = EvalReport()
    methods = (METHOD_REFERENCE, METHOD_CR_VR, METHOD_CR_ZREPLACE, METHOD_DL_VR, METHOD_DL_ZREPLACE)
    ablation = {METHOD_DL_VR: [], METHOD_DL_ZREPLACE: []}

    for _, sid, _, slice_idx in _iter_slices(cfg, roles=("test",)):
        truth, sidecar = _load_truth(
            root / STAGE_DATASET / sid / f"slice{slice_idx:02d}.truth.msstack",
            root / STAGE_DATASET / sid / f"slice{slice_idx:02d}.meta.json",
        )
        outputs = {m: _load_method(root, sid, slice_idx, m) for m in methods}
        combined = {m: rsos_bins(outputs[m].images) for m in methods}
        segments = [
            _scaled_segment(seg, scale_r, scale_c) for seg in truth.edge_segments
        ]

        region = _high_gradient_region(truth, out_shape)
        for method in (METHOD_DL_VR, METHOD_DL_ZREPLACE):
            diff = outputs[method].images[acs_bins] - outputs[METHOD_REFERENCE].images[acs_bins]
            if region.any():
                ablation[method].append(float(np.mean(diff[:, region] ** 2)))

        for method in methods:
            ssim_value = ssim(combined[method], combined[METHOD_REFERENCE])
            psnr_value = psnr(combined[method], combined[METHOD_REFERENCE])
            edge_values = []
            for edge_idx, segment in enumerate(segments):
                value = resi(combined[method], combined[METHOD_CR_VR], segment)
                report.add_edge_record(sid, slice_idx, edge_idx, method, value)
                edge_values.append(value)
            resi_value = float(np.median(edge_values)) if edge_values else None
            report.add_record(sid, slice_idx, method, ssim_value, psnr_value, resi_value)

    report.extras["high_gradient_even_bin_mse"] = {
        method: {
            "median": float(np.median(vals)) if vals else None,
            "per_slice": vals,
        }
        for method, vals in ablation.items()
    }
    report.finalize()
    write_report_csv(report, stage_dir / "report.csv")
    write_edge_csv(report, stage_dir / "edges.csv")
    write_report_json(report, stage_dir / "summary.json")
    _finish_stage(stage_dir, provenance)
    return stage_dir


def _check_provenance_chain(cfg: ExperimentConfig) -> None:
    """Refuse to evaluate artifacts generated from differing phantom configs."""
    root = Path(cfg.out_dir)
    hashes = {}
    for stage in (STAGE_DATASET, STAGE_KSPACE, STAGE_RECON, STAGE_MODELS, STAGE_INFERRED):
        prov_path = root / stage / PROVENANCE
        if not prov_path.exists():
            raise MissingArtifactError(f"stage '{stage}' has no provenance: run it first")
        hashes[stage] = json.loads(prov_path.read_text()).get("dataset_hash")
    unique = set(hashes.values())
    if len(unique) > 1:
        raise StageExistsError(
            f"mixed provenance across stages ({hashes}); pass --allow-mixed to override"
        )


def run_all(cfg: ExperimentConfig, force: bool = False) -> Path:
    cmd_phantom(cfg, force)
    cmd_acquire(cfg, force)
    cmd_recon(cfg, force)
    cmd_train(cfg, force)
    cmd_infer(cfg, force)
    return cmd_eval(cfg, force)
