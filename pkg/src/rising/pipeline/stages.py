"""Pipeline stages. Each stage reads and updates ``<output_dir>/manifest.json``.

Output layout::

    data/gt/imgXXXX.imgraw        phantoms (plus data/manifest.json)
    sino/imgXXXX.sinraw           noisy sinograms
    targets/imgXXXX.imgraw        converged solver images, with .report.csv histories
    ris_k{K}/imgXXXX.imgraw       early-stopped solver images
    checkpoints/{mode}_k{K}.ckpt  trained network (+ .ckpt.json, .log.csv)
    out_{mode}_k{K}/              network outputs on the test split
    eval/{mode}_k{K}/             metrics.csv, table.txt, summary.json
"""

from __future__ import annotations

import logging
import os
import time
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from ..io import IMAGE_EXT, SINOGRAM_EXT, atomic_write_text, file_checksum, read_json, read_raw, write_json, write_raw
from ..metrics import MetricsReport, relative_error
from ..nn.train import load_checkpoint, save_checkpoint, train
from ..phantom import generate_dataset
from ..projector import simulate_sinogram
from ..solver.sgp import sgp_solve
from .config import ExperimentConfig

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
NET_ROLE = {"rising": "ING", "lpp": "LPP"}


class PipelineError(RuntimeError):
    """Stage failure with machine-readable ``details``."""

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


def n_jobs() -> int:
    """Worker count for batch stages, capped by ``RISING_THREADS``."""
    value = os.environ.get("RISING_THREADS")
    if not value:
        return 1
    try:
        return max(1, int(value))
    except ValueError:
        raise PipelineError(f"RISING_THREADS must be an integer, got {value!r}") from None


# manifest helpers


def manifest_path(cfg: ExperimentConfig) -> Path:
    return cfg.out / MANIFEST


def load_manifest(cfg: ExperimentConfig) -> dict:
    path = manifest_path(cfg)
    if not path.exists():
        raise PipelineError(f"no pipeline manifest at {path}; run generate-data first", path=str(path))
    return read_json(path)


def save_manifest(cfg: ExperimentConfig, manifest: dict) -> None:
    write_json(manifest_path(cfg), manifest)


def _up_to_date(manifest: dict, key: str, digest: str, files: list[Path]) -> bool:
    record = manifest.get("stages", {}).get(key)
    return bool(record and record.get("config_hash") == digest and all(p.exists() for p in files))


def _record_stage(manifest: dict, key: str, digest: str, **info) -> None:
    manifest.setdefault("stages", {})[key] = {"config_hash": digest, **info}


def _entries(manifest: dict, split: str | None = None) -> list[dict]:
    return [e for e in manifest["entries"] if split is None or e["split"] == split]


def _require(root: Path, entries: list[dict], key: str, what: str) -> None:
    missing = [e["id"] for e in entries if not e.get(key) or not (root / e[key]).exists()]
    if missing:
        raise PipelineError(f"{len(missing)} entries lack {what}: {', '.join(missing[:10])}"
                            + (" ..." if len(missing) > 10 else ""), missing=missing, artifact=what)


# stages


def generate_data(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Create (or adopt) the phantom set and start the pipeline manifest."""
    digest = cfg.stage_hash("generate-data")
    root = cfg.out
    if manifest_path(cfg).exists():
        manifest = read_json(manifest_path(cfg))
        files = [root / e["gt"] for e in manifest["entries"]]
        if not force and _up_to_date(manifest, "generate-data", digest, files):
            logger.info("generate-data: up to date")
            return manifest
    if "manifest" in cfg.dataset:
        src = Path(cfg.dataset["manifest"])
        data = read_json(src)
        base = src.parent.resolve()
    else:
        count = int(cfg.dataset.get("count", 140))
        data = generate_dataset(cfg.phantom_spec(), count, root / "data", n_test=cfg.dataset.get("n_test"))
        base = (root / "data").resolve()
    entries = []
    for item in data["entries"]:
        gt = base / item["file"]
        entries.append({
            "id": item["id"],
            "split": item["split"],
            "gt": os.path.relpath(gt, root.resolve()),
            "gt_checksum": item.get("checksum") or file_checksum(gt),
            "phantom_seed": item.get("seed"),
            "hashes": {"gt": digest},
        })
    manifest = {"config": cfg.to_dict(), "phantom_spec": data["spec"], "split": data["split"],
                "entries": entries, "stages": {}}
    _record_stage(manifest, "generate-data", digest, count=len(entries))
    save_manifest(cfg, manifest)
    return manifest


def noise_seed(cfg: ExperimentConfig, index: int) -> list[int]:
    """Per-image noise seed derived from the experiment noise seed."""
    return [int(cfg.seeds["noise"]), int(index)]


def _simulate_one(cfg, geometry, grid, root, entry, index):
    image = read_raw(root / entry["gt"])
    if image.shape != grid.shape:
        raise PipelineError(f"{entry['id']}: image is {image.shape}, geometry expects {grid.shape}")
    b = simulate_sinogram(image, geometry, cfg.noise_level, noise_seed(cfg, index), grid)
    rel = f"sino/{entry['id']}{SINOGRAM_EXT}"
    write_raw(root / rel, b)
    return rel, file_checksum(root / rel)


def simulate(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Noisy sinogram per phantom with a per-image derived seed."""
    manifest = load_manifest(cfg)
    digest = cfg.stage_hash("simulate")
    root = cfg.out
    files = [root / "sino" / f"{e['id']}{SINOGRAM_EXT}" for e in manifest["entries"]]
    if not force and _up_to_date(manifest, "simulate", digest, files):
        logger.info("simulate: up to date")
        return manifest
    geometry, grid = cfg.scan_geometry(), cfg.grid
    results = Parallel(n_jobs=n_jobs())(
        delayed(_simulate_one)(cfg, geometry, grid, root, e, i) for i, e in enumerate(manifest["entries"]))
    for i, (entry, (rel, checksum)) in enumerate(zip(manifest["entries"], results)):
        entry.update(sinogram=rel, sinogram_checksum=checksum, noise_seed=noise_seed(cfg, i))
        entry["hashes"]["sinogram"] = digest
    write_json(root / "geometry.json", geometry.to_dict())
    _record_stage(manifest, "simulate", digest, geometry="geometry.json", noise_level=cfg.noise_level)
    save_manifest(cfg, manifest)
    return manifest


def _solve_one(cfg, geometry, grid, root, entry, n_iter, rel_img, rel_report):
    try:
        b = read_raw(root / entry["sinogram"])
        if b.shape != geometry.sinogram_shape:
            raise PipelineError(f"sinogram is {b.shape}, geometry expects {geometry.sinogram_shape}")
        x, report = sgp_solve(b, geometry, cfg.solver, n_iter, grid=grid)
        write_raw(root / rel_img, x)
        if rel_report:
            _write_report(report, root / rel_report)
        gt = read_raw(root / entry["gt"])
        return {"ok": True, "K_star": report.K_star, "n_iter": report.n_iter, "stop_reason": report.stop_reason,
                "re": relative_error(x, gt) if np.any(gt) else None, "checksum": file_checksum(root / rel_img)}
    except Exception as exc:  # recorded per entry, the batch carries on
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def _write_report(report, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(tmp)
    os.replace(tmp, path)


def _solver_stage(cfg, manifest, key, digest, n_iter, img_dir, field_name, with_report):
    root = cfg.out
    entries = _entries(manifest)
    _require(root, entries, "sinogram", "sinograms")
    files = [root / img_dir / f"{e['id']}{IMAGE_EXT}" for e in entries]
    if not any_errors(manifest, field_name) and _up_to_date(manifest, key, digest, files):
        logger.info("%s: up to date", key)
        return manifest, False
    geometry, grid = cfg.scan_geometry(), cfg.grid
    jobs = []
    for e in entries:
        rel_img = f"{img_dir}/{e['id']}{IMAGE_EXT}"
        rel_report = f"{img_dir}/{e['id']}.report.csv" if with_report else None
        jobs.append(delayed(_solve_one)(cfg, geometry, grid, root, e, n_iter, rel_img, rel_report))
    results = Parallel(n_jobs=n_jobs())(jobs)
    failures = []
    for e, res in zip(entries, results):
        errors = e.setdefault("errors", {})
        if not res["ok"]:
            errors[field_name] = res["error"]
            e.pop(field_name, None)
            failures.append(e["id"])
            continue
        errors.pop(field_name, None)
        if not errors:
            e.pop("errors")
        e[field_name] = f"{img_dir}/{e['id']}{IMAGE_EXT}"
        e["hashes"][field_name] = digest
        info = {"checksum": res["checksum"], "n_iter": res["n_iter"], "stop_reason": res["stop_reason"],
                      "re_gt": res["re"]}
        if with_report:
            info.update(K_star=res["K_star"], report=f"{img_dir}/{e['id']}.report.csv")
        e[field_name + "_info"] = info
    _record_stage(manifest, key, digest, failures=failures)
    return manifest, True


def any_errors(manifest: dict, field_name: str) -> bool:
    return any(field_name in e.get("errors", {}) for e in manifest["entries"])


def build_targets(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Run the solver to convergence on every sinogram (the offline step)."""
    manifest = load_manifest(cfg)
    digest = cfg.stage_hash("build-targets")
    if force:
        manifest.get("stages", {}).pop("build-targets", None)
    manifest, changed = _solver_stage(cfg, manifest, "build-targets", digest, None, "targets", "is", True)
    if changed:
        save_manifest(cfg, manifest)
    return manifest


def ris_key(K: int) -> str:
    return f"ris_k{K}"


def build_ris(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Run ``K`` solver iterations on every sinogram."""
    manifest = load_manifest(cfg)
    digest = cfg.stage_hash("build-ris")
    key = f"build-ris:k{cfg.K}"
    if force:
        manifest.get("stages", {}).pop(key, None)
    manifest, changed = _solver_stage(cfg, manifest, key, digest, cfg.K, ris_key(cfg.K), ris_key(cfg.K), False)
    if changed:
        save_manifest(cfg, manifest)
    return manifest


def run_name(cfg: ExperimentConfig) -> str:
    return f"{cfg.mode}_k{cfg.K}"


def checkpoint_path(cfg: ExperimentConfig) -> Path:
    return cfg.out / "checkpoints" / f"{run_name(cfg)}.ckpt"


def training_pairs(cfg: ExperimentConfig, manifest: dict, split: str = "train"):
    """``(inputs, targets, entries)`` for ``split``; raises listing entries with missing files."""
    root = cfg.out
    entries = _entries(manifest, split)
    if not entries:
        raise PipelineError(f"the {split} split is empty")
    _require(root, entries, ris_key(cfg.K), f"x_RIS (K={cfg.K})")
    target_key = "is" if cfg.mode == "rising" else "gt"
    _require(root, entries, target_key, "x_IS" if target_key == "is" else "x_GT")
    inputs = np.stack([read_raw(root / e[ris_key(cfg.K)]) for e in entries])
    targets = np.stack([read_raw(root / e[target_key]) for e in entries])
    return inputs, targets, entries


def train_network(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Train on the train split; targets are x_IS (rising) or x_GT (lpp)."""
    manifest = load_manifest(cfg)
    digest = cfg.stage_hash("train")
    key = f"train:{run_name(cfg)}"
    path = checkpoint_path(cfg)
    if not force and _up_to_date(manifest, key, digest, [path]):
        logger.info("train: up to date")
        return path
    inputs, targets, _ = training_pairs(cfg, manifest)
    net, log, adam = train(inputs, targets, cfg.network, cfg.train_config(), init_seed=cfg.seeds["init"])
    extra = {"experiment": cfg.to_dict(), "geometry": cfg.scan_geometry().to_dict(), "config_hash": digest,
             "mode": cfg.mode, "K": cfg.K}
    save_checkpoint(path, net, train_cfg=cfg.train_config(), log=log, adam=adam, extra=extra)
    log_path = path.with_name(path.stem + ".log.csv")
    tmp = log_path.with_name(log_path.name + ".tmp")
    log.to_csv(tmp)
    os.replace(tmp, log_path)
    manifest = load_manifest(cfg)
    _record_stage(manifest, key, digest, checkpoint=os.path.relpath(path, cfg.out), log=log_path.name,
                  final_loss=log.mean_loss[-1])
    save_manifest(cfg, manifest)
    return path


def load_network(checkpoint: str | Path, cfg: ExperimentConfig):
    """Load a checkpoint, refusing it if it was trained for another geometry or grid."""
    net, ckpt_manifest, _ = load_checkpoint(checkpoint)
    extra = ckpt_manifest.get("extra", {})
    geometry = cfg.scan_geometry().to_dict()
    if extra.get("geometry") is not None and extra["geometry"] != geometry:
        raise PipelineError("checkpoint was trained for a different scan geometry",
                            checkpoint=str(checkpoint), expected=geometry, found=extra["geometry"])
    return net, extra


def reconstruct(cfg: ExperimentConfig, checkpoint: str | Path, sinogram: str | Path,
                out: str | Path | None = None, compare_solver: bool = False) -> tuple[np.ndarray, dict]:
    """``K`` solver iterations then the network; returns the image and phase timings (seconds)."""
    net, extra = load_network(checkpoint, cfg)
    geometry, grid = cfg.scan_geometry(), cfg.grid
    K = int(extra.get("K", cfg.K))
    b = read_raw(sinogram)
    if b.shape != geometry.sinogram_shape:
        raise PipelineError(f"sinogram is {b.shape}, geometry expects {geometry.sinogram_shape}",
                            sinogram=str(sinogram))
    t0 = time.perf_counter()
    x_ris, report = sgp_solve(b, geometry, cfg.solver, K, grid=grid)
    t1 = time.perf_counter()
    x = net.predict(x_ris[None, None].astype(net.dtype))[0, 0].astype(np.float64)
    t2 = time.perf_counter()
    timings = {"K": K, "solver_seconds": t1 - t0, "network_seconds": t2 - t1}
    if compare_solver:
        if report.stop_reason == "tolerance":
            timings.update(remaining_solver_seconds=0.0, K_star=report.K_star)
        else:
            t3 = time.perf_counter()
            _, tail = sgp_solve(b, geometry, cfg.solver, grid=grid, state=report.state)
            timings.update(remaining_solver_seconds=time.perf_counter() - t3, K_star=tail.K_star)
    if out is not None:
        write_raw(out, x)
    return x, timings


def evaluate(cfg: ExperimentConfig, checkpoint: str | Path | None = None, force: bool = False) -> MetricsReport:
    """Metrics on the test split for x_RIS, the network output and x_IS."""
    manifest = load_manifest(cfg)
    root = cfg.out
    checkpoint = Path(checkpoint) if checkpoint else checkpoint_path(cfg)
    out_dir = root / "eval" / run_name(cfg)
    digest = cfg.stage_hash("evaluate")
    key = f"evaluate:{run_name(cfg)}"
    record = manifest.get("stages", {}).get(key, {})
    if (not force and record.get("checkpoint_checksum") == _checksum_or_none(checkpoint)
            and _up_to_date(manifest, key, digest, [out_dir / "metrics.csv"])):
        logger.info("evaluate: up to date")
        return MetricsReport.from_csv(out_dir / "metrics.csv")
    net, _ = load_network(checkpoint, cfg)
    entries = _entries(manifest, "test")
    if not entries:
        raise PipelineError("the test split is empty")
    _require(root, entries, ris_key(cfg.K), f"x_RIS (K={cfg.K})")
    _require(root, entries, "is", "x_IS")
    role = NET_ROLE[cfg.mode]
    column = f"K={cfg.K}"
    ris = np.stack([read_raw(root / e[ris_key(cfg.K)]) for e in entries])
    pred = net.predict(ris[:, None].astype(net.dtype))[:, 0].astype(np.float64)
    pred_dir = root / f"out_{run_name(cfg)}"
    report = MetricsReport()
    for e, x_ris, x_net in zip(entries, ris, pred):
        write_raw(pred_dir / f"{e['id']}{IMAGE_EXT}", x_net)
        gt = read_raw(root / e["gt"])
        x_is = read_raw(root / e["is"])
        for name, x in (("RIS", x_ris), (role, x_net), ("IS", x_is)):
            report.add(e["id"], name, x, gt, "gt", column)
        for name, x in (("RIS", x_ris), (role, x_net), ("IS", x_is)):
            report.add(e["id"], name, x, x_is, "is", column)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / "metrics.csv.tmp"
    report.to_csv(tmp)
    os.replace(tmp, out_dir / "metrics.csv")
    table = report.format_table("gt") + "\n\nagainst x_IS\n" + report.format_table("is") + "\n"
    atomic_write_text(out_dir / "table.txt", table)
    summary = {f"{metric}({r},{ref})": report.mean(r, metric, ref, column)
               for r in ("RIS", role, "IS") for ref in ("gt", "is") for metric in ("re", "rmse", "ssim")}
    write_json(out_dir / "summary.json", summary)
    _record_stage(manifest, key, digest, checkpoint_checksum=_checksum_or_none(checkpoint),
                  metrics=os.path.relpath(out_dir / "metrics.csv", root))
    save_manifest(cfg, manifest)
    return report


def _checksum_or_none(path: Path):
    return file_checksum(path) if Path(path).exists() else None


def profile(images: list[str | Path], row: int, cols: tuple[int, int] | None = None,
            out: str | Path | None = None) -> str:
    """CSV with one column of intensities per image along ``row``, columns ``[start, stop)``."""
    if not images:
        raise PipelineError("profile needs at least one image")
    arrays = [read_raw(p) for p in images]
    shape = arrays[0].shape
    for p, a in zip(images, arrays):
        if a.shape != shape:
            raise PipelineError(f"{p} is {a.shape}, expected {shape}")
    if not 0 <= row < shape[0]:
        raise PipelineError(f"row {row} outside [0, {shape[0]})")
    start, stop = cols if cols is not None else (0, shape[1])
    if not 0 <= start < stop <= shape[1]:
        raise PipelineError(f"column range [{start}, {stop}) outside [0, {shape[1]})")
    names = [Path(p).stem for p in images]
    lines = [",".join(["col", *names])]
    for c in range(start, stop):
        lines.append(",".join([str(c), *(repr(float(a[row, c])) for a in arrays)]))
    text = "\n".join(lines) + "\n"
    if out is not None:
        atomic_write_text(out, text)
    return text


def run_all(cfg: ExperimentConfig, force: bool = False) -> MetricsReport:
    generate_data(cfg, force)
    simulate(cfg, force)
    build_targets(cfg, force)
    build_ris(cfg, force)
    train_network(cfg, force)
    return evaluate(cfg, force=force)

