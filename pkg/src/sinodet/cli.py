"""Command-line pipeline: simulate, train, detect, evaluate, report.

Every command works inside one run directory.  ``phantom`` resolves and
persists the configuration there; later commands read it back so a run is
fully described by its directory.  All outputs are written atomically
(temp file + rename) and are byte-identical across repeats with the same
seeds under ``--threads 1``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import ParamSet, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .evaluation import Detection, froc
from .fbp import fbp
from .geometry import GeometryError, Sinogram, Volume, hu_to_mu, mu_to_hu
from .io import (DataError, read_annotations, read_csv_rows, read_manifest,
                 read_sinogram, read_volume, write_annotations, write_csv,
                 write_manifest, write_sinogram, write_volume)
from .noise import add_poisson_noise
from .pipeline import (ScanRecord, detect_scan, evaluate_variant, make_scans,
                       noise_label, project_scans, sample_scan_patches,
                       scan_seed, variant_image)
from .reconnet import init_recon_params, reconstruct_volume
from .detectnet import init_detector_params
from .sampling import read_patch_specs, write_patch_specs
from .training import (PIPELINE_VARIANTS, NumericalError, TrainConfig,
                       build_patch_dataset, finetune_e2e, train_detector,
                       train_recon)

log = logging.getLogger(__name__)

DETECTION_HEADER = ["scan_id", "x_mm", "y_mm", "z_mm", "score"]
FROC_HEADER = ["fp_per_scan", "sensitivity", "lo95", "hi95"]
TRAINED_VARIANTS = ("reference", "fbp", "two-step")  # stage-2 detectors


# -- run-directory layout -----------------------------------------------------

def _p(run: Path, *parts) -> Path:
    out = run.joinpath(*parts)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(run: Path) -> RunConfig:
    path = run / "config.json"
    if not path.exists():
        raise DataError(f"{path} not found; run `sinodet phantom` first")
    return RunConfig.load(path)


def _load_scans(run: Path, cfg: RunConfig, split=None, sinograms=False) -> list:
    records = read_manifest(run / "manifest.json")
    scans = []
    for rec in records:
        if split and rec["split"] != split:
            continue
        sid = rec["id"]
        vol = read_volume(run / rec["volume"])
        mask = read_volume(run / rec["mask"])
        anns = read_annotations(run / rec["annotations"])
        sr = ScanRecord(sid, rec["split"], vol, mask, anns)
        if sinograms:
            spath = run / "sino" / f"{sid}.sino"
            if not spath.exists():
                raise DataError(f"{spath} not found; run `sinodet project` first")
            sr.sinogram = read_sinogram(spath)
        scans.append(sr)
    return scans


def _train_config(cfg: RunConfig, stage: int, seed=None) -> TrainConfig:
    sec = cfg["train"][f"stage{stage}"]
    over = {k: v for k, v in sec.items()}
    over["seed"] = cfg["train"]["seed"] if seed is None else seed
    return TrainConfig.for_stage(stage, **over)


def _echo_config(cfg: RunConfig, run: Path, command: str):
    cfg.dump(_p(run, f"config.{command}.json"))


def _load_params(path: Path, partition: str, prefix=None) -> ParamSet:
    if not path.exists():
        raise DataError(f"checkpoint {path} not found (train the earlier stage first)")
    arrays = load_checkpoint(path)
    ps = ParamSet(partition)
    for name in sorted(arrays):
        if prefix is None or name.startswith(prefix):
            ps.add(name, arrays[name])
    if not len(ps):
        raise DataError(f"checkpoint {path} holds no {partition} parameters")
    return ps


def _stage_params(run: Path, cfg: RunConfig, variant: str):
    """(theta, eta) pair a variant detects with."""
    ck = run / "ckpt"
    if variant == "end-to-end":
        return (_load_params(ck / "stage3.ckpt", "recon", "recon."),
                _load_params(ck / "stage3.ckpt", "det", "det."))
    eta = _load_params(ck / f"stage2_{variant}.ckpt", "det")
    theta = None
    if variant == "two-step":
        theta = _load_params(ck / "stage1.ckpt", "recon")
    return theta, eta


def _write_loss_trace(trace, path: Path):
    write_csv(path, ["step", "loss"], trace)


# -- commands -----------------------------------------------------------------

def cmd_phantom(args):
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.from_profile(args.profile)
    if args.seed is not None:
        cfg.doc["train"]["seed"] = args.seed
        cfg.doc["eval"]["seed"] = args.seed
    run = Path(args.dir)
    run.mkdir(parents=True, exist_ok=True)
    scans = make_scans(cfg, cfg["train"]["seed"])
    records = []
    for rec in scans:
        write_volume(rec.volume, _p(run, "scans", f"{rec.scan_id}.vol"))
        write_volume(rec.mask, _p(run, "scans", f"{rec.scan_id}.mask.vol"))
        write_annotations(rec.annotations, _p(run, "scans", f"{rec.scan_id}.csv"))
        records.append({
            "id": rec.scan_id,
            "split": rec.split,
            "volume": f"scans/{rec.scan_id}.vol",
            "mask": f"scans/{rec.scan_id}.mask.vol",
            "annotations": f"scans/{rec.scan_id}.csv",
        })
    write_manifest(records, run / "manifest.json")
    cfg.dump(run / "config.json")
    _echo_config(cfg, run, "phantom")
    print(f"wrote {len(records)} scans to {run}")


def cmd_project(args):
    run = Path(args.dir)
    cfg = _load_config(run)
    scans = _load_scans(run, cfg)
    geom = cfg.geometry()
    project_scans(scans, geom, threads=args.threads)
    for i, rec in enumerate(scans):
        sino = rec.sinogram
        if args.noise_n0 is not None:
            sino = add_poisson_noise(sino, args.noise_n0,
                                     seed=scan_seed(cfg["eval"]["seed"] + 1, i))
        write_sinogram(sino, _p(run, "sino", f"{rec.scan_id}.sino"))
    _echo_config(cfg, run, "project")
    print(f"projected {len(scans)} scans ({geom.n_views} views, "
          f"{geom.n_channels} channels)")


def cmd_fbp(args):
    run = Path(args.dir)
    cfg = _load_config(run)
    scans = _load_scans(run, cfg, sinograms=True)
    grid = cfg.grid()
    for rec in scans:
        vol = mu_to_hu(fbp(rec.sinogram, grid))
        write_volume(vol, _p(run, "fbp", f"{rec.scan_id}.vol"))
    _echo_config(cfg, run, "fbp")
    print(f"reconstructed {len(scans)} scans with FBP")


def cmd_train_recon(args):
    run = Path(args.dir)
    cfg = _load_config(run)
    scans = _load_scans(run, cfg, split="train", sinograms=True)
    grid = cfg.grid()
    theta = init_recon_params(seed=cfg["train"]["seed"],
                              n_iters=cfg["recon"]["n_iters"],
                              hidden=cfg["recon"]["hidden"])
    pairs = [(rec.sinogram, hu_to_mu(rec.volume)) for rec in scans]
    trace = train_recon(pairs, theta, _train_config(cfg, 1), grid)
    save_checkpoint(_p(run, "ckpt", "stage1.ckpt"), theta.state_dict())
    _write_loss_trace(trace, _p(run, "loss", "stage1.csv"))
    _echo_config(cfg, run, "train-recon")
    print(f"stage 1 done: {len(trace)} steps, final loss {trace[-1][1]:.6f}")


def _scan_specs(run: Path, cfg: RunConfig, scans):
    """Per-scan patch specs, sampled once and reused by every variant."""
    out = {}
    for i, rec in enumerate(scans):
        path = _p(run, "specs", f"{rec.scan_id}.csv")
        if path.exists():
            out[rec.scan_id] = read_patch_specs(path)
        else:
            specs = sample_scan_patches(rec, rec.mask, cfg, i)
            write_patch_specs(specs, path)
            out[rec.scan_id] = specs
    return out


def _variant_train_images(run: Path, cfg: RunConfig, scans, variant: str):
    grid = cfg.grid()
    if variant == "reference":
        return {rec.scan_id: rec.volume for rec in scans}
    if variant == "fbp":
        images = {}
        for rec in scans:
            path = run / "fbp" / f"{rec.scan_id}.vol"
            if not path.exists():
                raise DataError(f"{path} not found; run `sinodet fbp` first")
            images[rec.scan_id] = read_volume(path)
        return images
    if variant == "two-step":
        theta = _load_params(run / "ckpt" / "stage1.ckpt", "recon")
        return {rec.scan_id: mu_to_hu(reconstruct_volume(rec.sinogram, theta, grid))
                for rec in scans}
    raise ConfigError(f"train-detector variant must be one of {TRAINED_VARIANTS}")


def cmd_train_detector(args):
    run = Path(args.dir)
    cfg = _load_config(run)
    variant = args.variant
    if variant not in TRAINED_VARIANTS:
        raise ConfigError(
            f"train-detector variant must be one of {TRAINED_VARIANTS} "
            "(the end-to-end detector comes from `sinodet finetune`)")
    scans = _load_scans(run, cfg, split="train",
                        sinograms=(variant != "reference"))
    specs = _scan_specs(run, cfg, scans)
    images = _variant_train_images(run, cfg, scans, variant)
    patches, labels = build_patch_dataset(images, specs, cfg.patch_shape())
    eta = init_detector_params(seed=cfg["train"]["seed"] + 1,
                               patch_shape=cfg.patch_shape(),
                               stage_channels=tuple(cfg["detector"]["stage_channels"]),
                               head_channels=cfg["detector"]["head_channels"])
    trace = train_detector(patches, labels, eta, _train_config(cfg, 2))
    save_checkpoint(_p(run, "ckpt", f"stage2_{variant}.ckpt"), eta.state_dict())
    _write_loss_trace(trace, _p(run, "loss", f"stage2_{variant}.csv"))
    _echo_config(cfg, run, "train-detector")
    print(f"stage 2 ({variant}) done: {len(labels)} patches "
          f"({int(labels.sum())} positive), final loss {trace[-1][1]:.6f}")


def cmd_finetune(args):
    run = Path(args.dir)
    cfg = _load_config(run)
    scans = _load_scans(run, cfg, split="train", sinograms=True)
    theta = _load_params(run / "ckpt" / "stage1.ckpt", "recon")
    eta = _load_params(run / "ckpt" / "stage2_two-step.ckpt", "det")
    specs = _scan_specs(run, cfg, scans)
    pairs = [(rec.sinogram, specs[rec.scan_id]) for rec in scans]
    trace = finetune_e2e(pairs, theta, eta, _train_config(cfg, 3),
                         cfg.grid(), cfg.patch_shape())
    merged = dict(theta.state_dict())
    merged.update(eta.state_dict())
    save_checkpoint(_p(run, "ckpt", "stage3.ckpt"), merged)
    _write_loss_trace(trace, _p(run, "loss", "stage3.csv"))
    _echo_config(cfg, run, "finetune")
    print(f"stage 3 done: {len(trace)} steps, final loss {trace[-1][1]:.6f}")


def _parse_noise(text):
    if text is None or text.lower() in ("none", "inf"):
        return None
    try:
        val = float(text)
    except ValueError:
        raise ConfigError(f"bad noise level {text!r}") from None
    if val <= 0:
        raise ConfigError("noise n0 must be positive")
    return val


def _detections_path(run, variant, n0):
    return _p(run, "detect", f"{variant}_{noise_label(n0)}.csv")


def _run_detection(run, cfg, scans, variant, n0, threads=1):
    theta, eta = _stage_params(run, cfg, variant)
    grid = cfg.grid()
    rows = []
    for i, rec in enumerate(scans):
        dets = detect_scan(variant, rec, theta, eta, cfg, grid, n0=n0, index=i)
        rows.extend((d.scan_id, *d.center, d.score) for d in dets)
    write_csv(_detections_path(run, variant, n0), DETECTION_HEADER, rows)
    return rows


def cmd_detect(args):
    run = Path(args.dir)
    cfg = _load_config(run)
    n0 = _parse_noise(args.noise_n0)
    scans = _load_scans(run, cfg, split="test",
                        sinograms=(args.variant != "reference"))
    rows = _run_detection(run, cfg, scans, args.variant, n0, threads=args.threads)
    _echo_config(cfg, run, "detect")
    print(f"{args.variant} @ n0={noise_label(n0)}: {len(rows)} detections "
          f"over {len(scans)} scans")


def _read_detections(run, cfg, variant, n0):
    path = _detections_path(run, variant, n0)
    if not path.exists():
        return None
    header, rows = read_csv_rows(path)
    if header != DETECTION_HEADER:
        raise DataError(f"{path}: bad detection header {header}")
    spacing = cfg["phantom"]["spacing"]
    extents = tuple(p * s for p, s in zip(cfg.patch_shape(), spacing))
    return [Detection(r[0], (float(r[1]), float(r[2]), float(r[3])),
                      extents, float(r[4])) for r in rows]


def cmd_evaluate(args):
    run = Path(args.dir)
    cfg = _load_config(run)
    levels = ([_parse_noise(args.noise_n0)] if args.noise_n0 is not None
              else [(_parse_noise(str(v)) if v is not None else None)
                    for v in cfg["eval"]["noise_levels"]])
    scans = _load_scans(run, cfg, split="test", sinograms=True)
    anns = {rec.scan_id: [a for a in rec.annotations if a.is_non_small]
            for rec in scans}
    grid_rows = []
    for n0 in levels:
        row = [noise_label(n0)]
        for variant in PIPELINE_VARIANTS:
            dets = _read_detections(run, cfg, variant, n0)
            if dets is None:
                _run_detection(run, cfg, scans, variant, n0, threads=args.threads)
                dets = _read_detections(run, cfg, variant, n0)
            per_scan = {sid: [d for d in dets if d.scan_id == sid] for sid in anns}
            curve = froc(per_scan, anns, n_boot=cfg["eval"]["n_boot"],
                         seed=cfg["eval"]["seed"])
            write_csv(_p(run, "froc", f"{variant}_{noise_label(n0)}.csv"),
                      FROC_HEADER,
                      list(zip(curve.fp_per_scan, curve.sensitivity,
                               curve.lo95, curve.hi95)))
            row.append(curve.mean_sensitivity)
        grid_rows.append(row)
    write_csv(run / "scores.csv", ["noise"] + list(PIPELINE_VARIANTS), grid_rows)
    _echo_config(cfg, run, "evaluate")
    print(f"score grid ({len(grid_rows)} noise levels x {len(PIPELINE_VARIANTS)} "
          f"variants) written to {run / 'scores.csv'}")


def cmd_report(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.dir)
    cfg = _load_config(run)
    levels = [(_parse_noise(str(v)) if v is not None else None)
              for v in cfg["eval"]["noise_levels"]]
    # FROC panels, one per noise level
    fig, axes = plt.subplots(1, len(levels), figsize=(5 * len(levels), 4),
                             squeeze=False)
    for ax, n0 in zip(axes[0], levels):
        for variant in PIPELINE_VARIANTS:
            path = run / "froc" / f"{variant}_{noise_label(n0)}.csv"
            if not path.exists():
                raise DataError(f"{path} not found; run `sinodet evaluate` first")
            _, rows = read_csv_rows(path)
            fp = [float(r[0]) for r in rows]
            se = [float(r[1]) for r in rows]
            lo = [float(r[2]) for r in rows]
            hi = [float(r[3]) for r in rows]
            line, = ax.step(fp, se, where="post", label=variant)
            ax.fill_between(fp, lo, hi, step="post", alpha=0.15,
                            color=line.get_color())
        ax.set_xscale("symlog", linthresh=0.125)
        ax.set_xlabel("false positives per scan")
        ax.set_ylabel("sensitivity")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(f"n0 = {noise_label(n0)}")
        ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(_p(run, "report", "froc.svg"))
    plt.close(fig)

    # axial comparison of one test scan, window [-1400, 200] HU
    scans = _load_scans(run, cfg, split="test", sinograms=True)
    rec = scans[0]
    grid = cfg.grid()
    images = [("reference", rec.volume)]
    for variant in ("fbp", "two-step", "end-to-end"):
        try:
            theta, _ = _stage_params(run, cfg, variant)
        except DataError:
            theta = None
        if variant != "fbp" and theta is None:
            continue
        images.append((variant, variant_image(variant, rec, theta, grid)))
    mid = rec.volume.values.shape[0] // 2
    fig, axes = plt.subplots(1, len(images), figsize=(4 * len(images), 4))
    axes = np.atleast_1d(axes)
    for ax, (name, vol) in zip(axes, images):
        ax.imshow(vol.values[mid], cmap="gray", vmin=-1400, vmax=200,
                  origin="lower")
        ax.set_title(name)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(_p(run, "report", "slices.svg"))
    plt.close(fig)
    _echo_config(cfg, run, "report")
    print(f"report written to {run / 'report'}")


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sinodet",
        description="Simulated fanbeam CT lung nodule detection pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.add_argument("--dir", required=True, help="run directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads (1 = bit-exact reproducible)")
        p.set_defaults(func=fn)
        return p

    p = add("phantom", cmd_phantom, help="generate the phantom scan suite")
    p.add_argument("--config", help="JSON config (optional 'profile' key)")
    p.add_argument("--profile", default="desk", help="base profile when no config given")
    p.add_argument("--seed", type=int, help="override the master seed")

    p = add("project", cmd_project, help="forward-project all scans")
    p.add_argument("--noise-n0", type=float, help="apply Poisson noise at this photon count")

    add("fbp", cmd_fbp, help="filtered backprojection for all scans")
    add("train-recon", cmd_train_recon, help="stage 1: fit reconstruction weights")

    p = add("train-detector", cmd_train_detector, help="stage 2: fit a patch detector")
    p.add_argument("--variant", required=True, choices=TRAINED_VARIANTS)

    add("finetune", cmd_finetune, help="stage 3: joint end-to-end fine-tuning")

    p = add("detect", cmd_detect, help="sliding-window detection on test scans")
    p.add_argument("--variant", required=True, choices=PIPELINE_VARIANTS)
    p.add_argument("--noise-n0", help="photon count, or 'none'")

    p = add("evaluate", cmd_evaluate, help="FROC curves and the score grid")
    p.add_argument("--noise-n0", help="restrict to one noise level")

    add("report", cmd_report, help="render FROC panels and axial comparisons (SVG)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except (ConfigError, GeometryError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
