"""Command-line surface tying the pipeline together.

Subcommands: decompose, spectrum, filter, phantom, train, eval, ablate,
band-importance, sweep-components, spectrum-by-class.  Configuration comes
from built-in defaults, overridden by an optional key=value file (--config),
overridden by explicit flags.  The effective configuration is echoed into
every output directory; warnings go to a log file there (the only place with
timestamps) and never change the exit code.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import containers, phantoms
from .data import load_manifest
from .ensemble import BandConfig
from .errors import ContractViolation, FormatError, ManifestError
from .evaluation import (METRIC_NAMES, ablation_scales, band_importance,
                         component_sweep, extract_features, mean_spectrum_by_class,
                         run_cv, write_csv, write_cv_report, write_roc_curves)
from .flow import FlowConfig
from .transform import TransferFunction, spectrum, stv_filter

CONFIG_SCHEMA = {
    "dt": float,
    "n_components": int,
    "inner_tol": float,
    "inner_max_iter": int,
    "scales_per_band": int,
    "overlapping": bool,
    "mode": str,
    "cutoff": float,
    "seed": int,
    "p_enh": float,
    "folds": int,
    "threads": int,
}

CONFIG_DEFAULTS = {
    "dt": 0.25,
    "n_components": 120,
    "inner_tol": 1e-6,
    "inner_max_iter": 500,
    "scales_per_band": 5,
    "overlapping": False,
    "mode": "tree",
    "cutoff": 0.45,
    "seed": 0,
    "p_enh": 1.0,
    "folds": 10,
    "threads": 1,
}


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def load_config_file(path) -> dict:
    """Flat key=value file; unknown keys are rejected."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractViolation(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_SCHEMA:
            raise ContractViolation(f"{path}:{lineno}: unknown key {key!r}")
        kind = CONFIG_SCHEMA[key]
        try:
            out[key] = _parse_bool(value) if kind is bool else kind(value)
        except ValueError as exc:
            raise ContractViolation(f"{path}:{lineno}: {exc}") from None
    return out


def effective_config(args) -> dict:
    cfg = dict(CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for key in CONFIG_SCHEMA:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def echo_config(cfg: dict, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={cfg[key]}" for key in sorted(cfg)]
    (directory / "run_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _attach_log(directory: Path) -> None:
    handler = logging.FileHandler(directory / "spectv.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("spectv").addHandler(handler)
    logging.getLogger("spectv").setLevel(logging.INFO)


def _flow_config(cfg: dict) -> FlowConfig:
    return FlowConfig(dt=cfg["dt"], n_components=cfg["n_components"],
                      inner_tol=cfg["inner_tol"], inner_max_iter=cfg["inner_max_iter"])


def _band_config(cfg: dict) -> BandConfig:
    return BandConfig(cfg["n_components"], cfg["scales_per_band"], cfg["overlapping"])


def _out_dir(args) -> Path:
    return Path(args.output_dir)


# --- subcommand handlers ------------------------------------------------------

def cmd_decompose(args) -> int:
    from .transform import decompose

    cfg = effective_config(args)
    image = containers.read_raster(args.input)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out.parent)
    _attach_log(out.parent)
    stack = decompose(image, _flow_config(cfg))
    containers.write_stack(out, stack)
    print(f"components: {stack.n_components}")
    print(f"residual_norm: {np.linalg.norm(stack.residual)!r}")
    return 0


def cmd_spectrum(args) -> int:
    cfg = effective_config(args)
    image = containers.read_raster(args.input)
    stack = containers.read_stack(args.stack, dt=cfg["dt"])
    spec = spectrum(image, stack)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out.parent)
    rows = [[k + 1, stack.scales[k], spec.values[k]] for k in range(stack.n_components)]
    rows.append(["residual", "", spec.residual_term])
    write_csv(out, ["index", "scale", "value"], rows)
    print(f"parseval_residual: {spec.residual_term!r}")
    return 0


def _load_gains(path, n: int) -> np.ndarray:
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    if not rows or rows[0].strip() != "index,gain":
        raise ContractViolation(f"{path}: expected header 'index,gain'")
    gains = np.ones(n)
    for line in rows[1:]:
        if not line.strip():
            continue
        idx, _, g = line.partition(",")
        k = int(idx)
        if not 1 <= k <= n:
            raise ContractViolation(f"{path}: component index {k} out of range")
        gains[k - 1] = float(g)
    return gains


def cmd_filter(args) -> int:
    cfg = effective_config(args)
    stack = containers.read_stack(args.stack, dt=cfg["dt"])
    if args.gains:
        gains = _load_gains(args.gains, stack.n_components)
    else:
        gains = np.ones(stack.n_components)
        scales = stack.scales
        if args.suppress_below is not None:
            gains[scales <= args.suppress_below] = 0.0
        if args.suppress_above is not None:
            gains[scales >= args.suppress_above] = 0.0
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out.parent)
    filtered = stv_filter(stack, TransferFunction(gains, args.residual_gain))
    containers.write_raster(out, filtered)
    print(f"kept_components: {int((gains != 0).sum())} of {stack.n_components}")
    return 0


def cmd_phantom(args) -> int:
    cfg = effective_config(args)
    if args.cohort:
        n_normal, n_path = args.cohort
        cohort = phantoms.synth_cohort(n_normal, n_path, cfg["seed"],
                                       vertebrae_per_patient=args.vertebrae,
                                       patches_per_vertebra=args.patches_per_vertebra)
        directory = _out_dir(args)
        echo_config(cfg, directory)
        manifest_path = phantoms.save_cohort(cohort, directory)
        print(f"manifest: {manifest_path}")
        print(f"patches: {len(cohort.patches)}")
        return 0
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out.parent)
    if args.kind == "disk":
        image = phantoms.disk_image(args.size[0], args.size[1],
                                    tuple(args.center), args.radius, args.contrast)
    elif args.kind == "two_disks":
        image = phantoms.two_disks_image(
            args.size[0], args.size[1],
            [tuple(args.centers[:2]), tuple(args.centers[2:])],
            args.radii, args.contrasts)
    elif args.kind == "step_1d":
        image = phantoms.step_signal_1d(args.breakpoints, args.levels, args.length)
    elif args.kind == "noise_texture":
        image = phantoms.noise_texture(args.size[0], args.size[1], cfg["seed"])
    else:
        raise ContractViolation(f"unknown phantom kind {args.kind!r}")
    containers.write_raster(out, image)
    print(f"raster: {out} ({image.shape[1]}x{image.shape[0]})")
    return 0


def _features(args, cfg):
    manifest = load_manifest(args.manifest)
    return extract_features(manifest, _flow_config(cfg), threads=cfg["threads"])


def cmd_train(args) -> int:
    from .data import training_rows
    from .ensemble import fit_band_ensemble
    from .transform import enhance_vectors

    cfg = effective_config(args)
    directory = _out_dir(args)
    echo_config(cfg, directory)
    _attach_log(directory)
    manifest = load_manifest(args.manifest)
    table = _features(args, cfg)
    enhanced = {p.record.key: enhance_vectors(p.signatures, cfg["p_enh"])
                for p in table.patches}
    rows = training_rows(manifest, duplicate_lu=True)
    X = np.concatenate([enhanced[rec.key] for rec, _ in rows], axis=0)
    y = np.concatenate([[int(label)] * enhanced[rec.key].shape[0]
                        for rec, label in rows])
    model = fit_band_ensemble(X, y, _band_config(cfg), cfg["mode"],
                              seed=cfg["seed"], cutoff=cfg["cutoff"])
    out = directory / "model.stvm"
    containers.save_model(out, model)
    print(f"model: {out}")
    print(f"training_rows: {len(rows)} patches, {X.shape[0]} pixel rows")
    return 0


def cmd_eval(args) -> int:
    cfg = effective_config(args)
    directory = _out_dir(args)
    echo_config(cfg, directory)
    _attach_log(directory)
    table = _features(args, cfg)
    cv = run_cv(table, _band_config(cfg), mode=cfg["mode"], seed=cfg["seed"],
                k=cfg["folds"], cutoff=cfg["cutoff"], p_enh=cfg["p_enh"])
    write_cv_report(directory / "metrics.csv", cv)
    write_roc_curves(directory / "roc.csv", cv)
    for name in METRIC_NAMES:
        mean, sd = cv.report.metrics[name]
        print(f"{name}: {mean:.4f} +/- {sd:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = effective_config(args)
    directory = _out_dir(args)
    echo_config(cfg, directory)
    _attach_log(directory)
    table = _features(args, cfg)
    scales = [int(s) for s in args.scales.split(",")]
    modes = args.modes.split(",")
    overlapping_values = (False, True) if args.correlated else (False,)
    rows = ablation_scales(table, scales, modes, overlapping_values=overlapping_values,
                           seed=cfg["seed"], k=cfg["folds"], cutoff=cfg["cutoff"])
    header = ["mode", "scales_per_band", "overlapping", "cutoff"] + list(METRIC_NAMES)
    write_csv(directory / "ablation.csv", header,
              [[r[h] for h in header] for r in rows])
    print(f"rows: {len(rows)}")
    return 0


def cmd_band_importance(args) -> int:
    cfg = effective_config(args)
    directory = _out_dir(args)
    echo_config(cfg, directory)
    _attach_log(directory)
    table = _features(args, cfg)
    cv = run_cv(table, _band_config(cfg), mode=cfg["mode"], seed=cfg["seed"],
                k=cfg["folds"], cutoff=cfg["cutoff"], p_enh=cfg["p_enh"])
    drops = band_importance(table, cv)
    write_csv(directory / "band_importance.csv", ["band", "auc_drop"],
              [[b + 1, drops[b]] for b in range(len(drops))])
    print(f"bands: {len(drops)}; max drop {drops.max():.4f} at band {int(drops.argmax()) + 1}")
    return 0


def cmd_sweep_components(args) -> int:
    cfg = effective_config(args)
    directory = _out_dir(args)
    echo_config(cfg, directory)
    _attach_log(directory)
    table = _features(args, cfg)
    counts = ([int(c) for c in args.counts.split(",")] if args.counts else None)
    pairs = component_sweep(table, counts, scales_per_band=cfg["scales_per_band"],
                            mode=cfg["mode"], seed=cfg["seed"], k=cfg["folds"],
                            cutoff=cfg["cutoff"])
    write_csv(directory / "sweep_components.csv", ["n_components", "auc"],
              [[c, a] for c, a in pairs])
    best = max(pairs, key=lambda p: p[1])
    print(f"best: {best[0]} components (auc {best[1]:.4f})")
    return 0


def cmd_spectrum_by_class(args) -> int:
    cfg = effective_config(args)
    directory = _out_dir(args)
    echo_config(cfg, directory)
    _attach_log(directory)
    table = _features(args, cfg)
    spectra = mean_spectrum_by_class(table)
    rows = []
    for label, series in sorted(spectra.items(), key=lambda kv: int(kv[0])):
        for k, value in enumerate(series, start=1):
            rows.append([k, k * cfg["dt"], label.name, value])
    write_csv(directory / "mean_spectra.csv", ["index", "scale", "class", "value"], rows)
    print(f"classes: {len(spectra)}")
    return 0


# --- parser -------------------------------------------------------------------

def _add_common(sub, output_dir=True):
    sub.add_argument("--config", help="key=value configuration file")
    for key, kind in CONFIG_SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            sub.add_argument(flag, type=_parse_bool, default=None, metavar="BOOL")
        else:
            sub.add_argument(flag, type=kind, default=None)
    if output_dir:
        sub.add_argument("--output-dir", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spectv",
        description="Spectral TV decomposition and band-ensemble classification")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("decompose", help="raster -> spectral stack")
    _add_common(p, output_dir=False)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_decompose)

    p = subs.add_parser("spectrum", help="spectral response of a raster/stack pair")
    _add_common(p, output_dir=False)
    p.add_argument("--input", required=True)
    p.add_argument("--stack", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_spectrum)

    p = subs.add_parser("filter", help="reweight spectral components")
    _add_common(p, output_dir=False)
    p.add_argument("--stack", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--suppress-below", type=float, default=None,
                   help="zero gains for scales <= this")
    p.add_argument("--suppress-above", type=float, default=None,
                   help="zero gains for scales >= this")
    p.add_argument("--gains", help="CSV (index,gain) of explicit gains")
    p.add_argument("--residual-gain", type=float, default=1.0)
    p.set_defaults(func=cmd_filter)

    p = subs.add_parser("phantom", help="deterministic phantom or cohort")
    _add_common(p, output_dir=False)
    p.add_argument("--kind", choices=["disk", "two_disks", "step_1d", "noise_texture"])
    p.add_argument("--output")
    p.add_argument("--output-dir")
    p.add_argument("--cohort", nargs=2, type=int, metavar=("N_NORMAL", "N_PATH"))
    p.add_argument("--vertebrae", type=int, default=3)
    p.add_argument("--patches-per-vertebra", type=int, default=2)
    p.add_argument("--size", nargs=2, type=int, default=[64, 64], metavar=("W", "H"))
    p.add_argument("--center", nargs=2, type=int, default=[32, 32], metavar=("X", "Y"))
    p.add_argument("--radius", type=float, default=8.0)
    p.add_argument("--contrast", type=float, default=1.0)
    p.add_argument("--centers", nargs=4, type=int, default=[18, 18, 44, 44])
    p.add_argument("--radii", nargs=2, type=float, default=[4.0, 8.0])
    p.add_argument("--contrasts", nargs=2, type=float, default=[1.0, 1.0])
    p.add_argument("--length", type=int, default=128)
    p.add_argument("--breakpoints", type=lambda s: [int(x) for x in s.split(",")],
                   default=[2, 4])
    p.add_argument("--levels", type=lambda s: [float(x) for x in s.split(",")],
                   default=[0.0, 1.0, 0.0])
    p.set_defaults(func=cmd_phantom)

    for name, func, extra in [
        ("train", cmd_train, []),
        ("eval", cmd_eval, []),
        ("ablate", cmd_ablate, ["scales", "modes", "correlated"]),
        ("band-importance", cmd_band_importance, []),
        ("sweep-components", cmd_sweep_components, ["counts"]),
        ("spectrum-by-class", cmd_spectrum_by_class, []),
    ]:
        p = subs.add_parser(name)
        _add_common(p)
        p.add_argument("--manifest", required=True)
        if "scales" in extra:
            p.add_argument("--scales", default="3,4,5,6,8,10,12,15")
            p.add_argument("--modes", default="tree")
            p.add_argument("--correlated", action="store_true",
                           help="also evaluate overlapping (stride-1) bands")
        if "counts" in extra:
            p.add_argument("--counts", default=None,
                           help="comma-separated component counts (default 20..120 by 10)")
        p.set_defaults(func=func)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "phantom":
        if bool(args.cohort) == bool(args.kind):
            parser.error("phantom needs exactly one of --kind or --cohort")
        if args.cohort and not args.output_dir:
            parser.error("--cohort requires --output-dir")
        if args.kind and not args.output:
            parser.error("--kind requires --output")
    try:
        return args.func(args)
    except (ContractViolation, FormatError, ManifestError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
