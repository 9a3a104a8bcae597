"""Command-line interface.

Subcommands: synth, features, bank, detect, eval, pipeline. Every RunConfig
field is also a ``--field value`` flag; flags override the config file, which
overrides the defaults. Failures print ``error[<category>]: <message>`` to
stderr and exit with a category-specific nonzero code.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

import yaml

from . import io as mio
from .config import RunConfig, config_from_dict, config_field_names, load_config
from .errors import ConfigError, MultiFPFHIError
from .eval import evaluate
from .synthgen import PRESETS, SceneSpec, generate, preset

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "format": 4,
    "io": 5,
    "parameter": 6,
    "layout_mismatch": 7,
    "degenerate_input": 8,
    "error": 1,
}


class UsageError(MultiFPFHIError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so that usage problems share the error path."""

    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().rstrip()}")


def _floats(text: str):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _optional(kind):
    def parse(text: str):
        return None if text.lower() in ("none", "null", "") else kind(text)
    return parse


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


_FIELD_TYPES = {
    "voxel_size": float, "normal_radius": float, "feature_radius": float,
    "intensity_radius": _optional(float), "bins": int, "bank_size": int, "seed": int,
    "thresholds": _floats, "feature_mode": str, "intensity_weight": float,
    "normal_viewpoint": _optional(_floats), "relative_intensity": _bool, "coreset_start": str,
    "projection_dim": _optional(int), "k_max": int, "workers": int, "kde_grid": int, "figures": _bool,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    g = p.add_argument_group("run configuration overrides")
    for name in config_field_names():
        flags = ["--" + name] + (["--" + name.replace("_", "-")] if "_" in name else [])
        g.add_argument(*flags, dest="cfg_" + name, type=_FIELD_TYPES[name], default=None, metavar="VALUE")


def _resolve_config(args, scene_class: Optional[str] = None) -> RunConfig:
    base = load_config(args.config, scene_class).to_dict() if args.config else \
        config_from_dict({}, scene_class).to_dict()
    overrides = {name: getattr(args, "cfg_" + name) for name in config_field_names()
                 if getattr(args, "cfg_" + name) is not None}
    return config_from_dict({**base, **overrides})


def _load_scene(args) -> Optional[SceneSpec]:
    if getattr(args, "preset", None):
        return preset(args.preset)
    if getattr(args, "scene", None):
        try:
            with open(args.scene) as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"{args.scene}: cannot read scene: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{args.scene}: malformed YAML: {exc}") from None
        try:
            return SceneSpec.from_dict(data or {})
        except MultiFPFHIError as exc:
            raise ConfigError(f"{args.scene}: {exc}") from None
    return None


def _viewpoint(arg) -> Optional[tuple]:
    return tuple(arg) if arg else None


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> None:
    spec = _load_scene(args)
    if spec is None:
        raise UsageError("synth needs --preset or --scene")
    pair = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    ext = ".csv" if args.format == "xyz-csv" else ".ply"
    mio.write_cloud(pair.reference, os.path.join(args.out, "reference" + ext), args.format)
    mio.write_cloud(pair.test, os.path.join(args.out, "test" + ext), args.format)
    with open(os.path.join(args.out, "scene.yaml"), "w") as fh:
        yaml.safe_dump(spec.to_dict(), fh, sort_keys=True)
    print(f"wrote {len(pair.reference)} reference and {len(pair.test)} test points to {args.out}")


def cmd_features(args) -> None:
    from .pipeline import compute_features, prepare

    cfg = _resolve_config(args)
    cloud = prepare(mio.read_cloud(args.cloud, args.format, args.intensity_property), cfg)
    feats = compute_features(cloud, cfg, _viewpoint(args.viewpoint))
    mio.write_features(feats, args.out)
    print(f"wrote {len(feats)} x {feats.width} feature rows to {args.out}")


def cmd_bank(args) -> None:
    from .pipeline import build_bank, compute_features, prepare

    cfg = _resolve_config(args)
    if args.features:
        feats = mio.read_features(args.features)
        source = os.path.basename(args.features)
    elif args.cloud:
        cloud = prepare(mio.read_cloud(args.cloud, args.format, args.intensity_property), cfg)
        feats = compute_features(cloud, cfg, _viewpoint(args.viewpoint))
        source = cloud.frame_id
    else:
        raise UsageError("bank needs --features or --cloud")
    bank = build_bank(feats, cfg, source)
    mio.write_bank(bank, args.out)
    print(f"wrote memory bank of {bank.m} rows to {args.out}")


def cmd_detect(args) -> None:
    from .pipeline import compute_features, detect, prepare, write_outputs

    cfg = _resolve_config(args)
    bank = mio.read_bank(args.bank)
    cloud = prepare(mio.read_cloud(args.cloud, args.format, args.intensity_property), cfg)
    if args.features:
        feats = mio.read_features(args.features)
        if feats.point_ids.size and feats.point_ids.max() >= len(cloud):
            raise ConfigError(f"{args.features}: point ids exceed the prepared cloud; "
                              "check voxel_size")
    else:
        feats = compute_features(cloud, cfg, _viewpoint(args.viewpoint))
    result = detect(cloud, feats, bank)
    report = evaluate(result, cloud.labels, cfg.thresholds, cfg.kde_grid) if cloud.labels is not None else None
    paths = write_outputs(cloud, result, cfg, args.out, report)
    print(f"scored {len(cloud)} points; outputs in {args.out} ({', '.join(sorted(paths))})")


def cmd_eval(args) -> None:
    cfg = _resolve_config(args)
    result, labels = mio.read_scores_csv(args.scores)
    if labels is None:
        raise ConfigError(f"{args.scores}: scores CSV has no label column")
    report = evaluate(result, labels, cfg.thresholds, cfg.kde_grid)
    paths = mio.write_report(report, args.out)
    if cfg.figures:
        from .plotting import plot_kde
        paths["kde_png"] = os.path.join(args.out, "kde.png")
        plot_kde(report, paths["kde_png"], "min-distance densities by label group")
    sys.stdout.write(report.to_text())


def cmd_pipeline(args) -> None:
    from .pipeline import run_pipeline

    spec = _load_scene(args)
    if spec is not None:
        if args.reference or args.test:
            raise UsageError("give either --preset/--scene or --reference/--test, not both")
        cfg = _resolve_config(args, spec.scene_class)
        pair = generate(spec)
        reference, test, viewpoint = pair.reference, pair.test, spec.scanner_position()
    else:
        if not (args.reference and args.test):
            raise UsageError("pipeline needs --preset/--scene or both --reference and --test")
        cfg = _resolve_config(args)
        reference = mio.read_cloud(args.reference, args.format, args.intensity_property)
        test = mio.read_cloud(args.test, args.format, args.intensity_property)
        viewpoint = None
    out = run_pipeline(reference, test, cfg, args.out, viewpoint, args.save_intermediates)
    if out.report is not None:
        sys.stdout.write(out.report.to_text())
    print(f"outputs in {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="multifpfhi", description="Geometry + intensity anomaly detection on point clouds.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="{synth,features,bank,detect,eval,pipeline}",
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a labeled reference/test pair")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--scene", help="YAML scene description")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", default="ply-binary-le", choices=mio.CLOUD_FORMATS)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="compute a feature matrix container")
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=mio.CLOUD_FORMATS)
    p.add_argument("--intensity-property", default="intensity",
                   help="vertex property holding intensity (RGB grey fallback)")
    p.add_argument("--viewpoint", type=_floats, help="fallback normal viewpoint x,y,z")
    _add_config_flags(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("bank", help="build a coreset memory bank")
    p.add_argument("--features")
    p.add_argument("--cloud")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=mio.CLOUD_FORMATS)
    p.add_argument("--intensity-property", default="intensity",
                   help="vertex property holding intensity (RGB grey fallback)")
    p.add_argument("--viewpoint", type=_floats)
    _add_config_flags(p)
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("detect", help="score a cloud against a bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--features", help="precomputed features of the prepared cloud")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=mio.CLOUD_FORMATS)
    p.add_argument("--intensity-property", default="intensity",
                   help="vertex property holding intensity (RGB grey fallback)")
    p.add_argument("--viewpoint", type=_floats)
    _add_config_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="evaluation report from a labeled scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run every stage with one configuration")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--scene")
    p.add_argument("--reference")
    p.add_argument("--test")
    p.add_argument("--format", choices=mio.CLOUD_FORMATS)
    p.add_argument("--intensity-property", default="intensity",
                   help="vertex property holding intensity (RGB grey fallback)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--save-intermediates", action="store_true",
                   help="also write feature and bank containers")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a subcommand is required\n{parser.format_usage().rstrip()}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except MultiFPFHIError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
