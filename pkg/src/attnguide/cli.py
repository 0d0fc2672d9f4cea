"""Command-line front end.

Every run writes a JSON manifest (``--manifest``, default ``<primary
output>.manifest.json``) with the parsed flags, their sha256 hash, input
and output digests, library versions and the run status. ``attnguide
replay MANIFEST`` re-runs a recorded invocation.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .container import WeightFormatError, load_weights, save_weights
from .experiments import (EmptyDataset, BenchConfig, attention_transfer, perturb_benchmark,
                          rewrite_image, write_benchmark)
from .gradients import DegenerateDenominator, LossSpec, LossSpecError
from .guidance import CompositeLayout, LayoutError, composite_guide, detail_interpret
from .imaging import (CorruptImageError, ImageFormatError, IMAGENET_HALF, RenderSpec, decode_image,
                      encode_image, pixel_bounds, preprocess, render_heatmap, to_raw)
from .rollout import CorrectionScheme, interpret
from .synthetic import PLANT_CONFIG, band_regions
from .vit import ConfigError, ModelConfig, PlantSettings, forward, plant_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
MANIFEST_SCHEMA = 1


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_flags(args: argparse.Namespace) -> Dict[str, object]:
    """Parsed flags minus bookkeeping, as a JSON-safe dict."""
    skip = {"func", "manifest", "outputs"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def config_hash(flags: Dict[str, object]) -> str:
    text = json.dumps(flags, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def versions() -> Dict[str, str]:
    import PIL
    import scipy

    return {"attnguide": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pillow": PIL.__version__, "python": platform.python_version()}


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_image(path, cfg: ModelConfig, mean, std):
    if not os.path.exists(path):
        raise DataError(f"image not found: {path}")
    raw = decode_image(path)
    return raw, preprocess(raw, cfg, mean, std, source=os.path.basename(path))


def _load(path):
    if not os.path.exists(path):
        raise DataError(f"weights not found: {path}")
    return load_weights(path)


def _loss(text: str, cfg: ModelConfig) -> LossSpec:
    try:
        spec = LossSpec.parse(text)
        spec.check(cfg.num_classes)
    except LossSpecError as exc:
        raise UsageError(str(exc)) from None
    return spec


def _layout(args) -> CompositeLayout:
    try:
        return CompositeLayout(args.placement, args.fraction)
    except LayoutError as exc:
        raise UsageError(str(exc)) from None


def _emit_saliency(args, sal, base_raw):
    if args.out:
        encode_image(render_heatmap(sal, base_raw, RenderSpec(alpha=args.alpha)), args.out)
        args.outputs.append(args.out)
    if args.json:
        write_json(sal.to_dict(), args.json)
        args.outputs.append(args.json)


# ---------------------------------------------------------------- subcommands

def cmd_interpret(args):
    w = _load(args.weights)
    spec = _loss(args.loss, w.config)
    raw, img = _read_image(args.image, w.config, args.mean, args.std)
    _emit_saliency(args, interpret(w, img, spec, args.scheme), raw)


def cmd_guide(args):
    w = _load(args.weights)
    spec = _loss(args.loss, w.config)
    layout = _layout(args)
    _, img = _read_image(args.image, w.config, args.mean, args.std)
    _, guide = _read_image(args.guide_image, w.config, args.mean, args.std)
    try:
        comp = composite_guide(img, guide, layout, w.config)
    except LayoutError as exc:
        raise UsageError(str(exc)) from None
    if args.composite_out:
        encode_image(to_raw(comp.image), args.composite_out)
        args.outputs.append(args.composite_out)
    _emit_saliency(args, interpret(w, comp.image, spec, args.scheme), to_raw(comp.image))


def cmd_detail(args):
    w = _load(args.weights)
    if args.c1 == args.c2:
        raise UsageError("classes must differ")
    _loss(f"{args.form}:{args.c1},{args.c2}", w.config)
    raw, img = _read_image(args.image, w.config, args.mean, args.std)
    _emit_saliency(args, detail_interpret(w, img, args.c1, args.c2, args.form, args.scheme), raw)


def cmd_transfer(args):
    w = _load(args.weights)
    spec = _loss(args.loss, w.config)
    if args.lr < 0 or args.steps < 0 or args.snapshot_every < 0:
        raise UsageError("--lr, --steps and --snapshot-every must be non-negative")
    raw, img = _read_image(args.image, w.config, args.mean, args.std)
    run = attention_transfer(w, img, spec, lr=args.lr, steps=args.steps, scheme=args.scheme,
                             snapshot_every=args.snapshot_every)
    if args.json:
        out = run.to_dict()
        out["snapshots"] = {str(r.step): r.attention.tolist()
                            for r in run.records if r.attention is not None}
        write_json(out, args.json)
        args.outputs.append(args.json)
    if args.out:
        encode_image(render_heatmap(run.records[-1].saliency, raw, RenderSpec(alpha=args.alpha)),
                     args.out)
        args.outputs.append(args.out)


def cmd_rewrite(args):
    w = _load(args.weights)
    if not 0 <= args.target < w.config.num_classes:
        raise UsageError(f"target {args.target} out of range")
    if args.step_size < 0 or args.max_steps < 0 or (args.eps is not None and args.eps < 0):
        raise UsageError("--step-size, --max-steps and --eps must be non-negative")
    _, img = _read_image(args.image, w.config, args.mean, args.std)
    orig = int(np.argmax(forward(w, img).logits.data))
    if orig == args.target:
        raise UsageError("classes must differ: target equals the current prediction")
    spec = _loss(args.loss or f"diff:{orig},{args.target}", w.config)
    run = rewrite_image(w, img, spec, step_size=args.step_size, max_steps=args.max_steps,
                        eps=args.eps, clamp=pixel_bounds(img))
    if args.json:
        rep = run.report()
        rep["target"] = args.target
        write_json(rep, args.json)
        args.outputs.append(args.json)
    if args.out:
        encode_image(to_raw(run.image), args.out)
        args.outputs.append(args.out)


def cmd_perturb(args):
    w = _load(args.weights)
    try:
        configs = [BenchConfig.parse(c) for c in args.configs]
        for c in configs:
            for label in range(w.config.num_classes):
                c.spec_for(label).check(w.config.num_classes)
    except (ValueError, LossSpecError) as exc:
        raise UsageError(f"bad --configs: {exc}") from None
    if not configs:
        raise UsageError("--configs is empty")
    if args.K is not None and args.K < 1:
        raise UsageError("--K must be >= 1")
    guide = layout = None
    if args.guide_image:
        layout = _layout(args)
        _, guide = _read_image(args.guide_image, w.config, args.mean, args.std)
    rep = perturb_benchmark(w, args.dataset, configs, guide=guide, layout=layout, K=args.K,
                            mean=args.mean, std=args.std, seed=args.seed)
    write_benchmark(rep, args.csv, args.json)
    args.outputs.extend(p for p in (args.csv, args.json) if p)


def cmd_plant_model(args):
    if args.config:
        if not os.path.exists(args.config):
            raise DataError(f"config not found: {args.config}")
        with open(args.config) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"config is not JSON: {exc}") from None
    else:
        doc = {}
    try:
        cfg = ModelConfig.from_dict({**PLANT_CONFIG.to_dict(), **doc.get("model", {})})
        settings = PlantSettings(**doc.get("plant", {}))
    except (TypeError, ConfigError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    if args.bands < 1 or cfg.grid % args.bands:
        raise UsageError(f"--bands {args.bands} does not divide the {cfg.grid}-wide patch grid")
    if args.bands > cfg.num_classes:
        raise UsageError("more bands than classes")
    try:
        w = plant_model(cfg, band_regions(cfg, args.bands), seed=args.seed, settings=settings)
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    save_weights(w, args.out)
    args.outputs.append(args.out)


# ---------------------------------------------------------------- parser

def _floats3(text: str) -> List[float]:
    vals = [float(v) for v in text.split(",")]
    if len(vals) == 1:
        vals = vals * 3
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="attnguide", description="Signed attention saliency for small ViTs.")
    p.add_argument("--version", action="version", version=f"attnguide {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, image=True):
        sp.add_argument("--weights", required=True)
        if image:
            sp.add_argument("--image", required=True)
        sp.add_argument("--mean", type=_floats3, default=list(IMAGENET_HALF))
        sp.add_argument("--std", type=_floats3, default=list(IMAGENET_HALF))
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--manifest")

    def saliency_out(sp):
        sp.add_argument("--scheme", choices=[s.value for s in CorrectionScheme], default="complete")
        sp.add_argument("--out", help="heatmap image (.png or .ppm)")
        sp.add_argument("--json", help="saliency JSON")
        sp.add_argument("--alpha", type=float, default=0.5)

    def layout_flags(sp, required=False):
        sp.add_argument("--guide-image", required=required)
        sp.add_argument("--placement", choices=["right", "bottom"], default="right")
        sp.add_argument("--fraction", type=float, default=0.5)

    sp = sub.add_parser("interpret", help="saliency for one image")
    common(sp)
    saliency_out(sp)
    sp.add_argument("--loss", default="single:0")
    sp.set_defaults(func=cmd_interpret)

    sp = sub.add_parser("guide", help="saliency with a guide image composited alongside")
    common(sp)
    saliency_out(sp)
    layout_flags(sp, required=True)
    sp.add_argument("--loss", default="single:0")
    sp.add_argument("--composite-out", help="write the composited input image")
    sp.set_defaults(func=cmd_guide)

    sp = sub.add_parser("detail", help="contrastive saliency between two classes")
    common(sp)
    saliency_out(sp)
    sp.add_argument("--c1", type=int, required=True)
    sp.add_argument("--c2", type=int, required=True)
    sp.add_argument("--form", choices=["ndiff", "diff", "ratio"], default="ndiff")
    sp.set_defaults(func=cmd_detail)

    sp = sub.add_parser("transfer", help="gradient descent on the attention maps")
    common(sp)
    sp.add_argument("--scheme", choices=[s.value for s in CorrectionScheme], default="complete")
    sp.add_argument("--loss", default="single:0")
    sp.add_argument("--lr", type=float, default=4e-4)
    sp.add_argument("--steps", type=int, default=10)
    sp.add_argument("--snapshot-every", type=int, default=0)
    sp.add_argument("--out", help="heatmap of the final step")
    sp.add_argument("--json", help="per-step losses, logits and saliency")
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("rewrite", help="pixel-space descent toward a target class")
    common(sp)
    sp.add_argument("--target", type=int, required=True)
    sp.add_argument("--loss", help="default diff:<current argmax>,<target>")
    sp.add_argument("--step-size", type=float, default=0.05)
    sp.add_argument("--max-steps", type=int, default=500)
    sp.add_argument("--eps", type=float, default=None)
    sp.add_argument("--out", help="rewritten image (quantised to 8 bits)")
    sp.add_argument("--json", help="run report")
    sp.set_defaults(func=cmd_rewrite)

    sp = sub.add_parser("perturb", help="perturbation AUC benchmark over a dataset")
    common(sp, image=False)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--configs", nargs="+", default=["complete/single:label"],
                    help="scheme[/loss] entries; 'label' in a loss means the image's class")
    sp.add_argument("--K", type=int, default=None)
    sp.add_argument("--csv")
    sp.add_argument("--json")
    layout_flags(sp)
    sp.set_defaults(func=cmd_perturb)

    sp = sub.add_parser("plant-model", help="write a planted-weight model")
    sp.add_argument("--config", help="JSON with 'model' (ModelConfig fields overriding the "
                    "planted defaults) and 'plant' (PlantSettings)")
    sp.add_argument("--bands", type=int, default=2, help="vertical class bands")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--manifest")
    sp.set_defaults(func=cmd_plant_model)

    sp = sub.add_parser("replay", help="re-run the invocation recorded in a manifest")
    sp.add_argument("recorded")
    sp.add_argument("--manifest")
    sp.set_defaults(func=None)
    return p


def _manifest_path(args) -> Optional[str]:
    if getattr(args, "manifest", None):
        return args.manifest
    for key in ("out", "json", "csv"):
        val = getattr(args, key, None)
        if val:
            return val + ".manifest.json"
    return None


def _manifest(args, argv, status, error=None) -> dict:
    flags = canonical_flags(args)
    inputs = {}
    for key in ("weights", "image", "guide_image", "config"):
        path = flags.get(key)
        if path and os.path.isfile(path):
            inputs[key] = {"path": path, "sha256": sha256_file(path)}
    outputs = {p: sha256_file(p) for p in args.outputs if os.path.isfile(p)}
    return {
        "schema": MANIFEST_SCHEMA,
        "command": args.command,
        "argv": list(argv),
        "flags": flags,
        "config_hash": config_hash(flags),
        "seed": flags.get("seed"),
        "inputs": inputs,
        "outputs": outputs,
        "versions": versions(),
        "status": status,
        "error": error,
    }


def _replay_argv(path) -> List[str]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
        argv = doc["argv"]
    except OSError as exc:
        raise DataError(f"cannot read manifest: {exc}") from None
    except (json.JSONDecodeError, KeyError, TypeError):
        raise DataError(f"{path} is not a run manifest") from None
    if not argv or argv[0] == "replay":
        raise DataError("manifest records no replayable command")
    return list(argv)


def run_cli(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help / --version
        return int(exc.code or 0)

    if args.command == "replay":
        try:
            recorded = _replay_argv(args.recorded)
        except DataError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        if args.manifest:
            recorded += ["--manifest", args.manifest]
        return run_cli(recorded)

    args.outputs = []
    code, error = EXIT_OK, None
    try:
        args.func(args)
    except UsageError as exc:
        code, error = EXIT_USAGE, {"category": "usage", "message": str(exc)}
    except (DataError, EmptyDataset, ImageFormatError, CorruptImageError, WeightFormatError,
            DegenerateDenominator, FileNotFoundError) as exc:
        code, error = EXIT_DATA, {"category": "data", "type": type(exc).__name__,
                                  "message": str(exc)}
    except Exception as exc:  # noqa: BLE001 - recorded, then reported as internal
        code, error = EXIT_INTERNAL, {"category": "internal", "type": type(exc).__name__,
                                      "message": str(exc)}
    if error:
        print(f"error: {error['message']}", file=sys.stderr)
    mpath = _manifest_path(args)
    if mpath:
        try:
            write_json(_manifest(args, argv, "ok" if code == EXIT_OK else "error", error), mpath)
        except OSError as exc:
            print(f"error: cannot write manifest {mpath}: {exc}", file=sys.stderr)
            return code or EXIT_DATA
    return code


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
