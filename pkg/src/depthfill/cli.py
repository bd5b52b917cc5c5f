"""Command line interface.

Subcommands cover the whole pipeline: synthesize data, train, complete a
single frame, refine an existing depth map, score against ground truth,
and verify gradients.  Every command that writes artifacts also writes a
``run_manifest.json`` recording the resolved configuration and a content
hash of each input, so runs can be compared and reproduced exactly; the
manifest deliberately contains no timestamps.

Exit codes: 0 success, 1 usage or configuration, 2 data or file format,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import (DepthMap, ManifestEntry, decode_depth_png, decode_image_png,
                   encode_depth_png_with_report, encode_image_png,
                   load_manifest, synth_scene, write_manifest)
from .errors import ConfigError, DataError, NumericError, UsageError
from .gradcheck import run_suite
from .train import (CompletionModel, ModelConfig, TrainConfig, evaluate,
                    load_model, save_model, train, write_metrics_csv)
from . import tensor as T


# ---------------------------------------------------------------------------
# depth rendering

# Dark-purple-to-yellow ramp with strictly increasing luminance, so previews
# stay readable in grayscale.  Linear interpolation between anchors keeps
# the luminance monotone since luminance is linear in RGB.
_RAMP = np.array([
    (68, 1, 84), (72, 40, 120), (62, 74, 137), (49, 104, 142),
    (38, 130, 142), (31, 158, 137), (53, 183, 121), (109, 205, 89),
    (180, 222, 44), (226, 228, 40), (253, 231, 37),
], dtype=np.float64)


def colormap(t: np.ndarray) -> np.ndarray:
    """[0,1] scalars -> uint8 RGB via the embedded ramp."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    pos = t * (len(_RAMP) - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, len(_RAMP) - 1)
    frac = (pos - lo)[..., None]
    rgb = _RAMP[lo] * (1.0 - frac) + _RAMP[hi] * frac
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def render_depth_preview(depth: DepthMap, d_max: float, d_min: float = 0.0) -> bytes:
    """8-bit RGB PNG of a depth map; invalid pixels are black."""
    if d_max <= d_min:
        raise ConfigError(f"degenerate preview range [{d_min}, {d_max}]")
    rgb = colormap((depth.meters - d_min) / (d_max - d_min))
    rgb[~depth.valid] = 0
    return encode_image_png(rgb.transpose(2, 0, 1).astype(np.float64) / 255.0)


# ---------------------------------------------------------------------------
# config plumbing

def blob_sha1(data: bytes) -> str:
    """Content hash in git blob form, prefixed for clarity."""
    h = hashlib.sha1(b"blob %d\x00" % len(data))
    h.update(data)
    return "sha1:" + h.hexdigest()


def _read_bytes(path: Path | str) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"no such file: {p}")
    return p.read_bytes()


def _deep_merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        here = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{here}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{here}' needs a table, got {value!r}")
            _deep_merge(base[key], value, here + ".")
        else:
            base[key] = value


def _apply_set(base: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"--set needs key=value, got '{assignment}'")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw  # bare strings are allowed unquoted
    node = base
    *parents, leaf = dotted.split(".")
    for part in parents:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key '{dotted}'")
        node = node[part]
    if leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"unknown config key '{dotted}'")
    current = node[leaf]
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{dotted}' expects true/false, got '{raw}'")
    elif isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{dotted}' expects an integer, got '{raw}'")
    elif isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{dotted}' expects a number, got '{raw}'")
        value = float(value)
    elif isinstance(current, list) != isinstance(value, list):
        raise ConfigError(f"'{dotted}' expects {type(current).__name__} "
                          f"values, got '{raw}'")
    node[leaf] = value


# Defaults are desk scale; the published training recipe stays available
# as a named profile (30 epochs, batch 16, 20-step inference sampling).
PROFILES: dict[str, dict] = {
    "kitti-paper": {
        "train": {"epochs": 30, "batch_size": 16, "lr0": 1e-3,
                  "weight_decay": 0.01, "sample_steps": 20},
    },
}


def resolve_config(config_path: str | None, sets: list[str],
                   profile: str | None = None) -> dict:
    """Defaults, then a named profile, then the JSON file, then --set."""
    cfg = {"model": asdict(ModelConfig()), "train": asdict(TrainConfig())}
    cfg["model"]["refine"]["kernels"] = list(cfg["model"]["refine"]["kernels"])
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile '{profile}', "
                              f"have: {', '.join(sorted(PROFILES))}")
        _deep_merge(cfg, PROFILES[profile])
    if config_path is not None:
        try:
            loaded = json.loads(_read_bytes(config_path).decode())
        except ValueError as e:
            raise ConfigError(f"{config_path}: invalid JSON: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
        _deep_merge(cfg, loaded)
    for assignment in sets:
        _apply_set(cfg, assignment)
    return cfg


def write_run_manifest(out_dir: Path, command: str, config: dict,
                       inputs: dict[str, str], outputs: list[str]) -> None:
    doc = {"command": command, "config": config,
           "inputs": inputs, "outputs": sorted(outputs)}
    (out_dir / "run_manifest.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _hash_manifest_tree(manifest_path: Path) -> dict[str, str]:
    """Hash the manifest file and every data file it references."""
    inputs = {str(manifest_path): blob_sha1(_read_bytes(manifest_path))}
    man = load_manifest(manifest_path)
    for entry in man.entries:
        for rel in (entry.image_path, entry.sparse_path, entry.gt_path):
            p = man.root / rel
            inputs[str(p)] = blob_sha1(_read_bytes(p))
    return inputs


# ---------------------------------------------------------------------------
# subcommands

def _cmd_synth(args) -> int:
    out = _out_dir(args)
    try:
        h, w = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must be HxW, got '{args.size}'") from None
    entries = []
    outputs = []
    for i in range(args.count):
        scene = synth_scene(args.seed + i, size=(h, w), sparse_pattern=args.pattern)
        names = {
            "image": f"{scene.id}_image.png",
            "sparse": f"{scene.id}_sparse.png",
            "gt": f"{scene.id}_gt.png",
        }
        (out / names["image"]).write_bytes(encode_image_png(scene.image))
        for key, dm in (("sparse", scene.sparse), ("gt", scene.dense_gt)):
            data, report = encode_depth_png_with_report(dm)
            if report.clamped_high or report.collapsed_invalid:
                raise NumericError(f"{scene.id}: depth not representable in 16 bits")
            (out / names[key]).write_bytes(data)
        if args.previews:
            names["preview"] = f"{scene.id}_preview.png"
            (out / names["preview"]).write_bytes(
                render_depth_preview(scene.dense_gt, d_max=10.0))
        entries.append(ManifestEntry(scene.id, names["image"],
                                     names["sparse"], names["gt"]))
        outputs.extend(names.values())
    write_manifest(out / "manifest.tsv", entries)
    outputs.append("manifest.tsv")
    config = {"count": args.count, "size": [h, w], "seed": args.seed,
              "pattern": args.pattern, "previews": args.previews}
    write_run_manifest(out, "synth", config, {}, outputs)
    print(f"wrote {args.count} scenes ({h}x{w}) to {out}")
    return 0


def _cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = resolve_config(args.config, args.set or [], profile=args.profile)
    model_cfg = ModelConfig.from_dict(cfg["model"])
    train_cfg = TrainConfig(**cfg["train"])
    manifest = load_manifest(args.data)
    model = CompletionModel(model_cfg, seed=train_cfg.seed)

    def log(st):
        mp = "-" if st.map_loss is None else f"{st.map_loss:.4f}"
        print(f"epoch {st.epoch:3d}  diff={st.diff_loss:.4f}  map={mp}  "
              f"lr={st.lr:.2e}  {st.seconds:.1f}s")

    history = train(model, manifest, train_cfg,
                    checkpoint_dir=out / "checkpoints", log=log)
    save_model(out / "model.ckpt", model,
               extra={"epochs": train_cfg.epochs, "train_config": cfg["train"]})
    # wall-clock seconds stay in the live log only; artifacts must not
    # depend on machine speed
    (out / "history.json").write_text(json.dumps(
        [{k: v for k, v in asdict(st).items() if k != "seconds"}
         for st in history], indent=2) + "\n")
    inputs = _hash_manifest_tree(Path(args.data))
    if args.config:
        inputs[args.config] = blob_sha1(_read_bytes(args.config))
    outputs = ["model.ckpt", "history.json"] + \
        [f"checkpoints/epoch{st.epoch:03d}.ckpt" for st in history]
    write_run_manifest(out, "train", cfg, inputs, outputs)
    print(f"trained {train_cfg.epochs} epochs on {len(manifest)} samples -> {out}")
    return 0


def _load_model_arg(path: str) -> CompletionModel:
    if not Path(path).is_file():
        raise DataError(f"no such checkpoint: {path}")
    model, _ = load_model(path)
    return model


def _cmd_complete(args) -> int:
    out = _out_dir(args)
    model = _load_model_arg(args.model)
    image = decode_image_png(_read_bytes(args.image))
    sparse = decode_depth_png(_read_bytes(args.sparse))
    dense = model.complete(image, sparse, steps=args.steps, eta=args.eta,
                           seed=args.seed, use_refiner=not args.no_refine)
    data, report = encode_depth_png_with_report(dense)
    if report.collapsed_invalid:
        print(f"warning: {report.collapsed_invalid} predicted pixels rounded "
              f"to zero and will decode as invalid", file=sys.stderr)
    (out / "depth.png").write_bytes(data)
    (out / "preview.png").write_bytes(render_depth_preview(dense, model.cfg.d_max))
    inputs = {p: blob_sha1(_read_bytes(p)) for p in (args.model, args.image, args.sparse)}
    config = {"steps": args.steps, "eta": args.eta, "seed": args.seed,
              "refine": not args.no_refine}
    write_run_manifest(out, "complete", config, inputs, ["depth.png", "preview.png"])
    print(f"completed {sparse.height}x{sparse.width} frame "
          f"({sparse.n_valid} measured px) -> {out / 'depth.png'}")
    return 0


def _cmd_refine(args) -> int:
    out = _out_dir(args)
    model = _load_model_arg(args.model)
    image = decode_image_png(_read_bytes(args.image))
    sparse = decode_depth_png(_read_bytes(args.sparse))
    initial = decode_depth_png(_read_bytes(args.depth))
    with T.no_grad():
        cond = model.guidance(image, sparse).guidance
        refined = model.refiner.refine(initial, cond, sparse)
    data, report = encode_depth_png_with_report(refined)
    if report.collapsed_invalid:
        print(f"warning: {report.collapsed_invalid} refined pixels rounded "
              f"to zero and will decode as invalid", file=sys.stderr)
    (out / "refined.png").write_bytes(data)
    (out / "preview.png").write_bytes(render_depth_preview(refined, model.cfg.d_max))
    inputs = {p: blob_sha1(_read_bytes(p))
              for p in (args.model, args.image, args.sparse, args.depth)}
    write_run_manifest(out, "refine", {}, inputs, ["refined.png", "preview.png"])
    print(f"refined {initial.height}x{initial.width} map -> {out / 'refined.png'}")
    return 0


def _cmd_evaluate(args) -> int:
    out = _out_dir(args)
    model = _load_model_arg(args.model)
    manifest = load_manifest(args.data)
    results, overall = evaluate(model, manifest, steps=args.steps, eta=args.eta,
                                seed=args.seed, use_refiner=not args.no_refine)
    write_metrics_csv(out / "metrics.csv", results, overall)
    inputs = _hash_manifest_tree(Path(args.data))
    inputs[args.model] = blob_sha1(_read_bytes(args.model))
    config = {"steps": args.steps, "eta": args.eta, "seed": args.seed,
              "refine": not args.no_refine}
    write_run_manifest(out, "evaluate", config, inputs, ["metrics.csv"])
    print(f"{len(results)} samples: rmse={overall.rmse_mm:.1f}mm "
          f"mae={overall.mae_mm:.1f}mm irmse={overall.irmse_per_km:.2f}/km "
          f"imae={overall.imae_per_km:.2f}/km")
    return 0


def _cmd_gradcheck(args) -> int:
    reports = run_suite(tolerance=args.tolerance, seed=args.seed)
    for r in reports:
        print(r)
    failed = [r for r in reports if not r.passed]
    if failed:
        raise NumericError(f"{len(failed)} of {len(reports)} gradient checks failed")
    print(f"all {len(reports)} gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we own exit codes
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="depthfill",
                description="Depth completion from sparse measurements and color.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", parents=[], help="generate synthetic scenes",
                        add_help=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--size", default="64x64", help="HxW in pixels")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--pattern", default="uniform(0.05)",
                    help="sparsity: uniform(p) or scanlines(n)")
    sp.add_argument("--previews", action="store_true",
                    help="also render color previews of ground truth")
    sp.set_defaults(func=_cmd_synth)

    tp = sub.add_parser("train", help="train a model on a manifest")
    tp.add_argument("--data", required=True, help="manifest.tsv path")
    tp.add_argument("--out", required=True)
    tp.add_argument("--config", help="JSON config file")
    tp.add_argument("--profile", help="named base config, e.g. kitti-paper")
    tp.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override a config value, e.g. train.epochs=3")
    tp.set_defaults(func=_cmd_train)

    cp = sub.add_parser("complete", help="densify one frame")
    cp.add_argument("--model", required=True, help="checkpoint path")
    cp.add_argument("--image", required=True, help="RGB PNG")
    cp.add_argument("--sparse", required=True, help="16-bit depth PNG")
    cp.add_argument("--out", required=True)
    cp.add_argument("--steps", type=int, default=20)
    cp.add_argument("--eta", type=float, default=0.0)
    cp.add_argument("--seed", type=int, default=0)
    cp.add_argument("--no-refine", action="store_true",
                    help="skip the propagation refiner")
    cp.set_defaults(func=_cmd_complete)

    rp = sub.add_parser("refine", help="refine an existing dense map")
    rp.add_argument("--model", required=True)
    rp.add_argument("--image", required=True)
    rp.add_argument("--sparse", required=True)
    rp.add_argument("--depth", required=True, help="initial dense depth PNG")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=_cmd_refine)

    ep = sub.add_parser("evaluate", help="score a model against ground truth")
    ep.add_argument("--model", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--out", required=True)
    ep.add_argument("--steps", type=int, default=20)
    ep.add_argument("--eta", type=float, default=0.0)
    ep.add_argument("--seed", type=int, default=0)
    ep.add_argument("--no-refine", action="store_true")
    ep.set_defaults(func=_cmd_evaluate)

    gp = sub.add_parser("gradcheck", help="verify gradients by finite differences")
    gp.add_argument("--tolerance", type=float, default=1e-6)
    gp.add_argument("--seed", type=int, default=0)
    gp.set_defaults(func=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
