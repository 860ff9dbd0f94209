"""``dynflow`` command line: synth, train, render, eval and study subcommands.

Every numeric knob lives in a nested JSON config; ``--config`` loads one and
``--set section.key=value`` overrides single entries.  Exit codes: 0 success,
1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import subprocess
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import torch

from . import eval as ev
from .data import SynthConfig, generate_synthetic_sequence, load_dataset, orbit_camera, save_dataset
from .data.dataset import DatasetError
from .fields import PRESETS, CheckpointError, FieldConfig
from .rendering import load_png, render_image, save_png
from .training import SCHEDULES, DivergenceError, TrainSchedule, load_checkpoint, train

log = logging.getLogger("dynflow")

_SYNTH_KEYS = [f.name for f in fields(SynthConfig) if f.name != "parts"]

DEFAULTS = {
    "seed": 0,
    "synth": {k: getattr(SynthConfig(), k) for k in _SYNTH_KEYS},
    "field": {"preset": "desk"},
    "schedule": {"preset": "desk"},
    "eval": {"patch": 64, "kappa": 0.1, "n_coarse": 64, "n_fine": 64},
    "render": {"camera": "train", "views": 8, "frame": 0, "time": None, "elevation": 0.0,
               "distance": None, "background": [1.0, 1.0, 1.0], "n_coarse": 64, "n_fine": 64},
    "study": {"translations": [10, 20, 30, 40, 50], "rotations": [5, 10, 15, 20, 25, 30],
              "frame": 0, "size": 256, "direction_seed": 0},
}
# sections whose keys are validated against a dataclass instead of DEFAULTS
_OPEN_SECTIONS = {"field": FieldConfig, "schedule": TrainSchedule}


class ConfigError(ValueError):
    pass


def _check_keys(cfg: dict) -> None:
    for key, val in cfg.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key '{key}'")
        if not isinstance(DEFAULTS[key], dict):
            continue
        if not isinstance(val, dict):
            raise ConfigError(f"section '{key}' must be an object")
        if key in _OPEN_SECTIONS:
            allowed = {f.name for f in fields(_OPEN_SECTIONS[key])} | {"preset"}
        else:
            allowed = set(DEFAULTS[key])
        for sub in val:
            if sub not in allowed:
                raise ConfigError(f"unknown config key '{key}.{sub}'")


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(path=None, overrides=(), seed=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    cfg["synth"] = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg["synth"].items()}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        _check_keys(user)
        cfg = _merge(cfg, user)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override '{item}' is not key=value")
        parts = key.split(".")
        patch: dict = {}
        node = patch
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
        _check_keys(patch)
        cfg = _merge(cfg, patch)
    if seed is not None:
        cfg["seed"] = seed
    # builds the dataclasses once so bad values fail before any work starts
    synth_config(cfg), field_config(cfg), schedule_config(cfg)
    return cfg


def synth_config(cfg) -> SynthConfig:
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg["synth"].items()}
    try:
        return SynthConfig(**vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from exc


def _preset(section: dict, presets: dict, kind: str):
    name = section.get("preset", "desk")
    if name not in presets:
        raise ConfigError(f"unknown {kind} preset '{name}' (choose from {sorted(presets)})")
    return presets[name], {k: v for k, v in section.items() if k != "preset"}


def field_config(cfg) -> FieldConfig:
    base, over = _preset(cfg["field"], PRESETS, "field")
    try:
        return replace(base, **over)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field: {exc}") from exc


def schedule_config(cfg) -> TrainSchedule:
    base, over = _preset(cfg["schedule"], SCHEDULES, "schedule")
    over = {k: tuple(v) if isinstance(v, list) else v for k, v in over.items()}
    try:
        return replace(base, seed=cfg["seed"], **over)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"schedule: {exc}") from exc


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                             timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() or "unknown"


def write_snapshot(out: Path, cfg: dict, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    (out / "provenance.json").write_text(json.dumps({"command": command, "code_version": git_describe(),
                                                     "torch": torch.__version__,
                                                     "numpy": np.__version__}, indent=2))


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args, cfg):
    ds = generate_synthetic_sequence(synth_config(cfg), cfg["seed"])
    out = Path(args.out)
    save_dataset(ds, out)
    write_snapshot(out, cfg, "synth")
    print(f"wrote {ds.frame_count} frames to {out}")


def cmd_train(args, cfg):
    schedule = schedule_config(cfg)
    fcfg = field_config(cfg)
    if args.dry_run:
        print(json.dumps({"schedule": schedule.to_dict(), "field": cfg["field"]}, indent=2))
        return
    if args.data is None:
        raise ConfigError("train needs --data")
    ds = load_dataset(args.data)
    out = Path(args.out)
    state = None
    if args.resume:
        state, saved = load_checkpoint(args.resume)
        if saved is not None and saved != schedule:
            log.warning("resuming with a schedule that differs from the checkpoint's")
    write_snapshot(out, cfg, "train")
    metrics_path = out / "metrics.jsonl"
    mode = "a" if args.resume else "w"
    with open(metrics_path, mode) as fh:
        def callback(m):
            fh.write(json.dumps(m) + "\n")
            fh.flush()
            log.info("%s", m)
        state = train(ds, schedule, fcfg, callback=callback, state=state, checkpoint_dir=out)
    print(f"finished at iteration {state.iteration}; checkpoint {out / 'final.npz'}")


def _load_model(path):
    state, _ = load_checkpoint(path)
    state.model.eval()
    return state.model


def cmd_render(args, cfg):
    rc = cfg["render"]
    ds = load_dataset(args.data)
    model = _load_model(args.checkpoint)
    frame = int(rc["frame"])
    if not 0 <= frame < ds.frame_count:
        raise ConfigError(f"frame {frame} outside 0..{ds.frame_count - 1}")
    alpha = float(model.config.point_bands)
    out = Path(args.out)
    write_snapshot(out, cfg, "render")
    if rc["camera"] == "train":
        views = [("train", ds.camera, ds.background)]
    elif rc["camera"] == "orbit":
        sc = synth_config(cfg)
        if rc["distance"] is not None:
            sc = replace(sc, camera_distance=float(rc["distance"]))
        k = int(rc["views"])
        if k < 1:
            raise ConfigError("render.views must be positive")
        views = [(f"orbit_{j:03d}", orbit_camera(sc, 360.0 * j / k, float(rc["elevation"])),
                  np.asarray(rc["background"], dtype=np.float64)) for j in range(k)]
    else:
        raise ConfigError("render.camera must be 'train' or 'orbit'")
    for name, cam, bg in views:
        img, _ = render_image(model, cam, frame, bg, ds.aabb(frame), alpha,
                              n_coarse=int(rc["n_coarse"]), n_fine=int(rc["n_fine"]), seed=cfg["seed"],
                              time=rc["time"])
        save_png(img, out / f"{name}_f{frame:03d}.png")
    print(f"wrote {len(views)} image(s) to {out}")


def cmd_eval(args, cfg):
    ec = cfg["eval"]
    ds = load_dataset(args.data)
    if ds.eval is None:
        raise ev.EvalError(f"dataset {args.data} has no eval split")
    if args.oracle:
        pred = ev.OraclePredictor(ds)
    else:
        if args.checkpoint is None:
            raise ConfigError("eval needs --checkpoint or --oracle")
        pred = ev.ModelPredictor(_load_model(args.checkpoint), ds, n_coarse=int(ec["n_coarse"]),
                                 n_fine=int(ec["n_fine"]), seed=cfg["seed"])
    report = ev.evaluate_novel_views(pred, ds, patch=int(ec["patch"]), kappa=float(ec["kappa"]),
                                     keep_images=True)
    out = Path(args.out)
    write_snapshot(out, cfg, "eval")
    ev.write_report(report, out / "report.json")
    ev.contact_sheet(report.images, out / "contact_sheet.png")
    print(json.dumps(report.means))


def cmd_study(args, cfg):
    sc = cfg["study"]
    mask = background = None
    if args.image is not None:
        image = load_png(args.image)[..., :3]
    else:
        size = int(sc["size"])
        base = synth_config(cfg)
        scale = size / base.width
        syn = replace(base, width=size, height=size, focal=base.focal * scale, frame_count=2,
                      eval_azimuths_deg=())
        ds = load_dataset(args.data) if args.data else generate_synthetic_sequence(syn, cfg["seed"])
        frame = int(sc["frame"])
        image, mask, background = ds.images[frame], ds.masks[frame], ds.background
    rows = ev.misalignment_study(image, sc["translations"], sc["rotations"], mask=mask,
                                 background=background, seed=int(sc["direction_seed"]))
    table = ev.format_study(rows)
    if args.out:
        out = Path(args.out)
        write_snapshot(out, cfg, "study")
        (out / "study.txt").write_text(table + "\n")
        (out / "study.json").write_text(json.dumps([r.__dict__ for r in rows], indent=2))
    print(table)


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config entry, e.g. schedule.n_init=500")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="dynflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.set_defaults(func=cmd_synth, need_out=True)

    p = sub.add_parser("train", parents=[common], help="run the staged optimisation")
    p.add_argument("--data")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--dry-run", action="store_true", help="validate the config and stop")
    p.set_defaults(func=cmd_train, need_out=True)

    p = sub.add_parser("render", parents=[common], help="render views of a trained model")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_render, need_out=True)

    p = sub.add_parser("eval", parents=[common], help="score held-out novel views")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="score the ground-truth renderer")
    p.set_defaults(func=cmd_eval, need_out=True)

    p = sub.add_parser("study", parents=[common], help="misalignment sensitivity table")
    p.add_argument("--image", help="PNG to study instead of a synthetic frame")
    p.add_argument("--data", help="dataset whose frame to study")
    p.set_defaults(func=cmd_study, need_out=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.need_out and not args.out and not getattr(args, "dry_run", False):
            raise ConfigError(f"{args.command} needs --out")
        cfg = resolve_config(args.config, args.set, args.seed)
    except ConfigError as exc:
        print(f"dynflow: config error: {exc}", file=sys.stderr)
        return 1
    try:
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"dynflow: config error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, ev.EvalError, DivergenceError, OSError, ValueError) as exc:
        print(f"dynflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
