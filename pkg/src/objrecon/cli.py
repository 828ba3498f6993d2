"""Command-line interface: ``objrecon {gen,fit,library-build,eval,export}``.

Configuration precedence is command-line flags, then the ``--config`` file, then
built-in defaults.  ``OBJRECON_THREADS`` caps the numeric library thread pools.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("objrecon")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


class CliError(Exception):
    """User-facing failure; printed without a traceback."""


def apply_thread_cap(env=os.environ) -> int | None:
    raw = env.get("OBJRECON_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"OBJRECON_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"OBJRECON_THREADS must be a positive integer, got {raw!r}")
    for var in _THREAD_VARS:
        env[var] = str(n)
    return n


def _parse_value(text: str):
    import yaml

    return yaml.safe_load(text)


def parse_overrides(pairs) -> dict:
    """``["objmap.steps_per_frame=2", ...]`` -> nested dict."""
    out: dict = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise CliError(f"--set expects key=value, got {pair!r}")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    return out


def load_config(args):
    from .config import ConfigError, RunConfig

    cfg = RunConfig()
    try:
        if getattr(args, "config", None):
            path = Path(args.config)
            if not path.is_file():
                raise CliError(f"{path}: config file not found")
            cfg = RunConfig.load(path, cfg)
        cli = parse_overrides(getattr(args, "set", None))
        if getattr(args, "seed", None) is not None:
            cli["seed"] = args.seed
        cfg = RunConfig.from_dict(cli, cfg)
    except ConfigError as exc:
        raise CliError(f"config error: {exc}") from exc
    return cfg


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{p}: {what} directory not found")
    return p


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    import yaml

    from .io import write_dataset
    from .meshmetrics import write_ply
    from .synthdata import SceneSpec

    path = Path(args.scene)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise CliError(f"{path}: cannot parse scene: {exc}") from exc
    if args.seed is not None:
        data = dict(data or {}, seed=args.seed)
    try:
        spec = SceneSpec.from_dict(data)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from exc
    out = Path(args.out)
    frames = spec.render()
    write_dataset(out, frames, {p.instance_id: p.category for p in spec.primitives})
    gt = out / "gt"
    gt.mkdir(exist_ok=True)
    for iid, mesh in spec.ground_truth(args.gt_resolution).items():
        write_ply(gt / f"object_{iid:03d}.ply", mesh)
    print(f"wrote {len(frames)} frames and {len(spec.ground_truth(args.gt_resolution))} ground-truth meshes to {out}")
    return 0


def cmd_fit(args) -> int:
    from .io import Dataset, FormatError, save_model, write_poses
    from .library import Library
    from .meshmetrics import extract_mesh, write_ply
    from .objmap import run_sequence

    cfg = load_config(args)
    try:
        ds = Dataset(_require_dir(args.dataset, "dataset"))
        library = Library.load(args.library) if args.library else None
    except FormatError as exc:
        raise CliError(str(exc)) from exc
    frames = iter(ds)
    if args.max_frames:
        frames = (f for i, f in enumerate(ds) if i < args.max_frames)
    try:
        scene = run_sequence(frames, cfg, library)
    except RuntimeError as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out)
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "meshes").mkdir(exist_ok=True)
    (out / "events.jsonl").write_text(scene.event_log())
    losses = {}
    for iid, obj in sorted(scene.objects.items()):
        stem = f"object_{iid:03d}"
        save_model(out / "models" / f"{stem}.objrecon", obj.model)
        write_poses(out / "models" / f"{stem}.poses.txt",
                    {kf.index: kf.frame.pose for kf in obj.keyframes})
        (out / "models" / f"{stem}.meta.txt").write_text(
            f"category {'none' if obj.category is None else obj.category}\n")
        write_ply(out / "meshes" / f"{stem}.ply", extract_mesh(obj.model, cfg.mesh.resolution_m))
        rep = obj.last_loss
        losses[iid] = None if rep is None else {"total": rep.total, "depth": rep.depth, "color": rep.color,
                                                "mask": rep.mask}
    (out / "intrinsics.txt").write_text((ds.root / "intrinsics.txt").read_text())
    (out / "losses.json").write_text(json.dumps(losses, indent=1, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"fitted {len(scene.objects)} objects over {scene.last_index + 1} frames; outputs in {out}")
    return 0


def _entries_from_models(models_dir: Path, intrinsics, cfg):
    from .io import FormatError, load_model, read_poses
    from .library import build_entry

    found = sorted(models_dir.glob("object_*.objrecon"))
    if not found:
        raise CliError(f"{models_dir}: no object_*.objrecon archives")
    for path in found:
        stem = path.name[: -len(".objrecon")]
        try:
            model = load_model(path)
            poses = read_poses(models_dir / f"{stem}.poses.txt")
        except (FormatError, OSError) as exc:
            raise CliError(str(exc)) from exc
        meta = models_dir / f"{stem}.meta.txt"
        category = None
        if meta.is_file():
            val = meta.read_text().split()[-1]
            category = None if val == "none" else int(val)
        try:
            yield build_entry(stem, model, [poses[i] for i in sorted(poses)], intrinsics, category,
                              voxel=cfg.objmap.voxel, render_scale=cfg.rays.synth_scale)
        except ValueError as exc:
            raise CliError(f"{path}: cannot build entry: {exc}") from exc


def cmd_library_build(args) -> int:
    import tempfile

    from .io import FormatError, read_intrinsics
    from .library import Library

    cfg = load_config(args)
    src = _require_dir(args.input, "input")
    if args.source == "dataset":
        tmp = Path(tempfile.mkdtemp(prefix="objrecon-fit-"))
        fit_args = argparse.Namespace(dataset=str(src), config=args.config, set=args.set, seed=args.seed,
                                      library=None, out=str(tmp), max_frames=None)
        cmd_fit(fit_args)
        src = tmp
    try:
        K = read_intrinsics(src / "intrinsics.txt")
    except (FormatError, OSError) as exc:
        raise CliError(f"{src / 'intrinsics.txt'}: {exc}") from exc
    lib = Library(list(_entries_from_models(src / "models", K, cfg)))
    lib.save(args.out)
    print(f"library with {len(lib)} entries written to {args.out}")
    return 0


def _mesh_dir(path: Path) -> dict:
    import re

    from .meshmetrics import read_ply

    out = {}
    for p in sorted(path.glob("*.ply")):
        m = re.search(r"(\d+)\.ply$", p.name)
        if m:
            try:
                out[int(m.group(1))] = read_ply(p)
            except (OSError, ValueError) as exc:
                raise CliError(f"{p}: {exc}") from exc
    if not out:
        raise CliError(f"{path}: no *.ply meshes")
    return out


def cmd_eval(args) -> int:
    from .io import Dataset, FormatError
    from .meshmetrics import cull_unseen, evaluate

    try:
        thresholds = tuple(float(t) for t in args.thresholds.split(","))
    except ValueError:
        raise CliError(f"--thresholds: cannot parse {args.thresholds!r}") from None
    pred = _mesh_dir(_require_dir(args.pred, "prediction"))
    gt = _mesh_dir(_require_dir(args.gt, "ground-truth"))
    frames = None
    if args.seen_only:
        if not args.frames:
            raise CliError("--seen-only requires --frames")
        try:
            frames = list(Dataset(args.frames))
        except FormatError as exc:
            raise CliError(str(exc)) from exc
    lines = []
    for iid in sorted(gt):
        name = f"object_{iid:03d}"
        if iid not in pred or len(pred[iid]) == 0:
            lines.append(f"{name} missing")
            continue
        g = gt[iid]
        if frames is not None:
            g = cull_unseen(g, frames, args.tau)
        lines.extend(evaluate(pred[iid], g, thresholds).lines(name))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_export(args) -> int:
    from .io import FormatError, load_model
    from .meshmetrics import extract_mesh, write_ply

    try:
        model = load_model(args.model)
    except (FormatError, OSError) as exc:
        raise CliError(f"{args.model}: {exc}") from exc
    if args.resolution <= 0:
        raise CliError("--resolution must be positive")
    mesh = extract_mesh(model, args.resolution)
    write_ply(args.out, mesh, binary=not args.ascii)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles -> {args.out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="objrecon", description=__doc__.splitlines()[0])
    ap.add_argument("--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    def config_flags(p):
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key, e.g. objmap.steps_per_frame=2 (repeatable)")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")

    p = sub.add_parser("gen", help="render a synthetic dataset from a scene spec")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--gt-resolution", type=float, default=0.002)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit", help="reconstruct every object of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--library")
    p.add_argument("--out", required=True)
    p.add_argument("--max-frames", type=int)
    config_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("library-build", help="build a library from fitted models or a dataset")
    p.add_argument("--from", dest="source", choices=("dataset", "models"), required=True)
    p.add_argument("--input", required=True, help="dataset directory or fit output directory")
    p.add_argument("--out", required=True)
    config_flags(p)
    p.set_defaults(func=cmd_library_build)

    p = sub.add_parser("eval", help="accuracy / completion / completion ratio")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--seen-only", action="store_true")
    p.add_argument("--frames")
    p.add_argument("--tau", type=float, default=0.02)
    p.add_argument("--thresholds", default="0.01,0.005")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="extract a mesh from a model archive")
    p.add_argument("--model", required=True)
    p.add_argument("--resolution", type=float, default=0.005)
    p.add_argument("--out", required=True)
    p.add_argument("--ascii", action="store_true")
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        apply_thread_cap()
        return args.func(args)
    except CliError as exc:
        print(f"objrecon {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
