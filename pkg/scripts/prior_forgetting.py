#!/usr/bin/env python3
"""Prior reuse and forgetting: a prior fit on one hemisphere, then a session on the other.

    python scripts/prior_forgetting.py [--radius 0.4] [--prior-coverage hemisphere|full]

Three sessions start from the same library entry: without keyframe synthesis,
with synthesis, and with the whole prior frozen. Reports whole-object CR@1cm,
CR@1cm on the prior's hemisphere and accuracy. ``--prior-coverage full`` fits
the prior on a complete orbit instead, as when the library holds full scans.
"""
from __future__ import annotations

import argparse
import time

from objrecon.config import RunConfig
from objrecon.core import Pose
from objrecon.library import build_entry, initialize_from_prior
from objrecon.meshmetrics import accuracy, completion_ratio, extract_mesh
from objrecon.objmap import SceneState, ingest_frame, run_sequence, train_objects
from objrecon.synthdata import (Primitive, TrajectorySpec, default_intrinsics, generate_trajectory,
                                ground_truth_mesh, render_sequence)

MODES = (("no-synthesis", {"synthesize": False}), ("synthesis", {}), ("frozen", {"freeze_grids": True}))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--radius", type=float, default=0.4)
    ap.add_argument("--frames", type=int, default=100, help="frames per session")
    ap.add_argument("--steps", type=int, default=20, help="training steps per frame in the second session")
    ap.add_argument("--rays", type=int, default=1024, help="rays per step in the second session")
    ap.add_argument("--prior-coverage", choices=("hemisphere", "full"), default="hemisphere")
    args = ap.parse_args(argv)

    R = args.radius
    prim = Primitive.at("sphere", (R,), (0, 0, 0), albedo=(0.8, 0.3, 0.2))
    K = default_intrinsics(320, 240)
    gt = ground_truth_mesh(prim, R / 25).vertices
    hem_a = gt[gt[:, 0] > 0]

    def scores(model):
        mesh = extract_mesh(model)
        if not len(mesh):
            return 0.0, 0.0, float("nan")
        return completion_ratio(mesh, gt), completion_ratio(mesh, hem_a), accuracy(mesh, gt)

    def hemisphere(axis):
        spec = TrajectorySpec("hemisphere", radius=10 * R, n_frames=args.frames, axis=axis)
        return render_sequence([prim], generate_trajectory(spec), K)

    if args.prior_coverage == "full":
        spec = TrajectorySpec("orbit", radius=10 * R, n_frames=args.frames, height=5 * R, height_wave=2)
        prior_frames = render_sequence([prim], generate_trajectory(spec), K)
    else:
        prior_frames = hemisphere((1, 0, 0))
    t0 = time.time()
    prior = run_sequence(prior_frames, RunConfig.from_dict({"rays": {"total": 4096}})).objects[1]
    entry = build_entry("prior", prior.model, [kf.frame.pose for kf in prior.keyframes], K)
    print(f"{'mode':<14}{'whole CR':>10}{'hemA CR':>10}{'acc cm':>9}")
    print(f"{'prior':<14}" + "".join(f"{v:>10.2f}" for v in scores(prior.model)[:2])
          + f"{scores(prior.model)[2]:>9.3f}   ({time.time() - t0:.0f}s)")

    session = hemisphere((-1, 0, 0))
    for mode, lib in MODES:
        cfg = RunConfig.from_dict({"library": lib, "rays": {"total": args.rays},
                                   "objmap": {"steps_per_frame": args.steps}})
        state = SceneState(cfg)
        t0 = time.time()
        for f in session:
            if any(e.kind == "ObjectCreated" for e in ingest_frame(state, f)):
                initialize_from_prior(state.objects[1], entry, Pose.identity(), cfg)
            train_objects(state)
        whole, ha, acc = scores(state.objects[1].model)
        print(f"{mode:<14}{whole:>10.2f}{ha:>10.2f}{acc:>9.3f}   ({time.time() - t0:.0f}s)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
