"""Command-line surface.

Subcommands: synth (emit a test bundle pair), optimize (refine a bundle),
render (scene -> PNGs), convert (optimized bundle -> contact-shifted meshes),
evaluate (pred vs gt bundles -> JSON/CSV report), gradcheck (finite-difference
suite). Exit codes: 0 success, 2 validation, 3 numerical, 4 guidance
unreachable.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import bundle as bundle_io
from .errors import GuidanceUnavailableError, NumericalError, ValidationError
from .gradcheck import run_gradcheck
from .guidance import HttpGuidance, MockTargetGuidance, NullGuidance
from .meshes import (
    contact_shift,
    detect_contact_pairs,
    extract_posed_meshes,
    map_pairs_to_vertices,
    match_pairs_one_to_one,
    save_mesh_ply,
    save_obj,
)
from .metrics import REPORT_KEYS, evaluate_sample
from .optimizer import OptimConfig, run_hoi_optimization
from .render import render
from .scene import apply_object_transform, forward_kinematics, pose_human
from .synth import SynthSpec, synth_scene


def _make_guidance(spec: str, loaded):
    if spec == "mock":
        return MockTargetGuidance(loaded.targets.input_image)
    if spec == "null":
        return NullGuidance()
    provider = HttpGuidance(spec)
    provider.health()  # raises GuidanceUnavailableError when the server is down
    return provider


def cmd_synth(args) -> int:
    spec = SynthSpec(
        object_kind=args.object,
        interaction=args.interaction,
        translation_perturbation=args.perturb_translation,
        rotation_perturbation_deg=args.perturb_rotation_deg,
        image_size=args.image_size,
    )
    result = synth_scene(args.seed, spec)
    out = Path(args.out)
    bundle_io.save_scene_bundle(
        out / "perturbed", result.perturbed_scene, result.targets,
        result.human_base_mesh, result.object_mesh, gt_contact=result.gt_contact,
    )
    bundle_io.save_scene_bundle(
        out / "gt", result.gt_scene, result.targets,
        result.human_base_mesh, result.object_mesh, gt_contact=result.gt_contact,
    )
    print(f"wrote bundles {out / 'perturbed'} and {out / 'gt'}")
    return 0


def cmd_optimize(args) -> int:
    loaded = bundle_io.load_scene_bundle(args.bundle)
    if args.config:
        config, weights = bundle_io.load_config(args.config)
    else:
        config, weights = OptimConfig(), None
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    guidance = _make_guidance(args.guidance, loaded)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot_fn = None
    if args.snapshot_every:
        snap_dir = out / "snapshots"
        snap_dir.mkdir(exist_ok=True)

        def snapshot_fn(step, scene):
            img = render(
                [(pose_human(scene.body, scene.human), "human"),
                 (apply_object_transform(scene.object), "object")],
                scene.front_camera,
                scene.background,
            )
            bundle_io.save_png_rgb(img.rgb, snap_dir / f"step_{step + 1:04d}.png")

    optimized, trace = run_hoi_optimization(
        loaded.scene, loaded.targets, guidance, config,
        object_mesh=loaded.object_mesh, weights=weights,
        snapshot_every=args.snapshot_every, snapshot_fn=snapshot_fn,
    )
    bundle_io.save_scene_bundle(
        out / "bundle", optimized, loaded.targets,
        loaded.human_base_mesh, loaded.object_mesh, gt_contact=loaded.gt_contact,
    )
    trace.to_csv(out / "trace.csv")
    if trace.events:
        (out / "events.log").write_text("\n".join(trace.events) + "\n")
    print(f"optimized bundle written to {out / 'bundle'}; trace at {out / 'trace.csv'}")
    print(f"final loss {trace.rows[-1].total:.6f} (recon {trace.rows[-1].recon:.6f}, "
          f"contact {trace.rows[-1].contact:.6f}, collision {trace.rows[-1].collision:.6f})")
    return 0


def cmd_render(args) -> int:
    loaded = bundle_io.load_scene_bundle(args.bundle)
    scene = loaded.scene
    cam = scene.front_camera
    if args.view != "front":
        try:
            r, el, az = (float(x) for x in args.view.split(","))
        except ValueError:
            raise ValidationError(
                f"--view must be 'front' or 'r,elev_deg,azim_deg', got {args.view!r}"
            ) from None
        from .camera import SphericalSampler, sample_viewpoint

        sampler = SphericalSampler((0, 0, 0), (r, r), (el, el), (az, az))
        cam, _ = sample_viewpoint(
            sampler, np.random.default_rng(0), width=cam.width, height=cam.height, focal=cam.fx
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    img = render(
        [(pose_human(scene.body, scene.human), "human"),
         (apply_object_transform(scene.object), "object")],
        cam,
        scene.background,
    )
    bundle_io.save_png_rgb(img.rgb, out / "rgb.png")
    bundle_io.save_png_alpha16(img.alpha_human, out / "alpha_human.png")
    bundle_io.save_png_alpha16(img.alpha_object, out / "alpha_object.png")
    bundle_io.save_png_depth16(img.depth, out / "depth.png")
    print(f"wrote rgb/alpha/depth PNGs to {out}")
    return 0


def _converted_meshes(loaded, threshold: float):
    scene = loaded.scene
    human_mesh, object_mesh = extract_posed_meshes(scene, loaded.human_base_mesh, loaded.object_mesh)
    human_posed = pose_human(scene.body, scene.human)
    object_posed = apply_object_transform(scene.object)
    pairs = detect_contact_pairs(human_posed, object_posed, threshold=threshold)
    # one-to-one at the vertex level: several splats can share a base vertex
    vertex_pairs = [(h, o) for h, o, _ in match_pairs_one_to_one(map_pairs_to_vertices(pairs, scene.body))]
    shifted = contact_shift(human_mesh, object_mesh, vertex_pairs)
    return human_mesh, shifted, vertex_pairs


def cmd_convert(args) -> int:
    loaded = bundle_io.load_scene_bundle(args.bundle)
    human_mesh, shifted, pairs = _converted_meshes(loaded, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(human_mesh, out / "human.obj")
    save_obj(shifted, out / "object.obj")
    save_mesh_ply(human_mesh, out / "human.ply")
    save_mesh_ply(shifted, out / "object.ply")
    with open(out / "contact_pairs.json", "w") as fh:
        json.dump({"vertex_pairs": [[int(h), int(o)] for h, o in pairs]}, fh)
    print(f"wrote converted meshes to {out} ({len(pairs)} contact pairs closed)")
    return 0


def _scene_root(scene) -> np.ndarray:
    fk = forward_kinematics(scene.body, scene.human.pose)
    return fk[0, :3, :3] @ scene.body.joints[0] + fk[0, :3, 3]


def cmd_evaluate(args) -> int:
    pred = bundle_io.load_scene_bundle(args.pred)
    gt = bundle_io.load_scene_bundle(args.gt)
    if args.no_conversion:
        pred_human, pred_object = extract_posed_meshes(
            pred.scene, pred.human_base_mesh, pred.object_mesh
        )
    else:
        pred_human, pred_object, _ = _converted_meshes(pred, args.threshold)
    gt_human, gt_object = extract_posed_meshes(gt.scene, gt.human_base_mesh, gt.object_mesh)
    report = evaluate_sample(
        pred_human, pred_object, gt_human, gt_object, gt.gt_contact,
        pred_root=_scene_root(pred.scene), gt_root=_scene_root(gt.scene),
    )
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    if args.csv:
        path = Path(args.csv)
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(("sample",) + REPORT_KEYS)
            writer.writerow([str(args.pred)] + [report[k] for k in REPORT_KEYS])
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(n_scenes=args.scenes, seed=args.seed, rel_tol=args.tol, stride=args.stride)
    print(report.summary())
    if not report.passed:
        for line in report.failures[:20]:
            print("  " + line, file=sys.stderr)
        raise NumericalError(f"gradcheck failed: max rel err {report.max_rel_err:.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hoisplat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic GT + perturbed bundle pair")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--object", default="cube", choices=("cube", "sphere", "frisbee-disc"))
    sp.add_argument("--interaction", default="hold", choices=("hold", "stand-near", "reach"))
    sp.add_argument("--perturb-translation", type=float, default=0.15)
    sp.add_argument("--perturb-rotation-deg", type=float, default=15.0)
    sp.add_argument("--image-size", type=int, default=96)
    sp.set_defaults(fn=cmd_synth)

    op = sub.add_parser("optimize", help="run the joint refinement on a bundle")
    op.add_argument("bundle")
    op.add_argument("--out", required=True)
    op.add_argument("--config", default=None)
    op.add_argument("--steps", type=int, default=None)
    op.add_argument("--seed", type=int, default=None)
    op.add_argument("--guidance", default="mock", help="mock | null | http(s)://host:port")
    op.add_argument("--snapshot-every", type=int, default=0, metavar="K")
    op.set_defaults(fn=cmd_optimize)

    rp = sub.add_parser("render", help="render a bundle's scene to PNGs")
    rp.add_argument("bundle")
    rp.add_argument("--out", required=True)
    rp.add_argument("--view", default="front", help="front | r,elev_deg,azim_deg")
    rp.set_defaults(fn=cmd_render)

    cp = sub.add_parser("convert", help="extract contact-consistent meshes from a bundle")
    cp.add_argument("bundle")
    cp.add_argument("--out", required=True)
    cp.add_argument("--threshold", type=float, default=0.05)
    cp.set_defaults(fn=cmd_convert)

    ep = sub.add_parser("evaluate", help="score a predicted bundle against a GT bundle")
    ep.add_argument("pred")
    ep.add_argument("gt")
    ep.add_argument("--out", default=None, help="JSON report path")
    ep.add_argument("--csv", default=None, help="append a row to this CSV aggregate")
    ep.add_argument("--threshold", type=float, default=0.05)
    ep.add_argument("--no-conversion", action="store_true")
    ep.set_defaults(fn=cmd_evaluate)

    gp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gp.add_argument("--scenes", type=int, default=20)
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--tol", type=float, default=1e-3)
    gp.add_argument("--stride", type=int, default=1)
    gp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3
    except GuidanceUnavailableError as e:
        print(f"guidance unreachable: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
