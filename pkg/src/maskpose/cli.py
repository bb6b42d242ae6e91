"""Command-line interface.

Subcommands cover the full workflow: synth writes a synthetic scene to
disk; render re-renders its objects solo; propose runs the coarse stage;
refine polishes stored proposals; estimate chains both stages; eval scores
a results file against ground truth; bench times batched versus sequential
refinement.  Every run writes a manifest.json echoing the resolved
configuration, seed, and thread count.

The --config file is JSON with two optional sections: "run" holds
RunConfig overrides (nested "sampler", "refine", "refine.warp", "metric"
sections plus scalar fields) and "scene" holds SceneSpec overrides for the
commands that generate scenes.  --seed, --threads, and --out override the
file.
"""

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from maskpose import io
from maskpose.geom import CameraModel, Pose, Rotation
from maskpose.matcher import FeatureMap, oracle_features_from_depth
from maskpose.metrics import add_error, adds_error
from maskpose.pipeline import (
    EstimateReport,
    ObservationFrame,
    ProposalError,
    RunConfig,
    bench_throughput,
    estimate,
    propose,
    results_rows,
    template_set_for,
)
from maskpose.refine import HypothesisBatch, refine_batch, select_best
from maskpose.sampler import ObjectModel
from maskpose.scene import SceneSpec, SyntheticScene, generate_scene
from maskpose.warp import WarpConfig, render_pointcloud


def run_config_from(
    data: dict | None,
    seed: int | None = None,
    threads: int | None = None,
    out: str | None = None,
) -> RunConfig:
    """Resolve a RunConfig from the config file's "run" section plus the
    command-line overrides."""
    data = dict(data or {})
    cfg = RunConfig()
    kwargs: dict = {}
    if "sampler" in data:
        kwargs["sampler"] = dataclasses.replace(cfg.sampler, **data.pop("sampler"))
    if "refine" in data:
        section = dict(data.pop("refine"))
        if "warp" in section:
            section["warp"] = WarpConfig(**section.pop("warp"))
        kwargs["refine"] = dataclasses.replace(cfg.refine, **section)
    if "metric" in data:
        section = dict(data.pop("metric"))
        if "ar_thresholds" in section:
            section["ar_thresholds"] = tuple(section["ar_thresholds"])
        kwargs["metric"] = dataclasses.replace(cfg.metric, **section)
    scalars = {
        "hypotheses", "iterations", "patch_stride", "sigma_fraction",
        "template_size", "template_focal", "feature_source", "predictor",
        "mode", "expected_objects", "seed", "threads", "out_dir",
    }
    unknown = set(data) - scalars
    if unknown:
        raise ValueError(f"unknown run config keys: {sorted(unknown)}")
    kwargs.update(data)
    cfg = dataclasses.replace(cfg, **kwargs)
    overrides: dict = {}
    if seed is not None:
        overrides["seed"] = seed
    if threads is not None:
        overrides["threads"] = threads
    if out is not None:
        overrides["out_dir"] = out
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def scene_spec_from(data: dict | None, warp: WarpConfig) -> SceneSpec:
    """Resolve a SceneSpec from the config file's "scene" section."""
    data = dict(data or {})
    kwargs: dict = {"warp": warp}
    if "objects" in data:
        kwargs["objects"] = tuple(data.pop("objects"))
    if "depth_range" in data:
        kwargs["depth_range"] = tuple(data.pop("depth_range"))
    if "camera" in data:
        kwargs["camera"] = CameraModel(**data.pop("camera"))
    if "warp" in data:
        kwargs["warp"] = WarpConfig(**data.pop("warp"))
    allowed = {
        "occluded_object", "occlusion_fraction", "occlusion_tolerance",
        "occluder_scale", "margin_px", "max_tries",
    }
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
    kwargs.update(data)
    return SceneSpec(**kwargs)


def _config_payload(cfg: RunConfig, spec: SceneSpec | None = None) -> dict:
    payload = {"run": dataclasses.asdict(cfg)}
    if spec is not None:
        payload["scene"] = dataclasses.asdict(spec)
    return payload


def write_manifest(
    out_dir: Path,
    command: str,
    cfg: RunConfig,
    spec: SceneSpec | None = None,
    inputs: dict | None = None,
    outputs: list[str] | None = None,
    errors: dict[str, str] | None = None,
) -> None:
    payload = {
        "command": command,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "config": _config_payload(cfg, spec),
    }
    if inputs:
        payload["inputs"] = inputs
    if outputs:
        payload["outputs"] = sorted(outputs)
    if errors:
        payload["errors"] = errors
    io.write_json(out_dir / "manifest.json", payload, schema="manifest")


def write_scene_dir(out: Path, scene: SyntheticScene, seed: int) -> list[str]:
    """Write a scene in the on-disk layout the other commands consume."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(exist_ok=True)
    written = ["rgb.png", "depth.png", "camera.json", "gt.json"]
    io.write_rgb_png(out / "rgb.png", scene.rgb)
    io.write_depth_png(out / "depth.png", scene.depth, scene.camera.depth_scale)
    io.save_camera(out / "camera.json", scene.camera)
    objects = []
    for i, (model, pose) in enumerate(zip(scene.models, scene.poses)):
        io.write_mask_png(out / f"visible_{i}.png", scene.visible_masks[i])
        io.write_mask_png(out / f"amodal_{i}.png", scene.amodal_masks[i])
        rel = f"models/{model.identifier}.ply"
        io.write_ply(out / rel, model)
        written += [f"visible_{i}.png", f"amodal_{i}.png", rel]
        objects.append(
            {
                "identifier": model.identifier,
                "model": rel,
                "quat": [float(v) for v in pose.rotation.quat],
                "t": [float(v) for v in pose.translation],
                "occlusion_fraction": float(scene.occlusion_fractions[i]),
            }
        )
    occluders = []
    for j, (model, pose) in enumerate(zip(scene.occluder_models, scene.occluder_poses)):
        rel = f"models/{model.identifier}_{j}.ply"
        io.write_ply(out / rel, model)
        written.append(rel)
        occluders.append(
            {
                "model": rel,
                "quat": [float(v) for v in pose.rotation.quat],
                "t": [float(v) for v in pose.translation],
            }
        )
    payload = {"seed": seed, "objects": objects, "occluders": occluders}
    io.write_json(out / "gt.json", payload, schema="scene_gt")
    return written


@dataclasses.dataclass
class SceneDir:
    """A scene read back from the synth layout."""

    path: Path
    camera: CameraModel
    rgb: np.ndarray
    depth: np.ndarray
    models: list[ObjectModel]
    poses: list[Pose]
    visible: list[np.ndarray]
    amodal: list[np.ndarray]
    seed: int


def load_scene_dir(path: str | Path) -> SceneDir:
    path = Path(path)
    cam = io.load_camera(path / "camera.json")
    gt = io.load_json(path / "gt.json", schema="scene_gt")
    rgb = io.read_rgb_png(path / "rgb.png")
    depth = io.read_depth_png(path / "depth.png", cam.depth_scale)
    models, poses, visible, amodal = [], [], [], []
    for i, obj in enumerate(gt["objects"]):
        models.append(io.read_ply(path / obj["model"]))
        poses.append(Pose(Rotation(np.array(obj["quat"])), np.array(obj["t"])))
        visible.append(io.read_mask_png(path / f"visible_{i}.png"))
        amodal.append(io.read_mask_png(path / f"amodal_{i}.png"))
    return SceneDir(path, cam, rgb, depth, models, poses, visible, amodal, int(gt["seed"]))


def frames_from_dir(scene: SceneDir, cfg: RunConfig) -> list[ObservationFrame]:
    """Observation frames for every object of a stored scene.

    Features follow cfg.feature_source: "oracle" computes them from the
    ground-truth poses; "file" reads features_{i}.dten (float32, shaped
    (H0, W0, C)) with the run's patch stride.
    """
    frames = []
    for i, model in enumerate(scene.models):
        if cfg.feature_source == "oracle":
            features = oracle_features_from_depth(
                scene.depth, scene.visible[i], scene.camera,
                scene.poses[i], cfg.patch_stride, model.diameter,
            )
        else:
            data = io.read_tensor(scene.path / f"features_{i}.dten")
            features = FeatureMap(data.astype(np.float64), cfg.patch_stride)
        frames.append(
            ObservationFrame(
                rgb=scene.rgb,
                depth=scene.depth,
                visible_mask=scene.visible[i],
                camera=scene.camera,
                occlusion_mask=scene.amodal[i] & ~scene.visible[i],
                features=features,
                identifier=model.identifier,
            )
        )
    return frames


def _proposal_payload(props) -> dict:
    return {
        "identifier": props.identifier,
        "candidates": props.candidates,
        "scored": props.scored,
        "selected": props.selected,
        "t_init": [float(v) for v in props.t_init],
        "hypotheses": [
            {
                "quat": [float(v) for v in pose.rotation.quat],
                "t": [float(v) for v in pose.translation],
                "score": float(score),
            }
            for pose, score in zip(props.poses, props.scores)
        ],
    }


def _write_estimate_outputs(
    out: Path, report: EstimateReport, cfg: RunConfig, scene_id: int
) -> tuple[list[str], dict[str, str]]:
    out.mkdir(parents=True, exist_ok=True)
    written = ["results.csv", "timings.json"]
    io.write_results_csv(out / "results.csv", results_rows(report, scene_id=scene_id))
    io.write_json(
        out / "timings.json",
        {
            "seed": cfg.seed,
            "stages": report.stage_seconds,
            "per_object": report.per_object_seconds,
        },
        schema="timings",
    )
    errors = {}
    for obj in report.objects:
        if obj.proposals is not None:
            name = f"proposals_{obj.index}.json"
            io.write_json(out / name, _proposal_payload(obj.proposals), schema="proposals")
            written.append(name)
        if obj.error is not None:
            errors[str(obj.index)] = obj.error
    return written, errors


def cmd_synth(args: argparse.Namespace, config: dict) -> int:
    cfg = run_config_from(config.get("run"), args.seed, args.threads, args.out)
    spec = scene_spec_from(config.get("scene"), cfg.refine.warp)
    scene = generate_scene(spec, seed=cfg.seed)
    out = Path(args.out)
    written = write_scene_dir(out, scene, cfg.seed)
    write_manifest(out, "synth", cfg, spec, outputs=written)
    print(f"synth: wrote scene with {len(scene.models)} objects to {out}")
    return 0


def cmd_render(args: argparse.Namespace, config: dict) -> int:
    cfg = run_config_from(config.get("run"), args.seed, args.threads, args.out)
    scene = load_scene_dir(args.scene_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (model, pose) in enumerate(zip(scene.models, scene.poses)):
        rendered = render_pointcloud(model, pose, scene.camera, cfg.refine.warp)
        io.write_map(out / f"render_{i}.dten", rendered)
        rgb8 = np.clip(np.round(rendered.rgb * 255.0), 0, 255).astype(np.uint8)
        io.write_rgb_png(out / f"render_{i}.rgb.png", rgb8)
        depth = np.where(rendered.valid, rendered.xyz[..., 2], 0.0)
        io.write_depth_png(out / f"render_{i}.depth.png", depth, scene.camera.depth_scale)
        written += [f"render_{i}.dten", f"render_{i}.rgb.png", f"render_{i}.depth.png"]
    write_manifest(
        out, "render", cfg,
        inputs={"scene_dir": str(args.scene_dir)}, outputs=written,
    )
    print(f"render: wrote {len(scene.models)} solo renders to {out}")
    return 0


def cmd_propose(args: argparse.Namespace, config: dict) -> int:
    cfg = run_config_from(config.get("run"), args.seed, args.threads, args.out)
    scene = load_scene_dir(args.scene_dir)
    frames = frames_from_dir(scene, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written, errors = [], {}
    for i, (frame, model) in enumerate(zip(frames, scene.models)):
        try:
            tset = template_set_for(model, cfg)
            props = propose(frame, model, tset, cfg)
        except (ProposalError, ValueError) as err:
            errors[str(i)] = str(err)
            continue
        name = f"proposals_{i}.json"
        io.write_json(out / name, _proposal_payload(props), schema="proposals")
        written.append(name)
    write_manifest(
        out, "propose", cfg,
        inputs={"scene_dir": str(args.scene_dir)}, outputs=written, errors=errors,
    )
    print(f"propose: {len(written)} objects proposed, {len(errors)} failed")
    return 0


def cmd_refine(args: argparse.Namespace, config: dict) -> int:
    cfg = run_config_from(config.get("run"), args.seed, args.threads, args.out)
    scene = load_scene_dir(args.scene_dir)
    proposals_dir = Path(args.proposals)
    poses_per_object, scores_per_object, kept = [], [], []
    for i in range(len(scene.models)):
        path = proposals_dir / f"proposals_{i}.json"
        if not path.exists():
            continue
        payload = io.load_json(path, schema="proposals")
        poses_per_object.append(
            [
                Pose(Rotation(np.array(h["quat"])), np.array(h["t"]))
                for h in payload["hypotheses"]
            ]
        )
        scores_per_object.append([h["score"] for h in payload["hypotheses"]])
        kept.append(i)
    if not kept:
        print("refine: no proposal files found", file=sys.stderr)
        return 1
    frames = []
    for i in kept:
        frames.append(
            ObservationFrame(
                rgb=scene.rgb, depth=scene.depth, visible_mask=scene.visible[i],
                camera=scene.camera,
                occlusion_mask=scene.amodal[i] & ~scene.visible[i],
                identifier=scene.models[i].identifier,
            )
        )
    batch = HypothesisBatch.from_object_poses(poses_per_object, scores_per_object)
    t0 = time.perf_counter()
    result = refine_batch(
        batch, frames, [scene.models[i] for i in kept], scene.camera,
        cfg.effective_refine(), mode=cfg.mode,
    )
    wall = time.perf_counter() - t0
    best = select_best(result.batch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for compact, i in enumerate(kept):
        if compact in result.failures:
            continue
        pose, score, _ = best[compact]
        rows.append(
            {"scene_id": scene.seed, "im_id": 0, "obj_id": i,
             "score": score, "pose": pose, "time": -1.0}
        )
    io.write_results_csv(out / "results.csv", rows)
    io.write_json(
        out / "timings.json",
        {"seed": cfg.seed, "stages": {"refine": wall, "total": wall}},
        schema="timings",
    )
    errors = {str(kept[c]): msg for c, msg in result.failures.items()}
    write_manifest(
        out, "refine", cfg,
        inputs={"scene_dir": str(args.scene_dir), "proposals": str(proposals_dir)},
        outputs=["results.csv", "timings.json"], errors=errors,
    )
    print(f"refine: {len(rows)} objects refined, {len(errors)} failed")
    return 0


def cmd_estimate(args: argparse.Namespace, config: dict) -> int:
    cfg = run_config_from(config.get("run"), args.seed, args.threads, args.out)
    scene = load_scene_dir(args.scene_dir)
    frames = frames_from_dir(scene, cfg)
    report = estimate(frames, scene.models, cfg)
    out = Path(args.out)
    written, errors = _write_estimate_outputs(out, report, cfg, scene.seed)
    write_manifest(
        out, "estimate", cfg,
        inputs={"scene_dir": str(args.scene_dir)}, outputs=written, errors=errors,
    )
    solved = sum(obj.pose is not None for obj in report.objects)
    print(f"estimate: {solved}/{len(report.objects)} objects solved")
    return 0


def cmd_eval(args: argparse.Namespace, config: dict) -> int:
    cfg = run_config_from(config.get("run"), args.seed, args.threads, args.out)
    scene = load_scene_dir(args.scene_dir)
    rows = io.read_results_csv(args.results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    objects, add_list, adds_list, diameters = [], [], [], []
    for row in rows:
        i = row["obj_id"]
        if not 0 <= i < len(scene.models):
            raise ValueError(f"results reference unknown object id {i}")
        model, gt = scene.models[i], scene.poses[i]
        e_add = add_error(model, row["pose"], gt)
        e_adds = adds_error(model, row["pose"], gt)
        objects.append(
            {
                "obj_id": i,
                "identifier": model.identifier,
                "add_error": float(e_add),
                "adds_error": float(e_adds),
                "diameter": float(model.diameter),
            }
        )
        add_list.append(e_add)
        adds_list.append(e_adds)
        diameters.append(model.diameter)
    add_arr = np.array(add_list)
    adds_arr = np.array(adds_list)
    diam_arr = np.array(diameters)

    def pct_correct(errors: np.ndarray) -> float:
        if errors.size == 0:
            return 0.0
        frac = cfg.metric.add_threshold_fraction
        return float(100.0 * np.mean(errors < frac * diam_arr))

    def mean_recall(errors: np.ndarray) -> float:
        # Per-object diameters make the thresholds object-relative.
        if errors.size == 0:
            return 0.0
        return float(
            np.mean([np.mean(errors < f * diam_arr) for f in cfg.metric.ar_thresholds])
        )

    payload = {
        "objects": objects,
        "add_accuracy_pct": pct_correct(add_arr),
        "adds_accuracy_pct": pct_correct(adds_arr),
        "add_recall": mean_recall(add_arr),
        "adds_recall": mean_recall(adds_arr),
    }
    io.write_json(out / "metrics.json", payload, schema="metrics")
    write_manifest(
        out, "eval", cfg,
        inputs={"results": str(args.results), "scene_dir": str(args.scene_dir)},
        outputs=["metrics.json"],
    )
    print(
        f"eval: ADD accuracy {payload['add_accuracy_pct']:.1f}% "
        f"over {len(objects)} objects"
    )
    return 0


def cmd_bench(args: argparse.Namespace, config: dict) -> int:
    cfg = run_config_from(config.get("run"), args.seed, args.threads, args.out)
    spec = scene_spec_from(
        config.get("scene", {"objects": ["cube", "sphere", "lprism", "cube", "sphere"]}),
        cfg.refine.warp,
    )
    from maskpose.pipeline import frames_from_scene

    scene = generate_scene(spec, seed=cfg.seed)
    frames, models = frames_from_scene(scene, cfg, with_features=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for mode in ("batched", "sequential"):
        reports[mode] = bench_throughput(
            cfg, mode, frames=frames, models=models, gt_poses=list(scene.poses)
        )
        io.write_json(out / f"report_{mode}.json", reports[mode], schema="report")
    drift = max(
        max(abs(a - b) for a, b in zip(pa["quat"], pb["quat"]))
        + max(abs(a - b) for a, b in zip(pa["t"], pb["t"]))
        for pa, pb in zip(reports["batched"]["poses"], reports["sequential"]["poses"])
    )
    write_manifest(
        out, "bench", cfg, spec,
        outputs=["report_batched.json", "report_sequential.json"],
    )
    ratio = reports["batched"]["wall_time_s"] / reports["sequential"]["wall_time_s"]
    print(
        f"bench: batched {reports['batched']['wall_time_s']:.2f}s, "
        f"sequential {reports['sequential']['wall_time_s']:.2f}s "
        f"(ratio {ratio:.2f}), max pose drift {drift:.2e}"
    )
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "render": cmd_render,
    "propose": cmd_propose,
    "refine": cmd_refine,
    "estimate": cmd_estimate,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with run/scene sections")
    common.add_argument("--seed", type=int, help="RNG seed (overrides config)")
    common.add_argument("--threads", type=int, help="worker threads (overrides config)")
    common.add_argument("--out", required=True, help="output directory")

    parser = argparse.ArgumentParser(prog="maskpose", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    p = sub.add_parser("render", parents=[common], help="solo-render stored objects")
    p.add_argument("scene_dir")
    p = sub.add_parser("propose", parents=[common], help="coarse pose proposals")
    p.add_argument("scene_dir")
    p = sub.add_parser("refine", parents=[common], help="refine stored proposals")
    p.add_argument("scene_dir")
    p.add_argument("--proposals", required=True, help="directory with proposals_*.json")
    p = sub.add_parser("estimate", parents=[common], help="full two-stage estimation")
    p.add_argument("scene_dir")
    p = sub.add_parser("eval", parents=[common], help="score results against ground truth")
    p.add_argument("results")
    p.add_argument("scene_dir")
    sub.add_parser("bench", parents=[common], help="batched vs sequential timing")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    config = io.load_json(args.config) if args.config else {}
    try:
        return _COMMANDS[args.command](args, config)
    except (ValueError, OSError) as err:
        print(f"maskpose {args.command}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
