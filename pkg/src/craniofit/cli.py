"""Command-line front end: craniofit fit|rank|resynth|gradcheck|synth.

Exit codes: 0 success, 2 configuration or parse error, 3 numerical failure,
4 contract violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    ContractViolation,
    CraniofitError,
    NumericalError,
)
from .facemodel import (
    SemanticCodeVector,
    evaluate_mesh_from_code,
    load_anthropometric_map,
    load_model,
)
from .fitting import FitConfig, LandmarkSet, fit_multi, fit_single
from .geometry import save_mesh
from .pipeline import (
    PipelineConfig,
    generate_scene,
    load_scene_dir,
    run_gradcheck,
    run_resynth,
    write_scene,
)
from .superimpose import (
    SkullAnnotation,
    format_percentage,
    load_skull_landmarks,
    load_tissue_table,
    rank_candidates,
)
from .geometry import load_mesh


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="craniofit",
        description="Skull-guided facial reconstruction: fit, rank, re-synthesize.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit the head model to landmark files")
    p_fit.add_argument("landmarks", nargs="+", help="landmark files, 'id x y' per line")
    p_fit.add_argument("--model", required=True, help="model container (.cfm)")
    p_fit.add_argument("--anthropometric", required=True, help="landmark-to-vertex table")
    p_fit.add_argument("--out", default="fit_out", help="output directory")
    p_fit.add_argument("--same-person", action="store_true", help="share one geometry across files")
    p_fit.add_argument("--w-m", type=float, default=1.0)
    p_fit.add_argument("--w-r", type=float, default=1e-3)
    p_fit.add_argument("--max-iters", type=int, default=500)

    p_rank = sub.add_parser("rank", help="rank candidate faces against a skull")
    p_rank.add_argument("--skull", required=True, help="skull mesh (.obj)")
    p_rank.add_argument("--skull-landmarks", required=True)
    p_rank.add_argument("--depths", required=True, help="tissue depth table (.csv)")
    p_rank.add_argument("--model", required=True)
    p_rank.add_argument("--anthropometric", required=True)
    p_rank.add_argument("--candidates", required=True, help="directory of candidate .obj meshes")
    p_rank.add_argument("--alignment", choices=("auto", "identity"), default="auto")
    p_rank.add_argument("--out", default="ranking.json")

    p_res = sub.add_parser("resynth", help="full pipeline: rank, mask, re-synthesize")
    p_res.add_argument("--config", required=True, help="key=value config file")
    p_res.add_argument("--seed", type=int, default=None, help="override inpaint.seed")
    p_res.add_argument("--out", default=None, help="override output.dir")

    p_grad = sub.add_parser("gradcheck", help="gradients vs central differences")
    p_grad.add_argument("--seed", type=int, default=1)
    p_grad.add_argument("--count", type=int, default=10)
    p_grad.add_argument(
        "--corrupt", action="store_true",
        help="testing hook: inject an analytic error and expect a failure row",
    )

    p_syn = sub.add_parser("synth", help="generate a synthetic skull-face dataset")
    p_syn.add_argument("--seed", type=int, required=True)
    p_syn.add_argument("--out", required=True)
    p_syn.add_argument("--n-vertices", type=int, default=2562)
    p_syn.add_argument("--candidates", type=int, default=12)
    p_syn.add_argument("--perturb-depths", action="store_true",
                       help="inflate some depths so the generating face mismatches")

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 4
    except CraniofitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "fit":
        return _cmd_fit(args)
    if args.command == "rank":
        return _cmd_rank(args)
    if args.command == "resynth":
        return _cmd_resynth(args)
    if args.command == "gradcheck":
        return _cmd_gradcheck(args)
    if args.command == "synth":
        return _cmd_synth(args)
    raise ConfigError(f"unknown command {args.command!r}")


def _load_model_args(model_path, anthro_path):
    for p in (model_path, anthro_path):
        if not Path(p).exists():
            raise ConfigError(f"file not found: {p}")
    return load_model(model_path, load_anthropometric_map(anthro_path))


def _cmd_fit(args) -> int:
    model = _load_model_args(args.model, args.anthropometric)
    sets = [LandmarkSet.from_file(p) for p in args.landmarks]
    cfg = FitConfig(w_m=args.w_m, w_r=args.w_r, max_iters=args.max_iters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.same_person and len(sets) > 1:
        result = fit_multi(model, sets, cfg)
        code = result.code_for(0)
        report = {
            "mode": "multi",
            "final_loss": result.final_loss,
            "iterations": result.iterations,
            "converged": result.converged,
            "shared_geometry": result.geometry.tolist(),
            "rendering_blocks": [r.tolist() for r in result.rendering],
        }
    else:
        results = [fit_single(model, lm, cfg) for lm in sets]
        code = results[0].code
        report = {
            "mode": "single",
            "fits": [r.report() for r in results],
        }
    mesh = evaluate_mesh_from_code(model, code)
    save_mesh(out / "fitted.obj", mesh)
    (out / "fit_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"wrote {out / 'fitted.obj'} and {out / 'fit_report.json'}")
    return 0


def _cmd_rank(args) -> int:
    model = _load_model_args(args.model, args.anthropometric)
    for p in (args.skull, args.skull_landmarks, args.depths):
        if not Path(p).exists():
            raise ConfigError(f"file not found: {p}")
    skull = SkullAnnotation(load_mesh(args.skull), load_skull_landmarks(args.skull_landmarks))
    table = load_tissue_table(args.depths)
    cdir = Path(args.candidates)
    objs = sorted(cdir.glob("*.obj")) if cdir.is_dir() else []
    if not objs:
        raise ConfigError(f"no candidate meshes found in {cdir}")
    candidates = [(p.stem, load_mesh(p, topology_id=model.topology_id)) for p in objs]
    align = "auto" if args.alignment == "auto" else None
    ranked = rank_candidates(skull, table, model, candidates, align)
    rows = [
        {"id": cid, "score": format_percentage(r.score), "mean_distance_mm": r.mean_distance}
        for cid, r in ranked
    ]
    Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
    print(f"{'candidate':<14} {'score':>8} {'mean mm':>9}")
    for row in rows:
        print(f"{row['id']:<14} {row['score']:>8} {row['mean_distance_mm']:9.3f}")
    return 0


def _cmd_resynth(args) -> int:
    cfg = PipelineConfig.parse(args.config)
    cfg.validate_resynth()
    data = load_scene_dir(cfg.base_dir) if _looks_like_dataset(cfg) else _load_from_config(cfg)
    out_dir = Path(args.out) if args.out else cfg.base_dir / cfg.get("output.dir", "resynth_out")
    seed = args.seed if args.seed is not None else int(cfg.get("inpaint.seed", 11))
    report = run_resynth(
        model=data["model"],
        labels=data["labels"],
        seg=data["segmentation"],
        skull=data["skull"],
        table=data["table"],
        candidates=data["candidates"],
        training_codes=data["training_codes"],
        out_dir=out_dir,
        chosen=cfg.get("inpaint.candidate", "auto"),
        alignment=cfg.get("superimposition.alignment", "identity"),
        lambda_p=float(cfg.get("inpaint.lambda_p", 0.1)),
        lambda_2=float(cfg.get("inpaint.lambda_2", 1.0)),
        window=int(cfg.get("inpaint.window", 7)),
        seed=seed,
        max_iters=int(cfg.get("inpaint.max_iters", 500)),
    )
    print(report.table())
    return 0


def _looks_like_dataset(cfg: PipelineConfig) -> bool:
    return (cfg.base_dir / "manifest.json").exists() and (
        cfg.base_dir / "training_codes.txt"
    ).exists()


def _load_from_config(cfg: PipelineConfig) -> dict:
    from .facemodel import load_region_labels
    from .inpaint import Segmentation

    model = load_model(cfg.path("model.path"), load_anthropometric_map(cfg.path("model.anthropometric")))
    labels = load_region_labels(cfg.path("model.regions"), model.n_vertices)
    skull = SkullAnnotation(
        load_mesh(cfg.path("skull.mesh")), load_skull_landmarks(cfg.path("skull.landmarks"))
    )
    table = load_tissue_table(cfg.path("skull.depths"))
    cdir = cfg.path("candidates.dir")
    candidates = []
    for obj in sorted(cdir.glob("*.obj")):
        code_file = cdir / f"{obj.stem}.code.txt"
        code = SemanticCodeVector(np.loadtxt(code_file)) if code_file.exists() else None
        candidates.append((obj.stem, code, load_mesh(obj, topology_id=model.topology_id)))
    if not candidates:
        raise ConfigError(f"no candidates found in {cdir}")
    train_file = cfg.base_dir / cfg.get("inpaint.training_codes", "training_codes.txt")
    if not train_file.exists():
        raise ConfigError(f"training codes file not found: {train_file}")
    return {
        "model": model,
        "labels": labels,
        "segmentation": Segmentation.from_model(model, labels),
        "skull": skull,
        "table": table,
        "candidates": candidates,
        "training_codes": np.loadtxt(train_file),
    }


def _cmd_gradcheck(args) -> int:
    rows = run_gradcheck(args.seed, args.count, corrupt=args.corrupt)
    print(f"{'check':<22} {'case':>4} {'max rel err':>12}  result")
    failures = 0
    for name, j, err, ok in rows:
        print(f"{name:<22} {j:>4} {err:12.3e}  {'pass' if ok else 'FAIL'}")
        failures += not ok
    print(f"{len(rows) - failures}/{len(rows)} checks passed")
    if args.corrupt:
        return 0 if failures else 1  # the hook must produce a failure row
    return 0 if failures == 0 else 3


def _cmd_synth(args) -> int:
    scene = generate_scene(
        args.seed,
        n_vertices=args.n_vertices,
        n_candidates=args.candidates,
        perturb_depths=args.perturb_depths,
    )
    manifest = write_scene(scene, args.out)
    print(f"dataset written to {args.out}: {len(manifest['files'])} files")
    return 0


if __name__ == "__main__":
    sys.exit(main())
