"""Command-line entry point: phantom generation, target building, stage
training, inference, evaluation, and montage emission.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every run writes
a manifest.json with the resolved config, seed, and artifact hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data_io import PhantomSpec, generate_phantom, load_slices, save_slices
from .errors import HtcganError
from .htc_target import TargetDistribution, build_htc_target
from .metrics import evaluate_stage
from .pipeline import load_experiment, prepare_stage_data, run_stage
from .segmentation import segment
from .synthesis import derive_seed, synthesize


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, seed) -> None:
    """Deterministic run record: resolved config + per-artifact hashes."""
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            artifacts[str(p.relative_to(out_dir))] = _sha256(p)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_array_dir(dir_path: Path, prefixes, dtype_map=None):
    """Read raw arrays written by this package (meta.json + <prefix>_%04d.raw)."""
    meta = json.loads((dir_path / "meta.json").read_text())
    shape = tuple(meta["shape"])
    dtype_map = dtype_map or {
        "img": "<f4", "src": "<f4", "syn": "<f4", "tgt": "<f4", "att": "<f4",
        "prob": "<f4", "lbl": np.uint8, "msk": np.uint8, "pred": np.uint8,
    }
    for prefix in prefixes:
        first = dir_path / f"{prefix}_0000.raw"
        if first.exists():
            out = []
            for i in range(meta["count"]):
                raw = (dir_path / f"{prefix}_{i:04d}.raw").read_bytes()
                out.append(np.frombuffer(raw, dtype=dtype_map[prefix]).reshape(shape))
            return out, meta
    raise FileNotFoundError(
        f"{dir_path}: none of {list(prefixes)} arrays present"
    )


def _write_array_dir(dir_path: Path, prefix: str, arrays, meta_extra=None) -> None:
    dir_path.mkdir(parents=True, exist_ok=True)
    arrays = list(arrays)
    meta = {"count": len(arrays), "shape": list(np.asarray(arrays[0]).shape)}
    meta.update(meta_extra or {})
    meta_path = dir_path / "meta.json"
    if meta_path.exists():  # merge with an existing dataset dir
        old = json.loads(meta_path.read_text())
        old.update(meta)
        meta = old
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    for i, arr in enumerate(arrays):
        arr = np.asarray(arr)
        payload = (
            arr.astype("<f4") if arr.dtype.kind == "f" else arr.astype(np.uint8)
        )
        (dir_path / f"{prefix}_{i:04d}.raw").write_bytes(payload.tobytes())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _phantom_means_stds(regions: int, overlap: float):
    if regions == 1:
        means = [0.4, 0.6]
    else:
        means = list(np.linspace(0.3, 0.7, regions + 1))
    return means, [overlap] * (regions + 1)


def _cmd_phantom(args) -> int:
    means, stds = _phantom_means_stds(args.regions, args.overlap)
    spec = PhantomSpec(
        count=args.n,
        size=args.size,
        num_regions=args.regions,
        source_means=means,
        source_stds=stds,
        seed=args.seed,
    )
    pairs = generate_phantom(spec)
    out = Path(args.out)
    save_slices(
        out,
        [s for s, _ in pairs],
        seed=args.seed,
        spec={
            "count": spec.count,
            "size": spec.size,
            "num_regions": spec.num_regions,
            "source_means": means,
            "source_stds": stds,
            "overlap": args.overlap,
            "target_index": [t for _, t in pairs],
        },
    )
    _write_manifest(out, "phantom", _args_dict(args), args.seed)
    print(f"wrote {len(pairs)} phantom slices to {out}")
    return 0


def _cmd_targets(args) -> int:
    data = Path(args.data)
    slices, meta = load_slices(data)
    dist = TargetDistribution.binary(
        foreground=(args.mu_f, args.sigma_f), background=(args.mu_b, args.sigma_b)
    )
    shifts = meta.get("spec") or {}
    order = shifts.get("target_index") or [
        (i + max(1, len(slices) // 2)) % len(slices) for i in range(len(slices))
    ]
    fg_min = args.stage  # stage k foreground: labels >= k
    targets = []
    for i in range(len(slices)):
        lbl = (slices[order[i]].labels >= fg_min).astype(np.int32)
        targets.append(build_htc_target(lbl, dist, derive_seed(args.seed, f"target-{i}")))
    out = data / f"targets_stage{args.stage}"
    _write_array_dir(out, "tgt", targets, {"stage": args.stage, "seed": args.seed})
    _write_manifest(out, "targets", _args_dict(args), args.seed)
    print(f"wrote {len(targets)} stage-{args.stage} targets to {out}")
    return 0


def _cmd_train(args) -> int:
    exp = load_experiment(args.config)
    idx = args.stage - 1
    if not 0 <= idx < len(exp.stages):
        raise ValueError(f"config defines stages 1..{len(exp.stages)}, got {args.stage}")
    stage = exp.stages[idx]
    if args.strategy:
        stage.strategy = {"two-stage": "TWO_STAGE", "end2end": "END_TO_END"}[args.strategy]
    if args.epochs is not None:
        stage.epochs = args.epochs
    out_dir = Path(exp.output_dir)

    train_slices, _ = load_slices(exp.data["train"])
    val_slices = []
    if exp.data.get("val"):
        val_slices, _ = load_slices(exp.data["val"])
    train_slices = prepare_stage_data(exp.stages, args.stage, train_slices)
    val_slices = prepare_stage_data(exp.stages, args.stage, val_slices)

    print(f"training stage {args.stage} ({stage.strategy}) on {len(train_slices)} slices")
    models, result = run_stage(stage, train_slices, val_slices, str(out_dir))
    if result.skipped:
        print("stage skipped: no training data after cropping")
    else:
        last = result.synthesis_history.epochs[-1]
        print(
            f"done: epoch {last['epoch']} adv_s={last['adv_s']:.4f} "
            f"cyc_s={last['cyc_s']:.4f} mode={last['mode']}"
        )
        _save_samples(out_dir, stage, models, val_slices or train_slices)
    resolved = {"experiment": exp.to_json(), "overrides": _args_dict(args)}
    _write_manifest(out_dir, "train", resolved, stage.seed)
    return 0


def _save_samples(out_dir: Path, stage, models, slices, limit: int = 4) -> None:
    """A few (source, attention, synthetic, target) panels for `montage`."""
    if models.synthesis is None or not slices:
        return
    sub = out_dir / "samples"
    take = list(slices)[:limit]
    srcs, atts, syns, tgts = [], [], [], []
    for i, s in enumerate(take):
        syn, att = synthesize(models.synthesis, s.image)
        lbl = np.isin(s.labels, stage.foreground_labels).astype(np.int32)
        tgt = build_htc_target(
            lbl, stage.target_distribution, derive_seed(stage.seed, f"sample-{i}")
        )
        srcs.append(s.image)
        atts.append(att)
        syns.append(syn)
        tgts.append(tgt)
    _write_array_dir(sub, "src", srcs)
    _write_array_dir(sub, "att", atts)
    _write_array_dir(sub, "syn", syns)
    _write_array_dir(sub, "tgt", tgts)


def _cmd_infer(args) -> int:
    model = ckpt.load_model(args.checkpoint)
    slices, meta = load_slices(args.input)
    out = Path(args.out)
    if hasattr(model, "gen_source_to_target"):
        syns, atts = [], []
        for s in slices:
            syn, att = synthesize(model, s.image)
            syns.append(syn)
            atts.append(att)
        _write_array_dir(out, "syn", syns, {"checkpoint": str(args.checkpoint)})
        _write_array_dir(out, "att", atts)
        print(f"synthesized {len(syns)} slices to {out}")
    else:
        preds, probs = [], []
        for s in slices:
            res = segment(model, s.image)
            preds.append(res.mask.astype(np.uint8))
            probs.append(res.probability)
        _write_array_dir(out, "pred", preds, {"checkpoint": str(args.checkpoint)})
        _write_array_dir(out, "prob", probs)
        print(f"segmented {len(preds)} slices to {out}")
    _write_manifest(out, "infer", _args_dict(args), None)
    return 0


def _cmd_eval(args) -> int:
    preds, _ = _load_array_dir(Path(args.pred), ("pred", "msk", "lbl"))
    gts, _ = _load_array_dir(Path(args.gt), ("lbl", "msk", "pred"))
    synthetic = targets = None
    if args.synthetic and args.target:
        synthetic, _ = _load_array_dir(Path(args.synthetic), ("syn", "img", "tgt"))
        targets, _ = _load_array_dir(Path(args.target), ("tgt", "img", "syn"))
    elif args.synthetic or args.target:
        raise ValueError("--synthetic and --target must be given together")
    report = evaluate_stage(
        [p.astype(np.int32) for p in preds],
        [g.astype(np.int32) for g in gts],
        synthetic_images=synthetic,
        target_images=targets,
        config={"pred": args.pred, "gt": args.gt},
    )
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.save(report_path)
    report.export_csv(report_path.with_suffix(".csv"))
    _write_manifest(report_path.parent, "eval", _args_dict(args), None)
    print(f"wrote {report_path}")
    return 0


def montage(panels, out_path) -> None:
    """Compose rows of (source, attention, synthetic, target) panels into an
    8-bit grayscale PNG with 1-px separators."""
    from PIL import Image

    panels = [tuple(np.asarray(p, dtype=np.float64) for p in row) for row in panels]
    if not panels:
        raise ValueError("montage needs at least one case")
    size = panels[0][0].shape
    for row in panels:
        if len(row) != 4 or any(p.shape != size for p in row):
            raise ValueError("all montage panels must share one size")
    s = size[0]
    n = len(panels)
    canvas = np.full((n * s + (n - 1), 4 * size[1] + 3), 255, dtype=np.uint8)
    for r, row in enumerate(panels):
        top = r * (s + 1)
        for c, panel in enumerate(row):
            left = c * (size[1] + 1)
            quant = np.round(np.clip(panel, 0.0, 1.0) * 255.0).astype(np.uint8)
            canvas[top : top + s, left : left + size[1]] = quant
    Image.fromarray(canvas, mode="L").save(out_path)


def _cmd_montage(args) -> int:
    run = Path(args.run)
    sub = run / "samples" if (run / "samples").exists() else run
    srcs, _ = _load_array_dir(sub, ("src", "img"))
    atts, _ = _load_array_dir(sub, ("att",))
    syns, _ = _load_array_dir(sub, ("syn",))
    tgts, _ = _load_array_dir(sub, ("tgt",))
    panels = list(zip(srcs, atts, syns, tgts))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    montage(panels, out)
    _write_manifest(out.parent, "montage", _args_dict(args), None)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="htcgan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a deterministic phantom dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, required=True, help="number of slices")
    p.add_argument("--size", type=int, required=True, help="square slice size")
    p.add_argument("--regions", type=int, default=1, help="nested regions per slice")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument(
        "--overlap", type=float, default=0.15,
        help="shared class std; larger means more class overlap",
    )
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("targets", help="build HTC target images from labels")
    p.add_argument("--data", required=True, help="slice dataset directory")
    p.add_argument("--stage", type=int, required=True, help="stage index (fg = labels >= stage)")
    p.add_argument("--mu-f", type=float, default=0.75, dest="mu_f")
    p.add_argument("--sigma-f", type=float, default=0.05, dest="sigma_f")
    p.add_argument("--mu-b", type=float, default=0.25, dest="mu_b")
    p.add_argument("--sigma-b", type=float, default=0.05, dest="sigma_b")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=_cmd_targets)

    p = sub.add_parser("train", help="train one cascade stage")
    p.add_argument("--config", required=True, help="experiment JSON file")
    p.add_argument("--stage", type=int, required=True, help="1-based stage index")
    p.add_argument("--strategy", choices=["two-stage", "end2end"], default=None)
    p.add_argument("--epochs", type=int, default=None, help="override stage epochs")
    p.add_argument("--deterministic", action="store_true",
                   help="record deterministic mode in the manifest (always on)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint over a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score predictions and write report.json")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--synthetic", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("montage", help="compose sample panels into a PNG")
    p.add_argument("--run", required=True, help="run directory with samples/")
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=_cmd_montage)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, usage errors exit 1
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (HtcganError, OSError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
