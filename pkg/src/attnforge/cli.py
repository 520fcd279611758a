"""Command-line orchestration.

Commands: gen-data, train, caption, force, sweep, evaluate, render.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
Every command writes its resolved configuration next to its outputs.
ATTNFORGE_THREADS bounds fan-out parallelism for force runs.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import attmaps, captioner, evalsuite, forcing, ppm, render, scenegen
from .nn import NonFiniteError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(ValueError):
    pass


class DataError(ValueError):
    pass


def _threads() -> int:
    env = os.environ.get("ATTNFORGE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _write_config(args, out_path: Path, command: str):
    cfg = {k: (str(v) if isinstance(v, Path) else v)
           for k, v in sorted(vars(args).items()) if k != "func"}
    cfg["command"] = command
    path = out_path / "config.json" if out_path.is_dir() else Path(str(out_path) + ".config.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_manifest(path) -> scenegen.DatasetManifest:
    try:
        return scenegen.read_manifest(path)
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e


def _load_model(path) -> captioner.CaptionModel:
    try:
        return captioner.CaptionModel.load_checkpoint(path)
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    except captioner.CheckpointError as e:
        raise DataError(str(e)) from e


def _scene_images(manifest):
    return {rec.id: ppm.read_ppm(manifest.root / rec.image) for rec in manifest.records}


def _filtered_boxes(manifest):
    """Median-size filter over all boxes of the split; returns
    {scene_id: [(box_index, BoundingBox), ...]} for retained boxes."""
    all_boxes = []
    for rec in manifest.records:
        for bi, b in enumerate(rec.boxes):
            all_boxes.append((rec.id, bi, b))
    if not all_boxes:
        raise DataError("dataset has no boxes")
    kept = evalsuite.filter_boxes([b for _, _, b in all_boxes])
    kept_ids = {id(b) for b in kept}
    out = {}
    for sid, bi, b in all_boxes:
        if id(b) in kept_ids:
            box = attmaps.BoundingBox(b["x"], b["y"], b["w"], b["h"],
                                      tuple(b["category"].split()))
            out.setdefault(sid, []).append((bi, box))
    return out


# ------------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = scenegen.GenConfig(canvas=(args.canvas, args.canvas))
    scenes = scenegen.generate_dataset(args.scenes, args.seed, cfg)
    out = Path(args.out)
    scenegen.write_dataset(scenes, out, split=args.split, seed=args.seed)
    _write_config(args, out, "gen-data")
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_train(args):
    manifest = _load_manifest(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lams = args.lam
    for lam in lams:
        hp = captioner.HyperParams(lam=lam, max_len=args.max_len, lr=args.lr)
        try:
            result = captioner.train(manifest, hp, seed=args.seed, epochs=args.epochs,
                                     log_fn=lambda e, l: print(f"lambda={lam:g} epoch {e}: loss {l:.4f}"))
        except ValueError as e:
            raise DataError(str(e)) from e
        ckpt = out if len(lams) == 1 else out.with_name(f"{out.stem}.lam{lam:g}{out.suffix}")
        result.model.save_checkpoint(ckpt)
        with open(Path(str(ckpt) + ".loss.csv"), "w", encoding="utf-8") as f:
            f.write("epoch,mean_loss\n")
            for e, loss in enumerate(result.epoch_losses):
                f.write(f"{e},{loss:.10f}\n")
        print(f"wrote checkpoint {ckpt} ({result.n_pairs} training pairs)")
    _write_config(args, out, "train")
    return EXIT_OK


def cmd_caption(args):
    model = _load_model(args.ckpt)
    manifest = _load_manifest(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for rec in manifest.records:
            image = ppm.read_ppm(manifest.root / rec.image)
            cr = model.caption_image(image)
            fd = forcing.ForcedDecode(policy=forcing.self_policy(), record=cr,
                                      scene_id=rec.id, box_index=None, category=None)
            f.write(fd.to_json(with_alpha=args.dump_alpha) + "\n")
    _write_config(args, out, "caption")
    print(f"wrote {len(manifest.records)} captions to {out}")
    return EXIT_OK


def _force_one(model, image, sid, boxes, method, steps, weight, with_control):
    """All records for one scene: a self caption, the paired control
    (for forced methods), and one box caption per retained box."""
    fd_self = forcing.ForcedDecode(policy=forcing.self_policy(),
                                   record=model.caption_image(image),
                                   scene_id=sid, box_index=None, category=None)
    decodes = [fd_self]
    if method == "self":
        return decodes
    uniform = attmaps.uniform_attention(model.hp.grid ** 2)
    if method == "control":
        # standalone control run; mirrors unlimited (or limited/additive
        # when --steps/--weight are given)
        mirror = "limited" if steps else ("additive" if weight else "unlimited")
        template = forcing.ForcingPolicy(mirror, steps=steps, weight=weight, target=uniform)
        decodes.append(forcing.run_control(model, image, template, scene_id=sid))
        return decodes
    template = forcing.ForcingPolicy(method, steps=steps, weight=weight, target=uniform)
    if with_control:
        decodes.append(forcing.run_control(model, image, template, scene_id=sid))
    for bi, box in boxes:
        decodes.append(forcing.run_box_caption(model, image, box, method,
                                               steps=steps, weight=weight,
                                               box_index=bi, scene_id=sid))
    return decodes


def cmd_force(args):
    if args.method == "limited" and args.steps is None:
        raise UsageError("--method limited requires --steps")
    if args.method == "additive" and args.weight is None:
        raise UsageError("--method additive requires --weight")
    model = _load_model(args.ckpt)
    manifest = _load_manifest(args.data)
    images = _scene_images(manifest)
    boxes_by_scene = _filtered_boxes(manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scene_ids = sorted(images)

    def work(sid):
        return _force_one(model, images[sid], sid, boxes_by_scene.get(sid, []),
                          args.method, args.steps, args.weight,
                          with_control=not args.no_control)

    n_threads = args.threads or _threads()
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            per_scene = list(pool.map(work, scene_ids))
    else:
        per_scene = [work(sid) for sid in scene_ids]
    order = {"self": 0, "control": 1}
    with open(out, "w", encoding="utf-8") as f:
        for decodes in per_scene:
            decodes.sort(key=lambda fd: (order.get(fd.policy.variant, 2),
                                         fd.box_index if fd.box_index is not None else -1))
            for fd in decodes:
                f.write(fd.to_json(with_alpha=args.dump_alpha) + "\n")
    _write_config(args, out, "force")
    n = sum(len(d) for d in per_scene)
    print(f"wrote {n} records to {out}")
    return EXIT_OK


def cmd_sweep(args):
    model = _load_model(args.ckpt)
    manifest = _load_manifest(args.data)
    rec = next((r for r in manifest.records if r.id == args.scene), None)
    if rec is None:
        raise DataError(f"scene {args.scene} not in dataset")
    if not 0 <= args.box < len(rec.boxes):
        raise DataError(f"scene {args.scene} has no box index {args.box}")
    b = rec.boxes[args.box]
    box = attmaps.BoundingBox(b["x"], b["y"], b["w"], b["h"], tuple(b["category"].split()))
    image = ppm.read_ppm(manifest.root / rec.image)
    try:
        decodes = forcing.sweep(model, image, box, args.mode, args.values,
                                scene_id=rec.id, box_index=args.box)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for fd in decodes:
            f.write(fd.to_json(with_alpha=True) + "\n")
    _write_config(args, out, "sweep")
    print(f"wrote {len(decodes)} sweep records to {out}")
    return EXIT_OK


def cmd_evaluate(args):
    for path in args.bundle:
        if not Path(path).exists():
            raise DataError(f"bundle file not found: {path}")
    bundle = evalsuite.load_bundle(args.bundle)
    if not bundle.box_captions:
        raise DataError("bundle contains no box captions")
    model = _load_model(args.ckpt)
    index = evalsuite.EmbeddingIndex.from_model(model)
    try:
        rows = evalsuite.combined_rows(bundle, index)
    except evalsuite.BundleError as e:
        raise DataError(str(e)) from e
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(evalsuite.rows_to_csv(rows), encoding="utf-8")
    tables = evalsuite.format_tables(rows)
    Path(str(out) + ".txt").write_text(tables, encoding="utf-8")
    _write_config(args, out, "evaluate")
    print(tables)
    return EXIT_OK


def cmd_render(args):
    manifest = _load_manifest(args.data)
    images = _scene_images(manifest)
    records = []
    with open(args.records, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(json.loads(line))
    if args.scene is not None:
        records = [r for r in records if r["scene"] == args.scene]
    if not records:
        raise DataError("no matching records to render")
    for r in records:
        if "alpha_used" not in r:
            raise DataError("records lack attention history; rerun with --dump-alpha")

    def to_record(r):
        return captioner.CaptionRecord(
            tokens=r["caption"],
            attention_history=[np.array(a) for a in r["alpha_used"]],
            policy=r["method"])

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.mode == "overlay":
        r = records[0]
        fig = render.overlay_figure(images[r["scene"]], to_record(r))
    elif args.mode == "stepwise":
        r = records[0]
        fig = render.stepwise_figure(images[r["scene"]], to_record(r))
    else:  # sweep: one panel per record
        panels = []
        for r in records:
            rec = to_record(r)
            label = r["method"] if r.get("param") is None else f"{r['method']}-{r['param']:g}"
            panels.append(render.panel(images[r["scene"]], rec.attention_history,
                                       f"{label} {' '.join(rec.tokens)}"))
        fig = render.panel_grid(panels)
    ppm.write_ppm(out, fig)
    _write_config(args, out, "render")
    print(f"wrote figure {out}")
    return EXIT_OK


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnforge",
                                description="Synthetic-scene attention forcing lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--canvas", type=int, default=56)
    g.add_argument("--out", required=True)
    g.add_argument("--split", choices=("train", "eval"), default="train")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the caption model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--lambda", dest="lam", type=float, nargs="+", default=[0.005])
    t.add_argument("--max-len", type=int, default=16)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("caption", help="self-attending captions for a dataset")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--dump-alpha", action="store_true")
    c.set_defaults(func=cmd_caption)

    f = sub.add_parser("force", help="box captions under a forcing method")
    f.add_argument("--method", choices=("unlimited", "limited", "additive", "self", "control"),
                   required=True)
    f.add_argument("--steps", type=int)
    f.add_argument("--weight", type=float)
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--no-control", action="store_true")
    f.add_argument("--dump-alpha", action="store_true")
    f.add_argument("--threads", type=int)
    f.set_defaults(func=cmd_force)

    s = sub.add_parser("sweep", help="parameter sweep on one (scene, box)")
    s.add_argument("--mode", choices=("limited", "additive"), required=True)
    s.add_argument("--values", type=float, nargs="+", required=True)
    s.add_argument("--scene", type=int, required=True)
    s.add_argument("--box", type=int, default=0)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("evaluate", help="sensitivity + controllability reports")
    e.add_argument("--bundle", nargs="+", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("render", help="attention overlay / stepwise / sweep figures")
    r.add_argument("--mode", choices=("overlay", "stepwise", "sweep"), required=True)
    r.add_argument("--records", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--scene", type=int)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
