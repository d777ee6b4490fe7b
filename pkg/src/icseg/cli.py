"""Command-line entry points for the full lifecycle.

Subcommands: gen, train, eval, predict, tune, vos, serve, ablate.  Config
files are flat `key = value` text with ModelConfig/TrainConfig field names;
any key can be overridden with a `--key value` flag.  Every run writes a
JSON manifest (resolved config, seed, checkpoint hash, wall clock, metric
outputs) atomically to the output directory.

Exit codes: 0 ok, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import pngio
from .data import (
    Dataset,
    MixtureSpec,
    SamplerConfig,
    ShapeGenConfig,
    category_map,
    gen_shapes_sample,
    gen_shapes_sequence,
    load_dataset,
    mixture_sampler,
)
from .inference import DEFAULT_VOS_FRAMES, FEATURE, SINGLE, SPATIAL, EnsembleSpec, predict, vos_run
from .metrics import ConfusionTally, fb_iou, jf_score, miou
from .model import ModelConfig, init_model, load_model, save_checkpoint
from .palette import CATEGORY, INSTANCE, Palette, recolor, sample_palette
from .train import PromptTuneTask, TrainConfig, fit, tune_prompt


class ConfigError(ValueError):
    pass


MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}


def parse_config_text(text: str) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(name: str, value: str, kind: type) -> object:
    if kind is bool:
        return value.lower() in ("1", "true", "yes")
    if name == "betas":
        parts = [float(p) for p in value.replace("(", "").replace(")", "").split(",") if p.strip()]
        if len(parts) != 2:
            raise ConfigError(f"betas needs two values, got {value!r}")
        return tuple(parts)
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r} ({exc})")


def build_configs(raw: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    model_kw: dict = {}
    train_kw: dict = {}
    for key, value in raw.items():
        if key in MODEL_FIELDS:
            model_kw[key] = _coerce(key, value, int)
        elif key in TRAIN_FIELDS:
            kind = float if key in ("base_lr", "weight_decay", "eps") else int
            if key == "betas":
                kind = tuple
            train_kw[key] = _coerce(key, value, kind)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc))


def load_configs(path: str | None, overrides: list[str]) -> tuple[ModelConfig, TrainConfig, dict]:
    raw = parse_config_text(Path(path).read_text()) if path else {}
    if len(overrides) % 2:
        raise ConfigError(f"dangling override flag: {overrides[-1]}")
    for flag, value in zip(overrides[::2], overrides[1::2]):
        if not flag.startswith("--"):
            raise ConfigError(f"expected --key value overrides, got {flag!r}")
        raw[flag[2:].replace("-", "_")] = value
    model_cfg, train_cfg = build_configs(raw)
    return model_cfg, train_cfg, raw


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, metrics: dict, t0: float, checkpoint: str | Path | None = None) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "checkpoint_sha256": sha256_file(checkpoint) if checkpoint else None,
        "wall_clock_s": round(time.time() - t0, 3),
        "metrics": metrics,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, path)
    return path


def default_datasets(size: int, n: int, seed: int) -> dict[str, Dataset]:
    """Synthetic category- and instance-task pools."""
    spec = ShapeGenConfig(size=size)
    rng = np.random.default_rng(seed)
    return {
        "shapes_cat": Dataset("shapes_cat", CATEGORY, [gen_shapes_sample(spec, rng, "shapes_cat") for _ in range(n)]),
        "shapes_inst": Dataset("shapes_inst", INSTANCE, [gen_shapes_sample(spec, rng, "shapes_inst") for _ in range(n)]),
    }


def resolve_datasets(data_root: str | None, size: int, n: int, seed: int) -> dict[str, Dataset]:
    if data_root is None:
        return default_datasets(size, n, seed)
    root = Path(data_root)
    tags = sorted(p.parent.name for p in root.glob("*/meta.json"))
    if not tags:
        raise ConfigError(f"no datasets under {root}")
    return {tag: load_dataset(root, tag) for tag in tags}


def equal_mixture(datasets: dict[str, Dataset]) -> MixtureSpec:
    tags = sorted(datasets)
    w = 1.0 / len(tags)
    weights = tuple((t, w) for t in tags)
    # Nudge the first weight so float error cannot break the sum-to-1 check.
    total = sum(x for _, x in weights)
    weights = ((tags[0], w + (1.0 - total)),) + weights[1:]
    return MixtureSpec(weights=weights)


def load_examples_dir(path: str | Path) -> tuple[list[tuple[np.ndarray, np.ndarray]], Palette]:
    """Example directory: `*_source.png` + `*_target.png` pairs + palette.json."""
    base = Path(path)
    palette = Palette.from_json((base / "palette.json").read_text())
    pairs = []
    for src_path in sorted(base.glob("*_source.png")):
        tgt_path = base / src_path.name.replace("_source.png", "_target.png")
        if not tgt_path.exists():
            raise ConfigError(f"missing target for {src_path.name}")
        pairs.append((pngio.load_image(src_path), pngio.load_image(tgt_path)))
    if not pairs:
        raise ConfigError(f"no *_source.png examples in {base}")
    return pairs, palette


def cmd_gen(args, overrides) -> int:
    t0 = time.time()
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    spec = ShapeGenConfig(size=args.size)
    kinds = {"shapes_cat": CATEGORY, "shapes_inst": INSTANCE} if args.tag is None else {args.tag: args.kind}
    counts = {}
    for tag, kind in kinds.items():
        samples = [gen_shapes_sample(spec, rng, tag) for _ in range(args.n)]
        from .data import save_dataset

        save_dataset(Dataset(tag, kind, samples), out)
        counts[tag] = len(samples)
    write_manifest(out, "gen", {"n": args.n, "size": args.size}, args.seed, {"samples": counts}, t0)
    return 0


def cmd_train(args, overrides) -> int:
    t0 = time.time()
    model_cfg, train_cfg, raw = load_configs(args.config, overrides)
    if args.seed is not None:
        train_cfg = TrainConfig(**{**asdict(train_cfg), "seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = model_cfg.image_side
    datasets = resolve_datasets(args.data, size, args.pool_size, train_cfg.seed)
    mixture = equal_mixture(datasets)
    sampler_cfg = SamplerConfig(image_size=size, patch=model_cfg.patch, mask_ratio=args.mask_ratio)
    stream = mixture_sampler(mixture, datasets, np.random.default_rng(train_cfg.seed), sampler_cfg)
    model = init_model(model_cfg)
    log_path = out / "train.log"
    with log_path.open("w") as fh:

        def log(line: str) -> None:
            print(line)
            fh.write(line + "\n")

        history = fit(model, stream, train_cfg, log=log, log_every=args.log_every,
                      out_dir=out, checkpoint_every=args.checkpoint_every)
    ckpt = out / "model.ckpt"
    save_checkpoint(model, ckpt, extra={"steps": train_cfg.total_steps})
    metrics = {"final_loss": history[-1][2], "steps": len(history)}
    write_manifest(out, "train", {**raw, "mask_ratio": args.mask_ratio}, train_cfg.seed, metrics, t0, checkpoint=ckpt)
    return 0


def cmd_eval(args, overrides) -> int:
    """Score a directory of predicted maps against ground-truth maps."""
    t0 = time.time()
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    out = Path(args.out)
    names = sorted(p.name for p in gt_dir.glob("*.png"))
    if not names:
        raise ConfigError(f"no ground-truth maps in {gt_dir}")
    tally = ConfusionTally()
    classes: set[int] = set()
    pairs = []
    for name in names:
        gt = pngio.load_map(gt_dir / name)
        pred_path = pred_dir / name
        if not pred_path.exists():
            raise ConfigError(f"missing prediction {pred_path}")
        pred = pngio.load_map(pred_path)
        classes |= set(np.unique(gt.ids).tolist()) | set(np.unique(pred.ids).tolist())
        pairs.append((pred.ids, gt.ids))
    for pred_ids, gt_ids in pairs:
        tally.add(pred_ids, gt_ids, sorted(classes))
    fg = [(p > 0, g > 0) for p, g in pairs]
    report = {
        "per_class_iou": {str(k): v for k, v in tally.per_class_iou().items()},
        "miou": tally.miou(),
        "fb_iou": fb_iou([p for p, _ in fg], [g for _, g in fg]),
        "frames": len(pairs),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"mIoU={report['miou']:.4f} FB-IoU={report['fb_iou']:.4f} over {len(pairs)} maps")
    write_manifest(out, "eval", {"pred": str(pred_dir), "gt": str(gt_dir)}, args.seed, report, t0)
    return 0


def cmd_predict(args, overrides) -> int:
    t0 = time.time()
    model = load_model(args.checkpoint)
    examples, palette = load_examples_dir(args.examples)
    query = pngio.load_image(args.query)
    if args.strategy == SINGLE:
        examples = examples[:1]
    grid_n = args.grid_n or int(np.ceil(np.sqrt(len(examples))))
    spec = EnsembleSpec(strategy=args.strategy, examples=examples, grid_n=grid_n)
    segmap = predict(model, spec, query, args.task_kind, palette)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pngio.save_map(out / "mask.png", segmap)
    pngio.save_image(out / "prediction.png", recolor(segmap, palette))
    metrics = {"ids_predicted": sorted(segmap.id_set())}
    write_manifest(out, "predict", {"strategy": args.strategy, "grid_n": grid_n, "task_kind": args.task_kind},
                   args.seed, metrics, t0, checkpoint=args.checkpoint)
    return 0


def _tune_queries(datasets: dict[str, Dataset], category: int, palette: Palette, n: int):
    queries = []
    for ds in datasets.values():
        for sample in ds.samples:
            cmap = category_map(sample).restrict([category])
            if cmap.id_set():
                queries.append((sample.source, cmap))
            if len(queries) >= n:
                return queries
    return queries


def cmd_tune(args, overrides) -> int:
    t0 = time.time()
    _, train_cfg, raw = load_configs(args.config, overrides)
    model = load_model(args.checkpoint)
    size = model.cfg.image_side
    datasets = resolve_datasets(args.data, size, args.pool_size, args.seed)
    rng = np.random.default_rng(args.seed)
    palette = sample_palette({args.category}, rng)
    queries = _tune_queries(datasets, args.category, palette, args.queries)
    if not queries:
        raise ConfigError(f"no samples contain category {args.category}")
    task = PromptTuneTask(palette=palette, queries=queries, task_kind=CATEGORY)
    prompt = tune_prompt(model, task, steps=args.steps, cfg=train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src, tgt = prompt.as_images()
    pngio.save_image(out / "prompt_source.png", src)
    pngio.save_image(out / "prompt_target.png", tgt)
    (out / "palette.json").write_text(palette.to_json())
    write_manifest(out, "tune", {**raw, "steps": args.steps, "category": args.category}, args.seed,
                   {"queries": len(queries)}, t0, checkpoint=args.checkpoint)
    return 0


def cmd_vos(args, overrides) -> int:
    t0 = time.time()
    model = load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.frames_dir:
        frame_paths = sorted(Path(args.frames_dir).glob("*.png"))
        frames = [pngio.load_image(p) for p in frame_paths]
        first_mask = pngio.load_map(args.first_mask, kind=INSTANCE)
        gt = [pngio.load_map(p, kind=INSTANCE) for p in sorted(Path(args.gt).glob("*.png"))] if args.gt else None
    else:
        spec = ShapeGenConfig(size=model.cfg.image_side)
        video = gen_shapes_sequence(spec, args.length, np.random.default_rng(args.seed))
        frames = [f.source for f in video.frames]
        gt = [f.map for f in video.frames]
        first_mask = gt[0]
    preds = vos_run(model, frames, first_mask, args.k_frames, seed=args.seed)
    for i, p in enumerate(preds):
        pngio.save_map(out / f"{i}.png", p)
    summary: dict = {"frames": len(preds), "k_frames": args.k_frames}
    if gt is not None:
        j, f, jf = jf_score([p.ids for p in preds], [g.ids for g in gt])
        per_frame = []
        for t in range(1, len(preds)):
            jt, ft, _ = jf_score([gt[0].ids, preds[t].ids], [gt[0].ids, gt[t].ids])
            per_frame.append({"frame": t, "J": jt, "F": ft})
        summary.update({"J": j, "F": f, "J&F": jf, "per_frame": per_frame})
        print(f"J={j:.4f} F={f:.4f} J&F={jf:.4f}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_manifest(out, "vos", {"k_frames": args.k_frames}, args.seed,
                   {k: v for k, v in summary.items() if k != "per_frame"}, t0, checkpoint=args.checkpoint)
    return 0


def benchmark_episodes(size: int, n_episodes: int, max_examples: int, seed: int):
    """Category episodes on synthetic data, one class per episode.

    Queries are fixed by `seed`; each episode carries `max_examples`
    examples so different example counts can be compared on identical
    queries by taking prefixes.
    """
    spec = ShapeGenConfig(size=size)
    rng = np.random.default_rng(seed)
    episodes = []
    while len(episodes) < n_episodes:
        query = gen_shapes_sample(spec, rng)
        qmap = category_map(query)
        cats = sorted(qmap.id_set())
        if not cats:
            continue
        chosen = [int(rng.choice(cats))]
        palette = sample_palette(chosen, rng)
        examples = []
        tries = 0
        while len(examples) < max_examples and tries < 2000:
            tries += 1
            cand = gen_shapes_sample(spec, rng)
            cmap = category_map(cand)
            if chosen[0] not in cmap.id_set():
                continue
            examples.append((cand.source, recolor(cmap.restrict(chosen), palette)))
        episodes.append((examples, query.source, qmap.restrict(chosen), palette, chosen))
    return episodes


def episode_scores(model, episodes, strategy, n_examples, grid_n=0):
    """Mean mIoU and FB-IoU using the first n_examples of each episode."""
    mious, fbs = [], []
    for examples, query, gt, palette, classes in episodes:
        spec = EnsembleSpec(strategy=strategy, examples=list(examples[:n_examples]), grid_n=grid_n or 1)
        segmap = predict(model, spec, query, CATEGORY, palette)
        mious.append(miou(segmap.ids, gt.ids, classes))
        fbs.append(fb_iou(segmap.ids > 0, gt.ids > 0))
    return float(np.mean(mious)), float(np.mean(fbs))


def _vos_benchmark(model, k: int, n_videos: int, length: int, seed: int, strategy: str = FEATURE):
    spec = ShapeGenConfig(size=model.cfg.image_side)
    rng = np.random.default_rng(seed)
    if k == 1:
        strategy = SINGLE
    js, fs, jfs = [], [], []
    for _ in range(n_videos):
        video = gen_shapes_sequence(spec, length, rng)
        frames = [f.source for f in video.frames]
        gt = [f.map for f in video.frames]
        preds = vos_run(model, frames, gt[0], k, strategy=strategy, seed=seed)
        j, f, jf = jf_score([p.ids for p in preds], [g.ids for g in gt])
        js.append(j), fs.append(f), jfs.append(jf)
    return float(np.mean(js)), float(np.mean(fs)), float(np.mean(jfs))


def cmd_ablate(args, overrides) -> int:
    """Sweep ensemble strategies and VOS frame counts; emit two CSV tables."""
    t0 = time.time()
    model = load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = model.cfg.image_side

    # Table (a): examples x ensemble strategy, scored on both the video and
    # the still-image synthetic benchmarks (same episodes across rows).
    rows_a = [(1, SINGLE), (4, SPATIAL), (4, FEATURE), (8, FEATURE)]
    episodes = benchmark_episodes(size, args.episodes, max_examples=8, seed=args.seed)
    ensemble_csv = out / "ensemble.csv"
    with ensemble_csv.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["examples", "ensemble", "jf", "j", "f", "miou", "fb_iou"])
        for n_ex, strategy in rows_a:
            grid_n = int(np.ceil(np.sqrt(n_ex)))
            m, fb = episode_scores(model, episodes, strategy, n_ex, grid_n=grid_n)
            j, f, jf = _vos_benchmark(model, n_ex, args.videos, args.length, args.seed, strategy=strategy)
            writer.writerow([n_ex, strategy, f"{jf:.4f}", f"{j:.4f}", f"{f:.4f}", f"{m:.4f}", f"{fb:.4f}"])

    # Table (b): frame count sweep.
    frames_csv = out / "frames.csv"
    ks = [int(k) for k in args.frames.split(",")]
    with frames_csv.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frames", "jf", "j", "f"])
        for k in ks:
            j, f, jf = _vos_benchmark(model, k, args.videos, args.length, args.seed)
            writer.writerow([k, f"{jf:.4f}", f"{j:.4f}", f"{f:.4f}"])

    metrics = {"ensemble_csv": str(ensemble_csv), "frames_csv": str(frames_csv), "frame_grid": ks}
    write_manifest(out, "ablate", {"frames": args.frames, "episodes": args.episodes,
                                   "videos": args.videos, "length": args.length},
                   args.seed, metrics, t0, checkpoint=args.checkpoint)
    print(f"wrote {ensemble_csv} and {frames_csv}")
    return 0


def cmd_serve(args, overrides) -> int:
    import uvicorn

    from .service import create_app

    model = load_model(args.checkpoint) if args.checkpoint else init_model(ModelConfig())
    model_id = Path(args.checkpoint).stem if args.checkpoint else "untrained"
    app = create_app({model_id: model}, persist_dir=args.persist_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icseg", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("gen", help="generate a synthetic dataset on disk")
    common(p)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--tag", default=None)
    p.add_argument("--kind", choices=[CATEGORY, INSTANCE], default=CATEGORY)

    p = sub.add_parser("train", help="train a model on the canvas stream")
    common(p)
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None, help="dataset root (default: synthetic)")
    p.add_argument("--pool-size", type=int, default=240)
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(seed=None)

    p = sub.add_parser("eval", help="score predicted maps against ground truth")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)

    p = sub.add_parser("predict", help="one in-context prediction")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--strategy", choices=[SINGLE, SPATIAL, FEATURE], default=SINGLE)
    p.add_argument("--grid-n", type=int, default=0)
    p.add_argument("--task-kind", choices=[CATEGORY, INSTANCE], default=CATEGORY)

    p = sub.add_parser("tune", help="prompt-tune a frozen checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--pool-size", type=int, default=64)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--queries", type=int, default=16)
    p.add_argument("--category", type=int, default=1)

    p = sub.add_parser("vos", help="propagate a first-frame mask through a video")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k-frames", type=int, default=DEFAULT_VOS_FRAMES)
    p.add_argument("--frames-dir", default=None)
    p.add_argument("--first-mask", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--length", type=int, default=8, help="synthetic video length")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--persist-dir", default=None)

    p = sub.add_parser("ablate", help="ensemble-strategy and frame-count sweeps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", default="1,4,8,12,16")
    p.add_argument("--episodes", type=int, default=16)
    p.add_argument("--videos", type=int, default=3)
    p.add_argument("--length", type=int, default=6)
    return parser


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "tune": cmd_tune,
    "vos": cmd_vos,
    "serve": cmd_serve,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, overrides = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return COMMANDS[args.command](args, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
