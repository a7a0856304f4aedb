"""Command-line entry point.

Subcommands: gen-data, train, infer, eval, bench. Every command takes
--config PATH, repeatable --set KEY=VALUE overrides, --seed, and --out DIR.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite loss, or a complexity claim missed its slope bound).

LSTA_THREADS caps internal numeric parallelism; it is exported to the BLAS
thread knobs before numpy loads, which is why the heavyweight imports live
inside main(). The bench subcommand always pins timing to one thread.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_THREAD_KNOBS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS")


def _configure_threads(argv) -> None:
    cap = os.environ.get("LSTA_THREADS")
    if argv and argv[0] == "bench":
        cap = "1"
    if cap is not None:
        for knob in _THREAD_KNOBS:
            os.environ.setdefault(knob, cap)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lsta",
        description="long-short temporal attention: synthetic-video segmentation "
                    "pipeline and attention complexity benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", dest="sets",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", default="out", help="output directory")

    common(sub.add_parser("gen-data", help="write a synthetic clip dataset"))
    p_train = sub.add_parser("train", help="train on a generated dataset")
    common(p_train)
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_infer = sub.add_parser("infer", help="predict masks for one clip")
    common(p_infer)
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--clip", required=True, help="directory of frame .ppm files")
    p_eval = sub.add_parser("eval", help="score predictions against ground truth")
    common(p_eval)
    p_eval.add_argument("--pred", required=True, help="directory of predicted mask trees")
    p_eval.add_argument("--gt", required=True, help="directory of ground-truth mask trees")
    common(sub.add_parser("bench", help="attention complexity benchmark"))
    return parser


def _load_config(args):
    from . import config as cfgmod

    cfg = cfgmod.RunConfig()
    if args.config:
        cfg = cfgmod.load_config(args.config, cfg)
    cfg = cfgmod.apply_overrides(cfg, args.sets)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfgmod.validate(cfg)


# ---------------------------------------------------------------------------

def cmd_gen_data(cfg, out_dir: str) -> int:
    from . import data, pnm
    from .ioutil import atomic_write_text
    from .rng import Rng

    os.makedirs(out_dir, exist_ok=True)
    root = Rng(cfg.seed)
    manifest_lines = []
    for ci in range(cfg.n_clips):
        clip_rng = root.split(("clip", ci))
        spec = data.random_scene_spec((cfg.height, cfg.width), cfg.clip_len, clip_rng,
                                      occluder_prob=cfg.occluder_prob)
        clip = data.generate_clip(spec, cfg.clip_len, clip_rng.split("render"))
        clip_name = f"clip_{ci:03d}"
        clip_dir = os.path.join(out_dir, clip_name)
        os.makedirs(clip_dir, exist_ok=True)
        for fi, (frame, mask) in enumerate(zip(clip.frames, clip.masks)):
            frame_rel = f"{clip_name}/frame_{fi:03d}.ppm"
            mask_rel = f"{clip_name}/mask_{fi:03d}.pgm"
            pnm.save_frame(os.path.join(out_dir, frame_rel), frame)
            pnm.save_mask(os.path.join(out_dir, mask_rel), mask)
            manifest_lines.append(f"{frame_rel} {mask_rel} {ci} {fi}")
    # manifest last: its presence marks a complete dataset
    atomic_write_text(os.path.join(out_dir, "manifest.txt"),
                      "\n".join(manifest_lines) + "\n")
    print(f"wrote {cfg.n_clips} clips x {cfg.clip_len} frames to {out_dir}")
    return EXIT_OK


def load_dataset(data_dir: str):
    """[(frames, masks)] per clip, decoded from a gen-data manifest."""
    from . import pnm

    manifest = os.path.join(data_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    clips = {}
    with open(manifest, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"malformed manifest line: {line!r}")
            frame_rel, mask_rel, clip_id, frame_idx = parts
            clips.setdefault(int(clip_id), []).append((int(frame_idx), frame_rel, mask_rel))
    dataset = []
    for clip_id in sorted(clips):
        entries = sorted(clips[clip_id])
        frames = [pnm.load_frame(os.path.join(data_dir, fr)) for _, fr, _ in entries]
        masks = [pnm.load_mask(os.path.join(data_dir, mr)) for _, _, mr in entries]
        dataset.append((frames, masks))
    return dataset


def cmd_train(cfg, out_dir: str, resume: str = None) -> int:
    import numpy as np

    from . import config as cfgmod
    from . import data, model
    from .ioutil import atomic_write_text
    from .rng import Rng

    if cfg.clip_len <= cfg.n_past:
        raise cfgmod.ConfigError(
            f"clip_len {cfg.clip_len} must exceed n_past {cfg.n_past} for bin selection")
    dataset = load_dataset(cfg.data_dir)
    os.makedirs(out_dir, exist_ok=True)

    opt_state = {}
    start_iter = 0
    if resume:
        params, meta, opt_state = model.load_checkpoint(resume)
        start_iter = int(meta.get("iteration", 0))
        print(f"resumed from {resume} at iteration {start_iter}")
    else:
        params = model.ModelParams.initialize(cfgmod.model_config(cfg), Rng(cfg.seed).split("init"))
    hyper = cfgmod.hyper(cfg)

    soft_cache = {}

    def soft_labels(ci, t):
        key = (ci, t)
        if key not in soft_cache:
            soft_cache[key] = data.teacher_soft_labels(dataset[ci][1][t - 1], cfg.blur_radius)
        return soft_cache[key]

    log_rows = ["iteration,loss"]
    log_path = os.path.join(out_dir, "loss_log.csv")
    final_path = os.path.join(out_dir, "model.ckpt")

    def write_checkpoint(step):
        model.save_checkpoint(os.path.join(out_dir, f"ckpt_{step:06d}.ckpt"), params,
                              extra={"iteration": str(step)}, opt_state=opt_state)
        atomic_write_text(log_path, "\n".join(log_rows) + "\n")

    train_root = Rng(cfg.seed).split("train")
    for it in range(start_iter + 1, cfg.iterations + 1):
        step_rng = train_root.split(it)
        windows, clip_frames, targets, softs = [], [], [], []
        for b in range(cfg.batch_size):
            r = step_rng.split(("sample", b))
            ci = int(r.integers(0, len(dataset)))
            frames, masks = dataset[ci]
            t = int(r.integers(cfg.n_past + 1, len(frames) + 1))
            windows.append(model.select_past_frames(t, len(frames), cfg.n_past,
                                                    model.TRAIN_BINS, r.split("bins")))
            clip_frames.append(frames)
            targets.append(masks[t - 1])
            softs.append(soft_labels(ci, t))
        try:
            loss = model.train_step(windows, clip_frames, targets, softs, params,
                                    hyper, step_rng.split("forward"), opt_state)
        except model.TrainingError:
            write_checkpoint(it - 1)  # keep the last good state
            raise
        log_rows.append(f"{it},{loss:.6f}")
        if it % cfg.checkpoint_interval == 0:
            write_checkpoint(it)
        if it % max(cfg.checkpoint_interval // 5, 1) == 0 or it == 1:
            print(f"iter {it}: loss {loss:.4f}")

    model.save_checkpoint(final_path, params,
                          extra={"iteration": str(cfg.iterations)}, opt_state=opt_state)
    atomic_write_text(log_path, "\n".join(log_rows) + "\n")
    print(f"finished {cfg.iterations} iterations; checkpoint at {final_path}")
    return EXIT_OK


def cmd_infer(cfg, out_dir: str, checkpoint: str, clip_dir: str) -> int:
    from . import model, pnm
    from .ioutil import atomic_write_text

    frame_paths = sorted(
        os.path.join(clip_dir, f) for f in os.listdir(clip_dir) if f.endswith(".ppm"))
    if len(frame_paths) < 2:
        raise ValueError(f"clip {clip_dir} has {len(frame_paths)} frames; need at least 2")
    frames = [pnm.load_frame(p) for p in frame_paths]
    params, _, _ = model.load_checkpoint(checkpoint)

    masks, fps = model.infer_clip(frames, params, seed=cfg.seed)
    os.makedirs(out_dir, exist_ok=True)
    for i, mask in enumerate(masks):
        pnm.save_mask(os.path.join(out_dir, f"mask_{i:03d}.pgm"), mask)
    atomic_write_text(os.path.join(out_dir, "fps.txt"), f"{fps:.3f}\n")
    print(f"{len(masks)} masks -> {out_dir} at {fps:.2f} frames/s")
    return EXIT_OK


def _mask_files(directory):
    return sorted(os.path.join(directory, f) for f in os.listdir(directory)
                  if f.endswith(".pgm"))


def cmd_eval(cfg, out_dir: str, pred_dir: str, gt_dir: str) -> int:
    from . import metrics, pnm
    from .ioutil import atomic_write_text

    def clip_dirs(root):
        subs = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
        if subs:
            return {d: _mask_files(os.path.join(root, d)) for d in subs}
        return {os.path.basename(os.path.normpath(root)): _mask_files(root)}

    preds, gts = clip_dirs(pred_dir), clip_dirs(gt_dir)
    shared = sorted(set(preds) & set(gts))
    if not shared:
        raise ValueError(f"no clip names shared between {pred_dir} and {gt_dir}")
    mismatched = [name for name in shared if len(preds[name]) != len(gts[name])]
    if mismatched:
        detail = ", ".join(f"{n} ({len(preds[n])} vs {len(gts[n])})" for n in mismatched)
        raise ValueError(f"frame counts differ for clips: {detail}")

    fps_values = []
    for name in shared:
        fps_file = os.path.join(pred_dir, name, "fps.txt")
        if os.path.exists(fps_file):
            with open(fps_file) as f:
                fps_values.append(float(f.read().strip()))
    fps = sum(fps_values) / len(fps_values) if fps_values else None

    triples = [(name,
                [pnm.load_mask(p) for p in preds[name]],
                [pnm.load_mask(p) for p in gts[name]]) for name in shared]
    report = metrics.evaluate_clips(triples, tol_px=cfg.tol_px, fps=fps)

    lines = ["clip,j,f,jf"]
    for c in report.clips:
        lines.append(f"{c.name},{c.j:.6f},{c.f:.6f},{(c.j + c.f) / 2:.6f}")
    lines.append(f"mean,{report.mean_j:.6f},{report.mean_f:.6f},{report.jf_mean:.6f}")
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "eval.csv"), "\n".join(lines) + "\n")
    print("\n".join(report.summary_lines()))
    return EXIT_OK


def cmd_bench(cfg, out_dir: str) -> int:
    from . import bench
    from . import config as cfgmod
    from .ioutil import atomic_write_text

    report = bench.run_benchmark(
        sizes_linear=cfgmod.parse_size_list(cfg.bench_sizes_linear, "bench_sizes_linear"),
        sizes_exact=cfgmod.parse_size_list(cfg.bench_sizes_exact, "bench_sizes_exact"),
        c=cfg.bench_c, k=cfg.bench_k, d=cfg.bench_d,
        repeats=cfg.bench_repeats, seed=cfg.seed,
    )
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "bench.csv"), bench.report_csv(report))
    atomic_write_text(os.path.join(out_dir, "bench.md"), bench.report_markdown(report))
    print(bench.report_markdown(report))
    if report.unreliable_rows():
        print("warning: some timings varied by more than 20%; rerun advised", file=sys.stderr)
    return EXIT_OK if report.all_pass else EXIT_NUMERIC


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    _configure_threads(argv)
    args = _build_parser().parse_args(argv)

    from . import config as cfgmod
    from . import model, pnm
    from .data import SceneError

    try:
        cfg = _load_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out, resume=args.resume)
        if args.command == "infer":
            return cmd_infer(cfg, args.out, args.checkpoint, args.clip)
        if args.command == "eval":
            return cmd_eval(cfg, args.out, args.pred, args.gt)
        if args.command == "bench":
            return cmd_bench(cfg, args.out)
        raise AssertionError(f"unhandled command {args.command}")
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pnm.PnmError, SceneError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except model.TrainingError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
