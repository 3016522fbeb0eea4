"""Command-line entry point.

Commands: gen-data, extract-beats, train, sample, eval.  Exit code 0 on
success, 1 on a usage error (message on stderr), 2 on a runtime or I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import audio, metrics
from .conditioning import extract_beats
from .dataset import (build_dataset, frames_to_float, load_manifest, load_clips,
                      load_png, save_png)
from .network import (AnimationModel, CheckpointError, ModelConfig, checkpoint_hash,
                      load_checkpoint, topology_descriptor)
from .training import (GenerateConfig, generate_video, load_train_config,
                       train_stage1, train_stage2)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract here is 1 for usage errors.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    p = _Parser(prog="beatdiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic clip corpus")
    g.add_argument("--clips", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    e = sub.add_parser("extract-beats", help="print a JSON per-frame beat vector")
    e.add_argument("--audio", required=True)
    e.add_argument("--fps", type=float, required=True)
    e.add_argument("--frames", type=int, required=True)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="stage-1 checkpoint (required for --stage 2)")

    s = sub.add_parser("sample", help="generate a video from a trained model")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--audio", required=True)
    s.add_argument("--caption", required=True)
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--guidance", type=float, default=3.5)

    v = sub.add_parser("eval", help="compare generated frames against ground truth")
    v.add_argument("--pred", required=True)
    v.add_argument("--truth", required=True)
    v.add_argument("--out", required=True)
    return p


# ---- commands ------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    if args.clips < 1:
        raise _UsageError("--clips must be >= 1")
    manifest = build_dataset(args.clips, args.seed, args.out)
    print(f"wrote {len(manifest['entries'])} clips to {args.out}")
    return 0


def _cmd_extract_beats(args) -> int:
    if args.frames < 1 or args.fps <= 0:
        raise _UsageError("--frames must be >= 1 and --fps positive")
    bits = extract_beats(audio.load_wav(args.audio), args.fps, args.frames)
    print(json.dumps([int(b) for b in bits]))
    return 0


def _cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    if cfg.stage != args.stage:
        raise _UsageError(f"--stage {args.stage} but config says stage {cfg.stage}")
    if args.stage == 2 and not args.init:
        raise _UsageError("--stage 2 requires --init with a stage-1 checkpoint")
    clips = load_clips(args.data)
    log = print  # one tab-separated line per step: step, loss, lr, elapsed_ms
    if args.stage == 1:
        train_stage1(clips, cfg, log=log, checkpoint_path=args.out)
    else:
        train_stage2(clips, cfg, args.init, log=log, checkpoint_path=args.out)
    print(f"checkpoint written to {args.out}")
    return 0


def _load_mask(path) -> np.ndarray:
    arr = load_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.float32) / 255.0


def _cmd_sample(args) -> int:
    if args.frames < 1:
        raise _UsageError("--frames must be >= 1")
    model = load_checkpoint(args.ckpt)
    if model.stage != 2:
        raise RuntimeError(f"{args.ckpt} holds a stage-{model.stage} model; "
                           "sampling needs a stage-2 checkpoint")
    ref = frames_to_float(load_png(args.ref))
    mask = _load_mask(args.mask)
    w = audio.load_wav(args.audio)
    gcfg = GenerateConfig(seed=args.seed, guidance=args.guidance)
    frames = generate_video(model, ref, mask, w, args.caption, args.frames, gcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f in range(frames.shape[0]):
        save_png(out / f"frame_{f:05d}.png", frames[f])
    pils = [Image.fromarray(fr) for fr in frames]
    pils[0].save(out / "preview.gif", save_all=True, append_images=pils[1:],
                 duration=int(round(1000.0 / gcfg.fps)), loop=0)
    sidecar = {
        "seed": args.seed,
        "checkpoint": checkpoint_hash(args.ckpt),
        "config": {
            "frames": args.frames, "guidance": gcfg.guidance,
            "ddim_steps": gcfg.ddim_steps, "fps": gcfg.fps,
            "clip_frames": gcfg.clip_frames, "caption": args.caption,
            "model": topology_descriptor(model),
        },
    }
    (out / "sample.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n",
                                     encoding="utf-8")
    print(f"wrote {frames.shape[0]} frames to {out}")
    return 0


def _gather_side(path) -> list:
    """Resolve a --pred/--truth path to [(clip_id, frames, audio_path, fps)].

    Accepts a dataset root with a manifest, or a bare directory of
    frame_*.png files (a sample output dir)."""
    root = Path(path)
    if (root / "manifest.json").exists():
        out = []
        for entry in load_manifest(root)["entries"]:
            n = entry["frame_count"]
            frames = np.stack([
                load_png(root / entry["frame_dir"] / f"frame_{f:05d}.png")
                for f in range(n)])
            out.append((entry["clip_id"], frames, root / entry["audio_path"],
                        float(entry["fps"])))
        return out
    pngs = sorted(root.glob("frame_*.png"))
    if not pngs:
        raise RuntimeError(f"{path}: no manifest.json and no frame_*.png files")
    frames = np.stack([load_png(p) for p in pngs])
    wav = root / "audio.wav"
    fps = None
    sidecar = root / "sample.json"
    if sidecar.exists():
        fps = json.loads(sidecar.read_text(encoding="utf-8")).get("config", {}).get("fps")
    return [(root.name, frames, wav if wav.exists() else None,
             float(fps) if fps else None)]


def _pair_sides(pred, truth) -> list:
    if len(pred) == 1 and len(truth) == 1:
        return [(pred[0], truth[0])]
    by_id = {p[0]: p for p in pred}
    pairs = [(by_id[t[0]], t) for t in truth if t[0] in by_id]
    if not pairs:
        raise RuntimeError("no clip ids in common between --pred and --truth")
    return pairs


def _cmd_eval(args) -> int:
    pred = _gather_side(args.pred)
    truth = _gather_side(args.truth)
    # Feature extractor for the distribution distance: a fixed seeded stage-1
    # model, so scores are comparable across runs of this artifact only.
    feat_model = AnimationModel(ModelConfig(), stage=1, init_seed=0)
    rows = []
    for (pid, pf, _pa, pfps), (tid, tf, ta, tfps) in _pair_sides(pred, truth):
        n = min(pf.shape[0], tf.shape[0])
        if n < 3:
            raise RuntimeError(f"clip {tid}: need at least 3 comparable frames, got {n}")
        if pf.shape[1:] != tf.shape[1:]:
            raise RuntimeError(f"clip {tid}: frame shapes differ, "
                               f"{pf.shape[1:]} vs {tf.shape[1:]}")
        a, b = pf[:n], tf[:n]
        fps = tfps or pfps or 12.0
        wav_path = ta if ta is not None else _pa
        align = None
        if wav_path is not None and Path(wav_path).exists():
            bits = extract_beats(audio.load_wav(wav_path), fps, n)
            align = metrics.beat_alignment_score(a, bits)
        report = metrics.MetricReport(
            psnr_db=metrics.psnr(a, b),
            ssim=float(np.mean([metrics.ssim(a[f], b[f]) for f in range(n)])),
            frechet=metrics.frechet_feature_distance(
                metrics.video_features(feat_model, a),
                metrics.video_features(feat_model, b)),
            beat_alignment=align,
            n_frames=n)
        rows.append({"clip_id": tid, **report.to_dict()})
    means = {}
    for key in ("psnr_db", "ssim", "frechet", "beat_alignment"):
        vals = [r[key] for r in rows if r[key] is not None]
        means[key] = float(np.mean(vals)) if vals else None
    out = {"clips": rows, "mean": means}
    Path(args.out).write_text(json.dumps(out, sort_keys=True, indent=2) + "\n",
                              encoding="utf-8")
    print(f"evaluated {len(rows)} clip(s); report at {args.out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "extract-beats": _cmd_extract_beats,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        print(f"beatdiff {args.command}: error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError, CheckpointError, KeyError) as e:
        print(f"beatdiff {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
