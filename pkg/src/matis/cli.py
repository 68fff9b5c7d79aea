"""Command-line entry point: ``matis <command> ...``.

Every command writes its output atomically plus a ``*.manifest.json``
next to it. Failures print ``{"error": kind, "message": ...}`` on stderr
and exit nonzero (2 for bad configuration).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, MatisError, MissingInput, VersionMismatch
from .io import (
    RunManifest,
    Timer,
    atomic_output,
    read_annotations,
    read_dataset,
    read_jsonl,
    read_proposals,
    read_regions,
    write_dataset,
    write_proposals,
    write_regions,
)

log = logging.getLogger("matis")

EXIT_CODES = {ConfigInvalid: 2, MissingInput: 3, VersionMismatch: 4}


def _load_json(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"config file {p} does not exist")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{p} is not valid JSON: {exc}") from exc


def _build(cls, doc: dict):
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigInvalid(f"bad {cls.__name__} fields: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, MatisError):
            raise
        raise ConfigInvalid(str(exc)) from exc


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _finish(args, out: Path, config: dict, inputs: list, timer: Timer, extra=None) -> None:
    m = RunManifest(args.command, config, [str(p) for p in inputs], [str(out)], args.seed, duration_s=round(timer.seconds, 3), extra=extra or {})
    m.write(_manifest_path(out))


def _annotations(path):
    p = Path(path)
    if p.is_dir():
        return read_dataset(p).annotations
    return read_annotations(p)


def _dump_report(report, out: Path, class_names=None, label="run") -> str:
    from .metrics import format_table

    out.write_text(json.dumps(report.to_json(), indent=1))
    return format_table([(label, report)], class_names)


# commands --------------------------------------------------------------------


def cmd_synth(args) -> None:
    from .synth import SynthConfig, gen_frames, gen_video

    doc = _load_json(args.config)
    doc["seed"] = args.seed
    for key in ("height", "width"):
        if getattr(args, key) is not None:
            doc[key] = getattr(args, key)
    if args.video_length is not None:
        doc["video_length"] = args.video_length
    cfg = _build(SynthConfig, doc)
    out = Path(args.out)
    with Timer() as timer, atomic_output(out) as tmp:
        extra = {}
        if args.videos:
            anns, imgs, videos = [], [], []
            for v in range(args.start, args.start + args.videos):
                sv = gen_video(cfg, v)
                anns += sv.annotations
                imgs.append(sv.images)
                videos.append({"video": sv.video, "frames": [a.frame for a in sv.annotations], "schedule": sv.schedule, "track_classes": sv.track_classes})
            imgs = np.concatenate(imgs)
            extra["videos"] = videos
        else:
            anns, imgs = gen_frames(cfg, args.frames, args.start)
        write_dataset(tmp, anns, imgs, cfg.to_json(), cfg.class_table(), cfg.multi_instance_flags(), extra)
    _finish(args, out, cfg.to_json(), [], timer, {"frames": len(anns)})
    print(f"wrote {len(anns)} frames to {out}")


def cmd_train(args) -> None:
    from .model import ToyModelConfig, save_checkpoint
    from .train import OptimConfig, train_toy

    ds = read_dataset(args.data)
    mdoc = _load_json(args.config)
    mdoc.setdefault("num_classes", ds.num_classes)
    mdoc["height"], mdoc["width"] = ds.annotations[0].dims
    mdoc["seed"] = args.seed
    if args.n_queries is not None:
        mdoc["n_queries"] = args.n_queries
    mcfg = _build(ToyModelConfig, mdoc)
    odoc = _load_json(args.optim)
    odoc["seed"] = args.seed
    if args.epochs is not None:
        odoc["epochs"] = args.epochs
    ocfg = _build(OptimConfig, odoc)
    out = Path(args.out)
    with Timer() as timer, atomic_output(out) as tmp:
        model, curve = train_toy(ds.annotations, ds.images, mcfg, ocfg)
        save_checkpoint(model, tmp, extra={"loss_curve": curve, "optim": ocfg.to_json()})
    _finish(args, out, {"model": mcfg.to_json(), "optim": ocfg.to_json()}, [args.data], timer)
    print(f"final loss {curve[-1]:.4f}; checkpoint {out}")


def cmd_infer(args) -> None:
    from .model import load_checkpoint
    from .train import predict_all

    model, header = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    out = Path(args.out)
    with Timer() as timer, atomic_output(out) as tmp:
        sets, seg = predict_all(model, ds.annotations, ds.images)
        write_proposals(tmp, sets, seg.double().numpy())
    _finish(args, out, header["config"], [args.checkpoint, args.data], timer)
    print(f"wrote proposals for {len(sets)} frames to {out}")


def _inference_config(args):
    from .inference import InferenceConfig

    doc = _load_json(getattr(args, "config", None))
    if getattr(args, "strategy", None):
        doc["strategy"] = args.strategy
    if getattr(args, "thresholds", None):
        doc["class_tau"] = _load_json(args.thresholds)
    if getattr(args, "data", None) and "class_k" not in doc and Path(args.data).is_dir():
        flags = read_dataset(args.data).meta["multi_instance"]
        doc["class_k"] = {c: (2 if f else 1) for c, f in flags.items()}
    return _build(InferenceConfig, doc)


def cmd_select(args) -> None:
    from .inference import select

    icfg = _inference_config(args)
    sets, _ = read_proposals(args.proposals)
    out = Path(args.out)
    with Timer() as timer, atomic_output(out) as tmp:
        preds = {p.frame: select(p, icfg) for p in sets}
        write_regions(tmp, preds, {p.frame: p.dims for p in sets})
    _finish(args, out, icfg.to_json(), [args.proposals], timer)
    print(f"selected {sum(len(v) for v in preds.values())} regions over {len(preds)} frames")


def cmd_eval(args) -> None:
    from .metrics import evaluate

    preds = read_regions(args.regions)
    anns = _annotations(args.annotations)
    out = Path(args.out)
    with Timer() as timer, atomic_output(out) as tmp:
        rep = evaluate(preds, anns, args.num_classes)
        text = _dump_report(rep, tmp, label=args.label)
    _finish(args, out, {"num_classes": args.num_classes}, [args.regions, args.annotations], timer)
    print(text, end="")


def cmd_upperbound(args) -> None:
    from .metrics import upper_bound, upper_bound_from_regions

    anns = _annotations(args.annotations)
    out = Path(args.out)
    with Timer() as timer, atomic_output(out) as tmp:
        if args.regions:
            if args.mode != "inferred":
                raise ConfigInvalid("a regions file only supports --mode inferred")
            rep = upper_bound_from_regions(read_regions(args.regions), anns, args.injective, args.num_classes)
        elif args.proposals:
            sets, _ = read_proposals(args.proposals)
            icfg = _inference_config(args)
            rep = upper_bound("all" if args.mode == "total" else "selected", sets, anns, icfg, args.injective, args.num_classes)
        else:
            raise MissingInput("upperbound needs --proposals or --regions")
        text = _dump_report(rep, tmp, label=f"upper bound ({args.mode})")
    _finish(args, out, {"mode": args.mode, "injective": args.injective}, [args.proposals or args.regions, args.annotations], timer)
    print(text, end="")


def cmd_calibrate(args) -> None:
    from .inference import calibrate_thresholds

    icfg = _inference_config(args)
    sets, _ = read_proposals(args.proposals)
    anns = _annotations(args.annotations)
    out = Path(args.out)
    with Timer() as timer, atomic_output(out) as tmp:
        taus = calibrate_thresholds(sets, anns, icfg, objective=args.objective)
        tmp.write_text(json.dumps({str(c): t for c, t in sorted(taus.items())}, indent=1))
    _finish(args, out, icfg.to_json(), [args.proposals, args.annotations], timer)
    print(json.dumps({str(c): t for c, t in sorted(taus.items())}))


def _video_regions(ds, sets, seg, icfg, tcfg):
    """Group a video dataset's frames into per-video baseline regions."""
    from .benchmark import VideoRegions
    from .inference import select
    from .temporal import video_descriptors

    if "videos" not in ds.meta:
        raise ConfigInvalid("the temporal command needs a video dataset (synth --videos)")
    if seg is None:
        raise ConfigInvalid("the proposal file carries no segment embeddings")
    row = {p.frame: i for i, p in enumerate(sets)}
    frame_row = {a.frame: i for i, a in enumerate(ds.annotations)}
    out = []
    for v in ds.meta["videos"]:
        idx = [frame_row[f] for f in v["frames"]]
        regions, probs, segs = [], [], []
        for f in v["frames"]:
            ps = sets[row[f]]
            regs = select(ps, icfg)
            q = np.array([r.query for r in regs], dtype=np.int64)
            regions.append(regs)
            probs.append(ps.class_probs[q])
            segs.append(seg[row[f]][q])
        out.append(VideoRegions(v["video"], [ds.annotations[i] for i in idx], video_descriptors(ds.images[idx], tcfg), regions, probs, segs))
    return out


def _temporal_config(args, num_classes, d_s):
    from .temporal import TemporalConfig

    doc = _load_json(args.temporal_config)
    doc.update(num_classes=num_classes, d_s=d_s, seed=args.seed)
    if args.window is not None:
        doc["window"] = args.window
    if args.stride is not None:
        doc["stride"] = args.stride
    if args.no_time_mlp:
        doc["time_mlp"] = False
    if args.no_presence:
        doc["presence"] = False
    return _build(TemporalConfig, doc)


def cmd_temporal(args) -> None:
    import torch

    from .benchmark import to_samples
    from .temporal import TemporalHead, region_probs, relabel_classes, save_feature_cache, train_temporal

    ds = read_dataset(args.data)
    sets, seg = read_proposals(args.proposals)
    icfg = _inference_config(args)
    out = Path(args.out)
    if args.action == "train":
        tcfg = _temporal_config(args, ds.num_classes, seg.shape[-1] if seg is not None else 32)
        videos = _video_regions(ds, sets, seg, icfg, tcfg)
        with Timer() as timer, atomic_output(out) as tmp:
            head, curve = train_temporal(to_samples(videos, tcfg), tcfg, epochs=args.epochs or 40)
            tmp.mkdir()
            torch.save({"version": 1, "config": tcfg.to_json(), "state": head.state_dict(), "loss_curve": curve}, tmp / "head.pt")
            (tmp / "features").mkdir()
            for v in videos:
                save_feature_cache(tmp / "features" / v.video, [a.frame for a in v.annotations], v.descriptors)
        _finish(args, out, {"temporal": tcfg.to_json(), "inference": icfg.to_json()}, [args.data, args.proposals], timer)
        print(f"temporal head trained, final loss {curve[-1]:.4f}; saved to {out}")
        return

    from .inference import Region
    from .temporal import TemporalConfig

    blob = torch.load(Path(args.head) / "head.pt", weights_only=False) if args.head else None
    if blob is None:
        raise MissingInput("temporal apply needs --head")
    if blob.get("version") != 1:
        raise VersionMismatch("unsupported temporal head version")
    tcfg = TemporalConfig(**blob["config"])
    head = TemporalHead(tcfg)
    head.load_state_dict(blob["state"])
    head.eval()
    videos = _video_regions(ds, sets, seg, icfg, tcfg)
    with Timer() as timer, atomic_output(out) as tmp:
        samples = to_samples(videos, tcfg)
        probs = region_probs(head, samples)
        base = np.concatenate([p for v in videos for p in v.probs if len(p)]) if samples.n_regions else np.zeros((0, tcfg.num_classes + 1))
        blend = args.blend if args.blend is not None else tcfg.blend
        cls = relabel_classes(probs, base, blend)
        preds, dims, i = {}, {}, 0
        for v in videos:
            for a, regs in zip(v.annotations, v.regions):
                preds[a.frame] = [Region(int(cls[i + j]), r.mask, r.score, r.query) for j, r in enumerate(regs)]
                dims[a.frame] = a.dims
                i += len(regs)
        write_regions(tmp, preds, dims)
    _finish(args, out, {"temporal": tcfg.to_json(), "inference": icfg.to_json(), "blend": blend}, [args.data, args.proposals, args.head], timer)
    print(f"relabeled {i} regions over {len(preds)} frames")


def cmd_ablate(args) -> None:
    from .metrics import format_table

    out = Path(args.out)
    with Timer() as timer, atomic_output(out) as tmp:
        if args.table == "3":
            rows, names = _ablate_selection(args)
            text = format_table(rows, names, label="Inference strategy")
            doc = {"table": 3, "rows": [{"label": l, **r.to_json()} for l, r in rows]}
        else:
            rows, names, doc = _ablate_temporal(args)
            text = format_table(rows, names, label="Time MLP / presence")
        tmp.write_text(json.dumps(doc, indent=1))
    _finish(args, out, {"table": args.table}, [p for p in (args.proposals, args.annotations) if p], timer)
    print(text, end="")


def _ablate_selection(args):
    from .benchmark import selection_ablation, strategy_configs
    from .inference import STRATEGIES, TABLE3_LABELS, select
    from .metrics import evaluate
    from .synth import NoiseConfig, SynthConfig

    strategies = args.strategies.split(",") if args.strategies else list(STRATEGIES)
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigInvalid(f"unknown strategy {s!r}")
    if args.proposals:
        sets, _ = read_proposals(args.proposals)
        anns = _annotations(args.annotations)
        val_sets, val_anns = (read_proposals(args.val_proposals)[0], _annotations(args.val_annotations)) if args.val_proposals else (sets, anns)
        ds_meta = read_dataset(args.annotations).meta if Path(args.annotations).is_dir() else None
        n_cls = len(ds_meta["classes"]) if ds_meta else max(c for a in anns for c in a.classes)
        synth = SynthConfig(num_classes=n_cls, class_weights=tuple([1.0 / n_cls] * n_cls), ambiguous_pairs=())
        if ds_meta:
            synth = SynthConfig(**ds_meta["config"])
        cfgs = strategy_configs(synth, val_sets, val_anns)
        rows = [(TABLE3_LABELS[s], evaluate({p.frame: select(p, cfgs[s]) for p in sets}, anns, n_cls)) for s in strategies]
        return rows, list(synth.class_names)
    synth = _build(SynthConfig, {**_load_json(args.config), "seed": args.seed})
    rows = selection_ablation(synth, NoiseConfig(), n_test=args.frames, n_val=args.val_frames, seed=args.seed, strategies=strategies)
    return rows, list(synth.class_names)


def _ablate_temporal(args):
    from .benchmark import VideoBenchConfig, run_baseline, table4_rows, temporal_ablation

    bench = VideoBenchConfig(seed=args.seed)
    if args.epochs is not None:
        bench.optim.epochs = args.epochs
    run = run_baseline(bench)
    seeds = tuple(range(args.head_seeds))
    records = temporal_ablation(run, seeds=seeds)
    rows = [("frame baseline", run.baseline_report())] + [(label, rep) for label, rep, _, _ in table4_rows(records)]
    doc = {
        "table": 4,
        "rows": [{"label": l, **r.to_json()} for l, r in rows],
        "runs": [{k: v for k, v in r.items() if k != "report"} | {"mciou": r["report"].mciou, "miou": r["report"].miou} for r in records],
    }
    return rows, list(bench.synth.class_names), doc


def cmd_report(args) -> None:
    from .metrics import EvalReport, format_table

    rows = []
    labels = args.labels.split(",") if args.labels else []
    for i, path in enumerate(args.reports):
        p = Path(path)
        if not p.exists():
            raise MissingInput(f"{p} does not exist")
        doc = json.loads(p.read_text())
        if "rows" in doc:
            for r in doc["rows"]:
                label = r.pop("label")
                rows.append((label, EvalReport.from_json(r)))
        else:
            rows.append((labels[i] if i < len(labels) else p.stem, EvalReport.from_json(doc)))
    text = format_table(rows, args.class_names.split(",") if args.class_names else None)
    if args.out:
        out = Path(args.out)
        with Timer() as timer, atomic_output(out) as tmp:
            tmp.write_text(text)
        _finish(args, out, {}, args.reports, timer)
    print(text, end="")


# parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="matis", description="Mask-classification toolkit: synthetic data, toy training, region selection, evaluation and temporal relabeling.")
    ap.add_argument("--seed", type=int, default=0, help="root seed for every stochastic step")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset container")
    p.add_argument("--config", help="SynthConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--start", type=int, default=0, help="first frame (or video) seed")
    p.add_argument("--videos", type=int, default=0, help="generate this many videos instead of frames")
    p.add_argument("--video-length", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the toy segmenter")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="ToyModelConfig JSON")
    p.add_argument("--optim", help="OptimConfig JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-queries", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    def selection_flags(q):
        q.add_argument("--config", help="InferenceConfig JSON")
        q.add_argument("--strategy")
        q.add_argument("--thresholds", help="per-class thresholds JSON from 'calibrate'")
        q.add_argument("--data", help="dataset container (supplies multi-instance flags)")

    p = sub.add_parser("select", help="select final regions from proposals")
    p.add_argument("--proposals", required=True)
    p.add_argument("--out", required=True)
    selection_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", help="score regions against annotations")
    p.add_argument("--regions", required=True)
    p.add_argument("--annotations", required=True, help="dataset directory or annotation JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--label", default="run")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("upperbound", help="oracle-relabel upper bound")
    p.add_argument("--proposals")
    p.add_argument("--regions")
    p.add_argument("--annotations", required=True)
    p.add_argument("--mode", choices=("inferred", "total"), default="inferred")
    p.add_argument("--injective", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int)
    selection_flags(p)
    p.set_defaults(func=cmd_upperbound)

    p = sub.add_parser("calibrate", help="tune per-class score thresholds")
    p.add_argument("--proposals", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--objective", choices=("mciou", "miou"), default="mciou")
    selection_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("temporal", help="train or apply the temporal region classifier")
    p.add_argument("action", choices=("train", "apply"))
    p.add_argument("--data", required=True, help="video dataset container")
    p.add_argument("--proposals", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--head", help="trained head directory (apply)")
    p.add_argument("--temporal-config", help="TemporalConfig JSON")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--no-time-mlp", action="store_true")
    p.add_argument("--no-presence", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--blend", type=float)
    p.add_argument("--config", help="InferenceConfig JSON")
    p.add_argument("--strategy")
    p.add_argument("--thresholds")
    p.set_defaults(func=cmd_temporal)

    p = sub.add_parser("ablate", help="selection-strategy (3) or temporal-head (4) ablation table")
    p.add_argument("--table", choices=("3", "4"), default="3")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="SynthConfig JSON (table 3 without --proposals)")
    p.add_argument("--strategies", help="comma-separated subset of strategies")
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--val-frames", type=int, default=100)
    p.add_argument("--proposals")
    p.add_argument("--annotations")
    p.add_argument("--val-proposals")
    p.add_argument("--val-annotations")
    p.add_argument("--epochs", type=int, help="baseline epochs (table 4)")
    p.add_argument("--head-seeds", type=int, default=3)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="combine report JSON files into one table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--labels")
    p.add_argument("--class-names")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from .benchmark import set_threads

    set_threads()
    try:
        args.func(args)
    except MatisError as exc:
        sys.stderr.write(json.dumps({"error": exc.kind, "message": str(exc)}) + "\n")
        return next((code for cls, code in EXIT_CODES.items() if isinstance(exc, cls)), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
