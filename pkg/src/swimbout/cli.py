"""Command-line entry point wiring every stage of the pipeline.

Subcommands cover each stage (``synth``, ``preprocess``, ``flow``,
``augment``, ``train``, ``search``, ``eval``, ``explain``, ``analyze``,
``baseline``) plus ``pipeline``, which runs an ordered subset of stages from
one configuration file and writes a run manifest with config hash, stage
versions, input/output digests, and wall-clock per stage.

Configuration is plain key-value INI with one section per stage; every
default matches the published pipeline constants, so a number lives in
exactly one place.  The global seed (462019 by default) is propagated to
every stochastic stage; ``--seed`` overrides the config.  The
``SWIMBOUT_WORKERS`` environment variable bounds intra-stage parallelism.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import analysis, explain, svmbaseline
from .augment import (DESK_AUGMENT, FULL_AUGMENT, AugmentConfig, split_events,
                      augment_split)
from .container import DatasetContainer
from .optflow import DESK_FLOW_PARAMS, PAPER_FLOW_PARAMS, farneback_flow, flow_to_image
from .preprocess import load_events, process_clip, save_events
from .synthgen import SynthSpec, generate_dataset, load_clip
from .twostream import (TrainConfig, TwoStreamModel, build_model, evaluate,
                        hyperparameter_search, sample_inputs, stream_config,
                        train)

DEFAULT_SEED = 462019
CANONICAL_STAGES = ("synth", "preprocess", "augment", "train", "search",
                    "eval", "explain", "analyze", "baseline")
STAGE_VERSIONS = {name: 1 for name in CANONICAL_STAGES}


class DependencyError(RuntimeError):
    """A stage input is missing; raised before any work starts."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Per-stage options plus the global seed / preset / output root."""
    options: dict = field(default_factory=dict)
    seed: int = DEFAULT_SEED
    preset: str = "paper"
    out_root: Path = Path("run")
    text: str = ""

    @classmethod
    def from_file(cls, path: Path | None) -> "RunConfig":
        cfg = cls()
        if path is None:
            return cfg
        path = Path(path)
        if not path.exists():
            raise DependencyError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        cfg.text = path.read_text()
        parser.read_string(cfg.text)
        for section in parser.sections():
            cfg.options[section] = dict(parser.items(section))
        top = cfg.options.get("global", {})
        cfg.seed = int(top.get("seed", cfg.seed))
        cfg.preset = top.get("preset", cfg.preset)
        if cfg.preset not in ("paper", "desk"):
            raise ValueError(f"unknown preset {cfg.preset!r}")
        cfg.out_root = Path(top.get("out_root", cfg.out_root))
        return cfg

    def get(self, stage: str, key: str, fallback, cast=str):
        raw = self.options.get(stage, {}).get(key)
        if raw is None:
            return fallback
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)

    def config_hash(self) -> str:
        payload = self.text + f"|seed={self.seed}|preset={self.preset}"
        return hashlib.sha256(payload.encode()).hexdigest()


def augment_preset(preset: str) -> AugmentConfig:
    return FULL_AUGMENT if preset == "paper" else DESK_AUGMENT


def flow_preset(preset: str):
    return PAPER_FLOW_PARAMS if preset == "paper" else DESK_FLOW_PARAMS


def _require(path: Path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing {what}: {path}")
    return path


def digest_path(path: Path) -> str:
    """SHA-256 over file contents (relative name + bytes, sorted)."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(
        p for p in path.rglob("*") if p.is_file())
    root = path.parent if path.is_file() else path
    for p in files:
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def load_model(checkpoint: Path) -> TwoStreamModel:
    checkpoint = _require(checkpoint, "model checkpoint")
    meta_path = checkpoint.with_suffix(".json")
    _require(meta_path, "model metadata (written next to the checkpoint)")
    meta = json.loads(meta_path.read_text())
    spatial = stream_config(meta["preset"], 1)
    temporal = stream_config(meta["preset"], meta["temporal_channels"])
    return TwoStreamModel.load(checkpoint, spatial, temporal)


# ---------------------------------------------------------------------------
# stage implementations (shared by subcommands and `pipeline`)
# ---------------------------------------------------------------------------

def stage_synth(cfg: RunConfig, out_dir: Path, seed: int) -> Path:
    spec = SynthSpec(
        n_videos=cfg.get("synth", "n_videos", 38, int),
        frame_size=(cfg.get("synth", "frame_size", 512, int),) * 2,
        frames_per_video=cfg.get("synth", "frames_per_video", 180, int),
        class_balance=cfg.get("synth", "class_balance", 0.439, float),
        artifact_probability=cfg.get("synth", "artifact_probability",
                                     0.0, float),
        seed=seed,
    )
    generate_dataset(spec, out_dir)
    return out_dir / "manifest.jsonl"


def stage_preprocess(cfg: RunConfig, manifest: Path, out_dir: Path) -> Path:
    manifest = _require(manifest, "clip manifest (run `synth` first)")
    mask = cfg.get("preprocess", "mask_corners", False, bool)
    gamma = cfg.get("preprocess", "gamma_param", 4.3, float)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = out_dir / "events.jsonl"
    if index.exists():
        index.unlink()
    for line in manifest.read_text().splitlines():
        row = json.loads(line)
        clip = load_clip(manifest.parent / row["path"], source_id=row["path"])
        events = process_clip(clip, row["label"], mask_corners=mask,
                              gamma_param=gamma)
        save_events(events, out_dir)
    return index


def stage_augment(cfg: RunConfig, events_dir: Path, out_dir: Path,
                  seed: int) -> Path:
    _require(Path(events_dir) / "events.jsonl",
             "event index (run `preprocess` first)")
    spec = cfg.get("augment", "split_spec", "28/4/6")
    weights = tuple(int(w) for w in spec.split("/"))
    if len(weights) != 3:
        raise ValueError(f"split spec must be train/valid/test, got {spec!r}")
    config = augment_preset(cfg.preset)
    events = load_events(events_dir)
    splits = split_events(events, weights, seed=seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, part in splits.items():
        if not part:
            continue
        augment_split(part, name, out_dir / f"{name}.bout", config, seed=seed)
    return out_dir


def stage_train(cfg: RunConfig, data_dir: Path, out_dir: Path,
                seed: int, lr: float | None = None,
                weight_decay: float | None = None,
                epochs: int | None = None) -> Path:
    data_dir = Path(data_dir)
    train_path = _require(data_dir / "train.bout",
                          "training container (run `augment` first)")
    valid_path = _require(data_dir / "valid.bout",
                          "validation container (run `augment` first)")
    config = TrainConfig(
        lr=lr if lr is not None else cfg.get("train", "lr", 1e-4, float),
        weight_decay=(weight_decay if weight_decay is not None
                      else cfg.get("train", "weight_decay", 1e-3, float)),
        epochs=(epochs if epochs is not None
                else cfg.get("train", "epochs", 5, int)),
        batch_size=cfg.get("train", "batch_size", 32, int),
        seed=seed,
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history_path = out_dir / "history.jsonl"
    if history_path.exists():
        history_path.unlink()
    with DatasetContainer(train_path) as train_data, \
            DatasetContainer(valid_path) as valid_data:
        channels = train_data[0].temporal.shape[0]
        model = build_model(stream_config(cfg.preset, 1),
                            stream_config(cfg.preset, channels), seed=seed)
        checkpoint = out_dir / "checkpoint.swbw"
        train(model, train_data, valid_data, config,
              checkpoint_path=checkpoint, history_path=history_path,
              quiet=False)
    checkpoint.with_suffix(".json").write_text(json.dumps(
        {"preset": cfg.preset, "temporal_channels": int(channels)},
        sort_keys=True))
    return checkpoint


def stage_search(cfg: RunConfig, data_dir: Path, out_path: Path,
                 seed: int) -> Path:
    data_dir = Path(data_dir)
    train_path = _require(data_dir / "train.bout",
                          "training container (run `augment` first)")
    valid_path = _require(data_dir / "valid.bout",
                          "validation container (run `augment` first)")
    lr_grid = tuple(float(v) for v in cfg.get(
        "search", "lr_grid", "1e-3,1e-4,1e-5").split(","))
    wd_grid = tuple(float(v) for v in cfg.get(
        "search", "wd_grid", "1e-2,1e-3,1e-4").split(","))
    epochs = cfg.get("search", "epochs", 8, int)
    with DatasetContainer(train_path) as train_data, \
            DatasetContainer(valid_path) as valid_data:
        channels = train_data[0].temporal.shape[0]

        def make_model():
            return build_model(stream_config(cfg.preset, 1),
                               stream_config(cfg.preset, channels), seed=seed)

        best, rows = hyperparameter_search(
            make_model, train_data, valid_data, lr_grid=lr_grid,
            wd_grid=wd_grid, epochs=epochs, seed=seed,
            batch_size=cfg.get("train", "batch_size", 32, int))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(
        {"best": {"lr": best[0], "weight_decay": best[1]}, "grid": rows},
        indent=2, sort_keys=True))
    return out_path


def stage_eval(checkpoint: Path, data_path: Path,
               out_path: Path | None = None) -> dict:
    data_path = _require(data_path, "evaluation container")
    model = load_model(Path(checkpoint))
    with DatasetContainer(data_path) as data:
        metrics = evaluate(model, data)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(metrics, indent=2,
                                             sort_keys=True))
    return metrics


def stage_explain(cfg: RunConfig, checkpoint: Path, data_path: Path,
                  out_path: Path, method: str, stream: str,
                  limit: int | None = None,
                  png_dir: Path | None = None) -> Path:
    data_path = _require(data_path, "sample container")
    model = load_model(Path(checkpoint))
    maps = []
    log_probs = []
    with DatasetContainer(data_path) as data:
        n = len(data) if limit is None else min(limit, len(data))
        for i in range(n):
            sample = data[i]
            maps.append(explain.explain_sample(model, sample, stream=stream,
                                               method=method))
            xs, xt = sample_inputs(sample)
            fused, _, _ = model.forward(xs[None], xt[None])
            log_probs.append(fused[0])
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    explain.write_maps(maps, out_path)
    probs_path = out_path.with_suffix(".probs.jsonl")
    with open(probs_path, "w") as f:
        for i, lp in enumerate(log_probs):
            f.write(json.dumps({"index": i, "label": int(maps[i].label),
                                "log_probs": [float(v) for v in lp]}) + "\n")
    if png_dir is not None:
        png_dir = Path(png_dir)
        png_dir.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(maps):
            base = np.full(m.values.shape[-2:], 255, dtype=np.uint8)
            analysis.render_overlay(base, analysis.channel_sum(m),
                                    png_dir / f"map_{i:05d}.png")
    return out_path


def stage_analyze(cfg: RunConfig, maps_path: Path, out_dir: Path,
                  group_by: str = "class") -> Path:
    maps_path = _require(Path(maps_path), "relevance-map container")
    maps = explain.read_maps(maps_path)
    if not maps:
        raise DependencyError(f"no relevance maps in {maps_path}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if group_by == "confidence":
        probs_path = maps_path.with_suffix(".probs.jsonl")
        _require(probs_path, "log-probability sidecar (written by `explain`)")
        log_probs = np.array([json.loads(line)["log_probs"]
                              for line in probs_path.read_text().splitlines()])
        window = cfg.get("analyze", "window", analysis.CONFIDENCE_WINDOW, int)
        aggregates = analysis.confidence_windows(maps, log_probs,
                                                 window=window)
    else:
        aggregates = analysis.aggregate_heatmaps(maps, group_by=group_by)

    for agg in aggregates:
        base = np.full(agg.mean_map.shape, 255, dtype=np.uint8)
        analysis.render_overlay(base, agg.mean_map,
                                out_dir / f"{agg.group}.png")
    summary = analysis.analysis_summary(maps, aggregates)
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary_path


def stage_baseline(cfg: RunConfig, events_dir: Path, out_path: Path,
                   seed: int) -> Path:
    _require(Path(events_dir) / "events.jsonl",
             "event index (run `preprocess` first)")
    events = load_events(events_dir)
    rows = []
    feats = []
    labels = []
    for event in events:
        trace = svmbaseline.trace_bout(event.frames)
        vec = svmbaseline.extract_features(trace)
        feats.append(vec.as_array())
        labels.append(event.label)
        rows.append({"source_id": event.source_id,
                     "start_index": event.start_index,
                     "label": event.label,
                     **{name: float(v) for name, v in
                        zip(svmbaseline.FEATURE_NAMES, vec.as_array())}})
    report = svmbaseline.cross_validate(
        np.asarray(feats), np.asarray(labels),
        n_folds=cfg.get("baseline", "n_folds", 5, int),
        test_fraction=cfg.get("baseline", "test_fraction", 0.15, float),
        seed=seed)
    report["features"] = rows
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return out_path


# ---------------------------------------------------------------------------
# pipeline orchestration
# ---------------------------------------------------------------------------

def _eval_stage_output(paths: dict) -> Path:
    stage_eval(paths["model"] / "checkpoint.swbw",
               paths["data"] / "test.bout", paths["eval"])
    return paths["eval"]

def run_pipeline(config: RunConfig, stages: list[str],
                 out_root: Path | None = None) -> dict:
    """Run the requested stages in canonical order; write a run manifest.

    The manifest records the config hash, per-stage version, input/output
    digests, and wall-clock seconds.  A stage failure stops the run; the
    manifest still records the completed stages plus the error.
    """
    unknown = [s for s in stages if s not in CANONICAL_STAGES]
    if unknown:
        raise ValueError(f"unknown stages: {unknown}")
    ordered = [s for s in CANONICAL_STAGES if s in stages]
    root = Path(out_root) if out_root is not None else config.out_root
    root.mkdir(parents=True, exist_ok=True)
    seed = config.seed

    paths = {
        "clips": root / "clips",
        "events": root / "events",
        "data": root / "augmented",
        "model": root / "model",
        "search": root / "search.json",
        "eval": root / "metrics.json",
        "maps": root / "maps" / "relevance.rmap",
        "analysis": root / "analysis",
        "baseline": root / "baseline.json",
    }
    manifest = {"config_hash": config.config_hash(), "seed": seed,
                "preset": config.preset, "stages": []}
    manifest_path = root / "run_manifest.json"

    def record(name, inputs, outputs, seconds):
        manifest["stages"].append({
            "name": name,
            "version": STAGE_VERSIONS[name],
            "inputs": {str(p): digest_path(p) for p in inputs},
            "outputs": {str(p): digest_path(p) for p in outputs},
            "seconds": seconds,
        })
        manifest_path.write_text(json.dumps(manifest, indent=2,
                                            sort_keys=True))

    runners = {
        "synth": lambda: ((), (stage_synth(config, paths["clips"], seed)
                               .parent,)),
        "preprocess": lambda: ((paths["clips"],), (stage_preprocess(
            config, paths["clips"] / "manifest.jsonl",
            paths["events"]).parent,)),
        "augment": lambda: ((paths["events"],), (stage_augment(
            config, paths["events"], paths["data"], seed),)),
        "train": lambda: ((paths["data"],), (stage_train(
            config, paths["data"], paths["model"], seed),)),
        "search": lambda: ((paths["data"],), (stage_search(
            config, paths["data"], paths["search"], seed),)),
        "eval": lambda: ((paths["model"], paths["data"]),
                         (_eval_stage_output(paths),)),
        "explain": lambda: ((paths["model"], paths["data"]), (stage_explain(
            config, paths["model"] / "checkpoint.swbw",
            paths["data"] / "test.bout", paths["maps"],
            method=config.get("explain", "method", "dtd"),
            stream=config.get("explain", "stream", "temporal"),
            limit=config.get("explain", "limit", None, int)).parent,)),
        "analyze": lambda: ((paths["maps"].parent,), (stage_analyze(
            config, paths["maps"], paths["analysis"],
            group_by=config.get("analyze", "group_by", "class")).parent,)),
        "baseline": lambda: ((paths["events"],), (stage_baseline(
            config, paths["events"], paths["baseline"], seed),)),
    }

    for name in ordered:
        start = time.perf_counter()
        try:
            inputs, outputs = runners[name]()
        except Exception as exc:
            manifest["failed_stage"] = name
            manifest["error"] = f"{type(exc).__name__}: {exc}"
            manifest_path.write_text(json.dumps(manifest, indent=2,
                                                sort_keys=True))
            raise
        record(name, inputs, outputs, round(time.perf_counter() - start, 3))
    return manifest


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="INI configuration file with per-stage sections")
    p.add_argument("--seed", type=int, default=None,
                   help="override the configured global seed")
    p.add_argument("--preset", choices=("paper", "desk"), default=None,
                   help="override the configured model/augmentation preset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swimbout",
        description="Explainable two-stream classification of swim bouts")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic swim-bout clips")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=None, help="number of clips")
    p.add_argument("--artifact-probability", type=float, default=None)
    _add_common(p)

    p = sub.add_parser("preprocess", help="normalize, crop, detect events")
    p.add_argument("--in", dest="manifest", type=Path, required=True,
                   help="clip manifest written by `synth`")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mask-corners", action="store_true")
    _add_common(p)

    p = sub.add_parser("flow", help="debug: flow between two frames as PNG")
    p.add_argument("--prev", type=Path, required=True)
    p.add_argument("--next", dest="nxt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("augment", help="expand events into sample containers")
    p.add_argument("--events", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split-spec", default=None, help="e.g. 28/4/6")
    _add_common(p)

    p = sub.add_parser("train", help="train the two-stream model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--wd", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("search", help="grid search over lr / weight decay")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--grid", default=None,
                   help="e.g. lr=1e-3,1e-4;wd=1e-2,1e-3")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a container")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("explain", help="relevance maps for a container")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--method", choices=("dtd", "saliency", "guided"),
                   default="dtd")
    p.add_argument("--stream", choices=("spatial", "temporal"),
                   default="temporal")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--png-dir", type=Path, default=None)
    _add_common(p)

    p = sub.add_parser("analyze", help="aggregate heatmaps and statistics")
    p.add_argument("--maps", type=Path, required=True)
    p.add_argument("--group-by", choices=("class", "confidence"),
                   default="class")
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("baseline", help="kinematic-feature SVM baseline")
    p.add_argument("--events", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("pipeline", help="run an ordered subset of stages")
    p.add_argument("--stages", default=",".join(
        ("synth", "preprocess", "augment", "train", "eval", "explain",
         "analyze", "baseline")),
        help="comma-separated stage names")
    p.add_argument("--out", type=Path, default=None,
                   help="output root (overrides config)")
    _add_common(p)

    return parser


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_file(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "preset", None) is not None:
        cfg.preset = args.preset
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _config_from_args(args)
    try:
        if args.command == "synth":
            if args.n is not None:
                cfg.options.setdefault("synth", {})["n_videos"] = str(args.n)
            if args.artifact_probability is not None:
                cfg.options.setdefault("synth", {})[
                    "artifact_probability"] = str(args.artifact_probability)
            manifest = stage_synth(cfg, args.out, cfg.seed)
            print(f"wrote {manifest}")
        elif args.command == "preprocess":
            if args.mask_corners:
                cfg.options.setdefault("preprocess", {})[
                    "mask_corners"] = "true"
            index = stage_preprocess(cfg, args.manifest, args.out)
            print(f"wrote {index}")
        elif args.command == "flow":
            prev = np.asarray(Image.open(_require(args.prev, "frame")))
            nxt = np.asarray(Image.open(_require(args.nxt, "frame")))
            field = farneback_flow(prev, nxt, flow_preset(cfg.preset))
            args.out.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(flow_to_image(field)).save(args.out)
            print(f"wrote {args.out}")
        elif args.command == "augment":
            if args.split_spec is not None:
                cfg.options.setdefault("augment", {})[
                    "split_spec"] = args.split_spec
            out = stage_augment(cfg, args.events, args.out, cfg.seed)
            print(f"wrote containers under {out}")
        elif args.command == "train":
            checkpoint = stage_train(cfg, args.data, args.out, cfg.seed,
                                     lr=args.lr, weight_decay=args.wd,
                                     epochs=args.epochs)
            print(f"wrote {checkpoint}")
        elif args.command == "search":
            if args.grid is not None:
                section = cfg.options.setdefault("search", {})
                for part in args.grid.split(";"):
                    key, _, values = part.partition("=")
                    section[f"{key.strip()}_grid"] = values
            out = stage_search(cfg, args.data, args.out, cfg.seed)
            print(f"wrote {out}")
        elif args.command == "eval":
            metrics = stage_eval(args.checkpoint, args.data)
            print(json.dumps(metrics, indent=2, sort_keys=True))
        elif args.command == "explain":
            out = stage_explain(cfg, args.checkpoint, args.data, args.out,
                                method=args.method, stream=args.stream,
                                limit=args.limit, png_dir=args.png_dir)
            print(f"wrote {out}")
        elif args.command == "analyze":
            out = stage_analyze(cfg, args.maps, args.out,
                                group_by=args.group_by)
            print(f"wrote {out}")
        elif args.command == "baseline":
            out = stage_baseline(cfg, args.events, args.out, cfg.seed)
            print(f"wrote {out}")
        elif args.command == "pipeline":
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
            manifest = run_pipeline(cfg, stages, out_root=args.out)
            root = args.out if args.out is not None else cfg.out_root
            print(f"wrote {Path(root) / 'run_manifest.json'} "
                  f"({len(manifest['stages'])} stages)")
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
