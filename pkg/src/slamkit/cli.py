"""Command-line entry points.

    slamkit slam        --config config.yaml [--max-frames N] [--headless]
                        [--control-port P] [--out-root DIR]
    slamkit vo          same flags; frame-to-frame odometry only
    slamkit dense-recon same flags; slam + volumetric integration
    slamkit map-viewer  --config config.yaml [--control-port P]; serves a
                        saved map over the control endpoint, no processing
    slamkit eval        --config evaluation.json [--out-root DIR]
    slamkit train-vocab --config config.yaml --output vocab.slkvoc

Batch runs exit at dataset end; with a control port and no --headless the
session idles afterwards so an operator console can step, save, or reset.
"""

import argparse
import json
import os
import sys
from datetime import datetime
from typing import Optional

from .config import ConfigError, load_config
from .datasets import DatasetError, open_dataset
from .evaluation import RunRecord, build_report, render_csv, render_html, \
    render_latex
from .features import FeatureManager, FeatureTrackerConfig
from .session import SessionError, SlamSession, _dataclass_from_params, \
    run_slam
from .vocabulary import train_vocabulary


def _add_run_flags(parser: argparse.ArgumentParser, viewer: bool = False):
    parser.add_argument("--config", required=True, help="config.yaml path")
    if not viewer:
        parser.add_argument("--max-frames", type=int, default=None,
                            help="process at most N frames")
    parser.add_argument("--headless", action="store_true",
                        help="no console progress, exit at dataset end")
    parser.add_argument("--control-port", type=int, default=None,
                        help="serve the control endpoint on this port "
                             "(0 picks a free one)")
    parser.add_argument("--out-root", default="results",
                        help="parent directory for run outputs")


class _ConsoleProgress:
    """Snapshot sink printing a one-line progress ticker."""

    def __init__(self, stream=None):
        self.stream = stream or sys.stderr
        self._dirty = False

    def __call__(self, event: dict):
        if event.get("type") != "snapshot":
            return
        line = (f"frame {event['frame_index']}/{event['num_frames']} "
                f"state={event['tracking_state']} "
                f"keyframes={event['num_keyframes']} "
                f"points={event['num_map_points']}")
        self.stream.write("\r" + line.ljust(72))
        self.stream.flush()
        self._dirty = True

    def finish(self):
        if self._dirty:
            self.stream.write("\n")
            self.stream.flush()


def _run_mode(mode: str, args) -> int:
    from .control import ControlServer   # deferred: pulls in sockets

    server_box = {}
    progress = None if args.headless else _ConsoleProgress()
    # a viewer exists to serve its map, so it always opens an endpoint
    port = args.control_port
    if port is None and mode == "viewer":
        port = 0

    def hook(session: SlamSession):
        if port is not None:
            server = ControlServer(session, port=port)
            server_box["server"] = server
            print(f"control endpoint: 127.0.0.1:{server.port}", flush=True)
            session.set_interactive(not args.headless or mode == "viewer")
        if mode == "viewer":
            session.set_interactive(True)
        if progress is not None:
            session.subscribe(progress)

    try:
        return run_slam(args.config,
                        max_frames=getattr(args, "max_frames", None),
                        out_root=args.out_root, mode=mode,
                        session_hook=hook)
    finally:
        if progress is not None:
            progress.finish()
        if "server" in server_box:
            server_box["server"].close()


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def _cmd_eval(args) -> int:
    """Run every (dataset, preset) cell of an evaluation plan.

    The plan is JSON: {"group": str, "datasets": [{"config": path,
    "name": str}], "presets": {name: GLOBAL_PARAMETERS overrides},
    "max_frames": N}.  Failed cells are reported and left out of the
    tables (rendered as missing).
    """
    try:
        with open(args.config) as f:
            plan = json.load(f)
    except (OSError, ValueError) as e:
        sys.stderr.write(f"error: cannot read evaluation plan: {e}\n")
        return 2
    base = os.path.dirname(os.path.abspath(args.config))
    datasets = plan.get("datasets") or []
    if not datasets:
        sys.stderr.write("error: evaluation plan lists no datasets\n")
        return 2
    presets = plan.get("presets") or {"baseline": {}}
    group = plan.get("group") or os.path.splitext(
        os.path.basename(args.config))[0]
    max_frames = args.max_frames or plan.get("max_frames")

    run_id = datetime.now().strftime("%Y%m%d_%H%M%S")
    out = os.path.join(args.out_root, run_id)
    runs, failures = [], 0
    for entry in datasets:
        cfg_path = entry["config"]
        if not os.path.isabs(cfg_path):
            cfg_path = os.path.join(base, cfg_path)
        name = entry.get("name") or os.path.splitext(
            os.path.basename(cfg_path))[0]
        for preset, overrides in presets.items():
            run_dir = os.path.join(out, f"{name}__{preset}")
            try:
                config = load_config(cfg_path)
                config.global_parameters.update(overrides or {})
                session = SlamSession(config, run_dir=run_dir,
                                      max_frames=max_frames)
                rc = session.run()
                if rc != 0:
                    raise SessionError(f"session exited with status {rc}")
                with open(os.path.join(run_dir, "metrics",
                                       "metrics.json")) as f:
                    metrics = json.load(f)
            except (ConfigError, DatasetError, SessionError, OSError) as e:
                sys.stderr.write(f"error: {name}/{preset}: {e}\n")
                failures += 1
                continue
            record = {"percent_lost": metrics["percent_lost"]}
            if "ate_rmse" in metrics:
                record["rmse"] = metrics["ate_rmse"]
                record["max"] = metrics["ate_max"]
            runs.append(RunRecord(dataset=name, preset=preset,
                                  metrics=record))
            print(f"{name}/{preset}: "
                  + ", ".join(f"{k}={v:.5f}" for k, v in record.items()),
                  flush=True)
    if not runs:
        sys.stderr.write("error: every evaluation cell failed\n")
        return 2

    report = build_report(runs, group=group)
    os.makedirs(out, exist_ok=True)
    for suffix, renderer in (("csv", render_csv), ("html", render_html),
                             ("tex", render_latex)):
        path = os.path.join(out, f"report.{suffix}")
        with open(path, "w") as f:
            f.write(renderer(report))
        print(f"report: {path}", flush=True)
    with open(os.path.join(out, "runs.json"), "w") as f:
        json.dump([{"dataset": r.dataset, "preset": r.preset,
                    "metrics": r.metrics} for r in runs], f, indent=2,
                  sort_keys=True)
        f.write("\n")
    return 0 if failures == 0 else 1


# --------------------------------------------------------------------------
# vocabulary training
# --------------------------------------------------------------------------


def _cmd_train_vocab(args) -> int:
    try:
        config = load_config(args.config)
        dataset = open_dataset(config.dataset, config.settings)
    except (ConfigError, DatasetError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 2
    features = FeatureManager(
        _dataclass_from_params(FeatureTrackerConfig,
                               dict(config.global_parameters)))
    n = len(dataset)
    if args.max_frames is not None:
        n = min(n, args.max_frames)
    arrays = []
    for i in range(0, n, args.step):
        bundle = dataset.frame(i)
        _, desc = features.detect_and_compute(bundle.left)
        if len(desc):
            arrays.append(desc)
    try:
        vocab = train_vocabulary(arrays, k=args.k, depth=args.depth)
    except ValueError as e:
        sys.stderr.write(f"error: {e}\n")
        return 2
    vocab.save(args.output)
    print(f"vocabulary: {len(arrays)} images, {vocab.num_words} words, "
          f"k={args.k} depth={args.depth} -> {args.output}", flush=True)
    return 0


# --------------------------------------------------------------------------


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(prog="slamkit")
    sub = parser.add_subparsers(dest="command", required=True)

    for mode, blurb in (("slam", "full SLAM pipeline"),
                        ("vo", "frame-to-frame visual odometry"),
                        ("dense-recon", "SLAM plus volumetric integration")):
        p = sub.add_parser(mode, help=blurb)
        _add_run_flags(p)

    p = sub.add_parser("map-viewer", help="serve a saved map, no processing")
    _add_run_flags(p, viewer=True)

    p = sub.add_parser("eval", help="run an evaluation plan")
    p.add_argument("--config", required=True, help="evaluation.json path")
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--out-root", default="results")

    p = sub.add_parser("train-vocab", help="train a BoW vocabulary")
    p.add_argument("--config", required=True, help="config.yaml of the "
                   "training dataset")
    p.add_argument("--output", required=True, help="output .slkvoc path")
    p.add_argument("--k", type=int, default=10, help="branching factor")
    p.add_argument("--depth", type=int, default=3, help="tree depth")
    p.add_argument("--step", type=int, default=1,
                   help="sample every Nth frame")
    p.add_argument("--max-frames", type=int, default=None)

    args = parser.parse_args(argv)
    if args.command == "eval":
        return _cmd_eval(args)
    if args.command == "train-vocab":
        return _cmd_train_vocab(args)
    mode = {"map-viewer": "viewer"}.get(args.command, args.command)
    return _run_mode(mode, args)


if __name__ == "__main__":
    sys.exit(main())
