"""Command-line entry point: ``spikebev {synth,train,infer,eval,audit,activity}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 invariant
violation. Every command that writes to ``--out`` echoes its effective
configuration there as ``config.json``; re-running with ``--config`` on that
file reproduces the outputs byte for byte. Wall-clock timings go to a
separate ``timing.json`` so that they never perturb the reproducible outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import spkl
from .codec import read_detections, write_detections
from .evaluation import average_precision, merge_activity
from .ingest import FormatError, GridMeta, load_kitti_pointcloud, pointcloud_to_bev
from .pipeline import detect_many, load_dataset, read_manifest, synthesize_dataset
from .train import TrainConfig, TrainingError, train

log = logging.getLogger("spikebev")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3

GLOBAL_DEFAULTS = {"config": None, "seed": None, "threads": 1, "out": None}


class ConfigError(ValueError):
    """Missing or malformed configuration (exit code 1)."""


class InvariantViolation(RuntimeError):
    """A checked invariant failed (exit code 3)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_globals(p, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON file with the command's parameters")
    p.add_argument("--seed", type=int, default=d)
    p.add_argument("--threads", type=int, default=d, help="scene-level parallelism")
    p.add_argument("--out", default=d, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="spikebev", description=__doc__.splitlines()[0])
    _add_globals(ap, suppress=True)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic KITTI-format dataset")
    _add_globals(p, True)
    p.add_argument("--count", type=int, default=argparse.SUPPRESS)
    p.add_argument("--max-objects", dest="max_objects", type=int, default=argparse.SUPPRESS)

    p = sub.add_parser("train", help="quantization-aware training")
    _add_globals(p, True)
    p.add_argument("--train-dir", dest="train_dir", default=argparse.SUPPRESS)
    p.add_argument("--val-dir", dest="val_dir", default=argparse.SUPPRESS)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=argparse.SUPPRESS,
                   help="hold out this trailing share of train-dir when no val-dir is given")
    p.add_argument("--epochs", type=int, default=argparse.SUPPRESS)

    for name, hlp in (("infer", "detections plus activity for a scene or dataset"),
                      ("activity", "per-layer spike and synaptic-operation counts")):
        p = sub.add_parser(name, help=hlp)
        _add_globals(p, True)
        p.add_argument("model", nargs="?", default=argparse.SUPPRESS)
        p.add_argument("input", nargs="?", default=argparse.SUPPRESS,
                       help="a .bin point cloud or a dataset directory")

    p = sub.add_parser("eval", help="average precision on a dataset")
    _add_globals(p, True)
    p.add_argument("model", nargs="?", default=argparse.SUPPRESS)
    p.add_argument("dataset", nargs="?", default=argparse.SUPPRESS)
    p.add_argument("--iou", default=argparse.SUPPRESS, help="comma separated, e.g. 0.5,0.7")
    p.add_argument("--detections", default=argparse.SUPPRESS,
                   help="directory of precomputed <scene>.txt detections (model not needed)")

    p = sub.add_parser("audit", help="range, packing and header checks of a model file")
    _add_globals(p, True)
    p.add_argument("model", nargs="?", default=argparse.SUPPRESS)
    return ap


# --- config handling -----------------------------------------------------------

def effective_config(ns: argparse.Namespace) -> dict:
    """Defaults < ``--config`` file < explicit flags."""
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose")}
    cfg = dict(GLOBAL_DEFAULTS)
    path = flags.get("config")
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg.update(loaded)
    cfg.update({k: v for k, v in flags.items() if k != "config"})
    cfg.pop("config", None)
    cfg["command"] = ns.command
    return cfg


def _require(cfg, *names):
    for n in names:
        if cfg.get(n) in (None, ""):
            raise ConfigError(f"missing required config field '{n}'")


def _grid(cfg) -> GridMeta:
    g = cfg.get("grid")
    if g is None:
        return GridMeta()
    if g == "kitti":
        return GridMeta.kitti()
    try:
        return GridMeta.from_dict(g)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad 'grid': {exc}") from None


def _out_dir(cfg) -> Path:
    _require(cfg, "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _echo(cfg, out: Path):
    _write_json(out / "config.json", cfg)


def _load_model(cfg):
    _require(cfg, "model")
    return spkl.load(cfg["model"])


def _load_inputs(path, meta: GridMeta):
    """(names, bev batch, dataset-or-None) for a .bin file or a dataset directory."""
    p = Path(path)
    if p.is_dir():
        names = [e["scene"] for e in read_manifest(p)]
        bev = [pointcloud_to_bev(load_kitti_pointcloud(p / f"{n}.bin"), meta).data for n in names]
        return names, bev
    if not p.exists():
        raise FileNotFoundError(f"input not found: {path}")
    return [p.stem], [pointcloud_to_bev(load_kitti_pointcloud(p), meta).data]


# --- commands ------------------------------------------------------------------

def cmd_synth(cfg):
    out = _out_dir(cfg)
    seed = int(cfg["seed"] or 0)
    cfg["seed"] = seed
    cfg.setdefault("count", 100)
    cfg.setdefault("max_objects", 5)
    synthesize_dataset(out, seed, int(cfg["count"]), _grid(cfg), max_objects=int(cfg["max_objects"]))
    _echo(cfg, out)
    log.info("wrote %d scenes to %s", cfg["count"], out)
    return EXIT_OK


_RUN_KEYS = {"command", "out", "threads", "train_dir", "val_dir", "val_limit", "val_fraction", "limit", "grid"}


def train_config_from(cfg) -> TrainConfig:
    params = {k: v for k, v in cfg.items() if k not in _RUN_KEYS and v is not None}
    unknown = set(params) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown training config field(s): {', '.join(sorted(unknown))}")
    try:
        return TrainConfig.from_dict(params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from None


def cmd_train(cfg):
    _require(cfg, "train_dir")
    if cfg["seed"] is None:
        cfg["seed"] = 0
    tcfg = train_config_from(cfg)
    out = _out_dir(cfg)
    meta = _grid(cfg)
    data = load_dataset(cfg["train_dir"], meta, tcfg.arch.n_bins, cfg.get("limit"))
    val = None
    if cfg.get("val_dir"):
        val = load_dataset(cfg["val_dir"], meta, tcfg.arch.n_bins, cfg.get("val_limit"))
    elif cfg.get("val_fraction"):
        frac = float(cfg["val_fraction"])
        n_val = int(round(frac * len(data)))
        if not 0 < frac < 1 or not 0 < n_val < len(data):
            raise ConfigError(f"val_fraction {frac} leaves an empty train or validation split")
        # the trailing scenes are held out, so 0.5 and 0.25 give 50/50 and 75/25 splits
        data, val = data.subset(range(len(data) - n_val)), data.subset(range(len(data) - n_val, len(data)))
    # echo the fully resolved training parameters, not just what was given
    cfg.update(tcfg.to_dict())
    _echo(cfg, out)
    t0 = time.perf_counter()
    net, report, _ = train(tcfg, data, out, val_data=val)
    _write_json(out / "timing.json", {"train_seconds": time.perf_counter() - t0})
    violations = net.audit()
    if violations:
        raise InvariantViolation(f"trained model fails audit: {violations[0]}")
    log.info("model written to %s", out / "model.spkl")
    return EXIT_OK


def _run_inference(cfg, with_detections: bool):
    net = _load_model(cfg)  # reject a bad model file before reading any input
    _require(cfg, "input")
    out = _out_dir(cfg)
    meta = _grid(cfg)
    names, bev = _load_inputs(cfg["input"], meta)
    t0 = time.perf_counter()
    results = detect_many(net, bev, meta, int(cfg.get("min_margin", 1)), int(cfg["threads"] or 1),
                          with_activity=True)
    elapsed = time.perf_counter() - t0
    if with_detections:
        det_dir = out / "detections"
        det_dir.mkdir(exist_ok=True)
        for name, (dets, _) in zip(names, results):
            write_detections(dets, det_dir / f"{name}.txt")
    per_scene = {name: act.to_dict() for name, (_, act) in zip(names, results)}
    summary = merge_activity(act for _, act in results)
    _write_json(out / "activity.json", {"scenes": per_scene, "summary": summary})
    _write_json(out / "timing.json", {"scenes": len(names), "total_seconds": elapsed,
                                      "ms_per_scene": 1000 * elapsed / max(len(names), 1)})
    _echo(cfg, out)
    log.info("%d scenes, %.2f ms/scene", len(names), 1000 * elapsed / max(len(names), 1))
    return EXIT_OK


def cmd_infer(cfg):
    return _run_inference(cfg, with_detections=True)


def cmd_activity(cfg):
    return _run_inference(cfg, with_detections=False)


def _parse_ious(v):
    if v is None:
        return (0.5, 0.7)
    if isinstance(v, (int, float)):
        return (float(v),)
    if isinstance(v, str):
        v = [s for s in v.split(",") if s.strip()]
    try:
        ious = tuple(float(s) for s in v)
    except (TypeError, ValueError):
        raise ConfigError(f"bad 'iou' list: {v!r}") from None
    if not ious or any(not 0 < t <= 1 for t in ious):
        raise ConfigError(f"IoU thresholds must lie in (0, 1]: {v!r}")
    return ious


def cmd_eval(cfg):
    if cfg.get("detections") and not cfg.get("dataset") and cfg.get("model"):
        cfg["dataset"] = cfg.pop("model")  # `eval --detections D DATASET`
    _require(cfg, "dataset")
    ious = _parse_ious(cfg.get("iou"))
    cfg["iou"] = list(ious)
    net = None if cfg.get("detections") else _load_model(cfg)
    out = _out_dir(cfg)
    meta = _grid(cfg)
    n_bins = net.cfg.n_bins if net else int(cfg.get("n_bins", 8))
    data = load_dataset(cfg["dataset"], meta, n_bins)
    if net is None:
        det_dir = Path(cfg["detections"])
        dets = []
        for name in data.names:
            f = det_dir / f"{name}.txt"
            dets.append(read_detections(f, n_bins) if f.exists() else [])
    else:
        t0 = time.perf_counter()
        dets = detect_many(net, data.bev, meta, int(cfg.get("min_margin", 1)),
                           int(cfg["threads"] or 1))
        elapsed = time.perf_counter() - t0
    res = average_precision(dets, data.labels, ious)
    report = res.to_dict()
    report["model"] = Path(cfg["detections"] if net is None else cfg["model"]).name
    report["scenes"] = len(data)
    _write_json(out / "eval.json", report)
    if net is not None:
        # latency lives beside the report so eval.json stays byte-reproducible
        _write_json(out / "timing.json", {"scenes": len(data), "total_seconds": elapsed,
                                          "ms_per_scene": 1000 * elapsed / max(len(data), 1)})
    _echo(cfg, out)
    for t in ious:
        log.info("AP@%g %s", t, {k: round(v, 4) for k, v in res.ap[t].items()})
    return EXIT_OK


def cmd_audit(cfg):
    _require(cfg, "model")
    path = Path(cfg["model"])
    if not path.exists():
        raise FileNotFoundError(f"model not found: {path}")
    violations = spkl.audit_file(path)
    report = {"model": str(path), "pass": not violations,
              "violations": [asdict(v) for v in violations]}
    if cfg.get("out"):
        out = _out_dir(cfg)
        _write_json(out / "audit.json", report)
        _echo(cfg, out)
    for v in violations:
        print(f"FAIL {v}")
    print("PASS" if not violations else f"{len(violations)} violation(s)")
    return EXIT_OK if not violations else EXIT_INVARIANT


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "audit": cmd_audit, "activity": cmd_activity}


def main(argv=None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(ns)
        return COMMANDS[ns.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (spkl.SPKLError, FormatError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
