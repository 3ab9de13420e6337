"""``skynas`` command line.

Every subcommand resolves its parameters from defaults, an optional YAML
``--config`` file and explicit flags (in that order of precedence), validates
them, then writes the resolved config as ``config.yaml`` next to its outputs.
Re-running with ``--config <run>/config.yaml`` reproduces the outputs byte for
byte. The output directory is ``--out`` or
``$SKYNAS_OUTPUT_ROOT/<command>-<config hash>`` (root defaults to ``runs``).

Exit codes: 0 success (an infeasible hardware estimate is still a success),
1 usage or config error, 2 data error.
"""
import argparse
import copy
import csv
import hashlib
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__

log = logging.getLogger("skynas")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataFault(Exception):
    pass


# --- config plumbing -----------------------------------------------------------------

def _merge(base, over, path=""):
    """Deep-merge ``over`` into a copy of ``base``; unknown keys are rejected."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise UsageError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and base[k]:
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def _set(cfg, dotted, value):
    if value is None:
        return
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node[k]
    node[keys[-1]] = value


def _dump(d):
    return yaml.safe_dump(d, sort_keys=False, default_flow_style=None)


def _config_hash(cfg):
    return hashlib.sha256(_dump(cfg).encode()).hexdigest()[:10]


def _load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} not found")
    try:
        d = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise UsageError(f"{p}: invalid YAML: {e}") from None
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise UsageError(f"{p}: config must be a mapping")
    d = dict(d)
    d.pop("command", None)
    return d


def _run_dir(command, cfg, out):
    if out is None:
        root = Path(os.environ.get("SKYNAS_OUTPUT_ROOT", "runs"))
        out = root / f"{command}-{_config_hash(cfg)}"
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        raise UsageError(f"output directory {out} exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path, text):
    Path(path).write_text(text)


def _abs(p):
    return None if p is None else str(Path(p).resolve())


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# --- shared resolvers ------------------------------------------------------------------

DATA_DEFAULT = {"dir": None, "generate": None, "val_fraction": 0.2, "split_seed": 0}


def _resolve_data(d, need=True):
    from .data import DataError

    d = dict(d)
    if d.get("dir") is not None and d.get("generate") is not None:
        raise UsageError("data: give either dir or generate, not both")
    if d.get("dir") is not None:
        d["dir"] = _abs(d["dir"])
    elif d.get("generate") is not None:
        try:
            d["generate"] = _dataset_spec(d["generate"]).to_dict()
        except (DataError, TypeError) as e:
            raise UsageError(f"data.generate: {e}") from None
    elif need:
        raise UsageError("no data: pass --data DIR or a data.generate spec")
    if not 0 <= float(d["val_fraction"]) < 1:
        raise UsageError("data.val_fraction must be in [0, 1)")
    return d


def _dataset_spec(d):
    from .data import DatasetSpec

    d = dict(d)
    for k in ("image_hw", "aspect_range"):
        if k in d and d[k] is not None:
            d[k] = tuple(d[k])
    return DatasetSpec(**d)


def _load_data(d):
    from .data import DataError, generate, load_dataset

    try:
        if d.get("dir") is not None:
            return load_dataset(d["dir"])
        return generate(_dataset_spec(d["generate"]))
    except DataError as e:
        raise DataFault(str(e)) from None


def _split(ds, d):
    if not d["val_fraction"]:
        return ds, None
    return ds.split(float(d["val_fraction"]), int(d["split_seed"]))


def _genome(d):
    from .genome import GenomeError, NetworkGenome

    try:
        g = NetworkGenome.from_dict(d)
        g.validate()
        return g
    except GenomeError as e:
        raise DataFault(f"invalid genome: {e}") from None


def _genome_from_args(args_genome, cfg_genome):
    from .genome import GenomeError, NetworkGenome, skynet_genome

    if args_genome is not None:
        p = Path(args_genome)
        if p.is_file():
            try:
                return NetworkGenome.loads(p.read_text()).to_dict()
            except GenomeError as e:
                raise DataFault(f"{p}: {e}") from None
        name = args_genome.split("/")
        if name[0] in ("skynet-A", "skynet-B", "skynet-C"):
            div = int(name[1]) if len(name) > 1 else 1
            return skynet_genome(name[0][-1], div).to_dict()
        raise DataFault(f"genome file {p} not found")
    if cfg_genome is None:
        raise UsageError("no genome: pass --genome FILE (or skynet-C, skynet-C/4)")
    return _genome(cfg_genome).to_dict()


def _load_checkpoint(path):
    from .checkpoint import CheckpointError, load_model, load_quantized

    p = Path(path)
    if not p.is_file():
        raise DataFault(f"checkpoint {p} not found")
    try:
        return load_model(p)
    except CheckpointError as e:
        if "not a float checkpoint" not in str(e):
            raise DataFault(str(e)) from None
    try:
        return load_quantized(p)
    except CheckpointError as e:
        raise DataFault(str(e)) from None


def _target(d):
    from .hw_model import load_profile, target_from_dict

    try:
        if isinstance(d, str):
            return load_profile(d)
        return target_from_dict(d)
    except (FileNotFoundError, TypeError, ValueError) as e:
        raise UsageError(f"target: {e}") from None


def _schemes(lst):
    from .quant import QuantError, QuantScheme

    out = []
    for s in lst:
        try:
            fb, wb = (int(v) for v in s)
            out.append(QuantScheme(fb, wb))
        except (TypeError, ValueError, QuantError) as e:
            raise UsageError(f"bad quantization scheme {s!r}: {e}") from None
    if not out:
        raise UsageError("need at least one quantization scheme")
    return out


def _parse_scheme(text):
    try:
        fb, wb = text.split(",")
        return [int(fb), int(wb)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"scheme must look like FM,W (e.g. 9,11), got {text!r}") from None


# --- gen-data -----------------------------------------------------------------------------

def _gen_data_defaults():
    from .data import DatasetSpec

    return {"dataset": DatasetSpec().to_dict()}


def cmd_gen_data(args, cfg):
    from .data import DataError, generate, save_dataset

    _set(cfg, "dataset.count", args.count)
    _set(cfg, "dataset.seed", args.seed)
    _set(cfg, "dataset.fixed_ratio", args.fixed_ratio)
    if args.size is not None:
        cfg["dataset"]["image_hw"] = list(args.size)
    try:
        cfg["dataset"] = _dataset_spec(cfg["dataset"]).to_dict()
    except (DataError, TypeError) as e:
        raise UsageError(f"dataset: {e}") from None
    out = _run_dir("gen-data", cfg, args.out)
    ds = generate(_dataset_spec(cfg["dataset"]))
    save_dataset(ds, out / "data")
    return out, cfg, {"images": len(ds)}


# --- search ---------------------------------------------------------------------------------

def _search_defaults():
    from .search import SwarmConfig

    return {
        "swarm": SwarmConfig().to_dict(),
        "evaluator": {"kind": "surrogate", "optimum": None, "seed": 0, "data": dict(DATA_DEFAULT),
                      "lr": 0.05, "batch_size": 16},
        "estimator": {"kind": "fpga", "target": "ultra96", "scheme": [9, 11], "batch": 4, "gpu_target": "tx2",
                      "gmacs": 0.05},
    }


def _build_search(cfg):
    from .genome import GenomeError, random_genome
    from .hw_model import FpgaLatency, GpuLatency
    from .search import MacLatency, SearchError, SurrogateEvaluator, SwarmConfig, TinyTrainerEvaluator

    try:
        swarm = SwarmConfig.from_dict(cfg["swarm"])
    except (SearchError, GenomeError, TypeError) as e:
        raise UsageError(f"swarm: {e}") from None
    cfg["swarm"] = swarm.to_dict()
    bounds = swarm.bounds
    ev = cfg["evaluator"]
    kind = ev["kind"]
    if kind == "surrogate":
        if ev["optimum"] is None:
            ev["optimum"] = random_genome(np.random.default_rng([int(ev["seed"]), 7]), bounds).to_dict()
        evaluator = SurrogateEvaluator(_genome(ev["optimum"]), bounds.widths, seed=int(ev["seed"]))
        ev["data"] = dict(DATA_DEFAULT)
    elif kind == "tiny-trainer":
        ev["optimum"] = None
        ev["data"] = _resolve_data(ev["data"])
        train_set, val_set = _split(_load_data(ev["data"]), ev["data"])
        if val_set is None or not len(val_set) or not len(train_set):
            raise DataFault("tiny-trainer needs non-empty train and validation splits")
        shape = tuple(train_set.images.shape[1:])
        if tuple(bounds.input_shape) != shape:
            raise UsageError(f"swarm.bounds.input_shape {bounds.input_shape} does not match data {shape}")
        evaluator = TinyTrainerEvaluator(train_set, val_set, int(ev["seed"]), int(ev["batch_size"]), float(ev["lr"]))
    else:
        raise UsageError(f"evaluator.kind must be surrogate or tiny-trainer, got {kind!r}")
    est = cfg["estimator"]
    shape = tuple(bounds.input_shape)
    if est["kind"] == "fpga":
        t = _target(est["target"])
        est["target"] = t.to_dict()
        q = _schemes([est["scheme"]])[0]
        estimator = FpgaLatency(t, q, shape, int(est["batch"]))
    elif est["kind"] == "gpu":
        t = _target(est["gpu_target"])
        est["gpu_target"] = t.to_dict()
        estimator = GpuLatency(t, shape)
    elif est["kind"] == "mac":
        estimator = MacLatency(shape, float(est["gmacs"]))
    else:
        raise UsageError(f"estimator.kind must be fpga, gpu or mac, got {est['kind']!r}")
    return swarm, evaluator, estimator


def cmd_search(args, cfg):
    from .search import run_search

    _set(cfg, "swarm.I", args.iterations)
    if args.iterations is not None:
        cfg["swarm"]["epoch_schedule"] = None
    _set(cfg, "swarm.N", args.particles)
    _set(cfg, "swarm.rng_seed", args.seed)
    _set(cfg, "evaluator.kind", args.evaluator)
    if args.data is not None:
        cfg["evaluator"]["data"]["dir"] = args.data
        cfg["evaluator"]["data"]["generate"] = None
    swarm, evaluator, estimator = _build_search(cfg)
    out = _run_dir("search", cfg, args.out)
    report = run_search(swarm, evaluator, estimator, workers=args.workers)
    _write(out / "report.yaml", report.to_yaml())
    _write(out / "report.csv", report.to_csv())
    _write(out / "pareto.csv", _csv_text(
        ["iteration", "particle", "acc", "latency_ms", "genome"],
        [(r.iteration, r.particle, r.accuracy, r.latency_ms, _dump(r.genome.to_dict()).strip()) for r in report.pareto],
    ))
    best = max(report.group_bests.values(), key=lambda b: (b.fitness, -b.latency))
    _write(out / "best_genome.yaml", best.genome.dumps())
    return out, cfg, {"best_fitness": best.fitness}


# --- train / eval ---------------------------------------------------------------------------

def _train_defaults():
    from .train import TrainConfig

    return {"genome": None, "data": dict(DATA_DEFAULT), "train": TrainConfig().to_dict(), "init_seed": 0}


def cmd_train(args, cfg):
    from .checkpoint import save_model
    from .genome import GenomeError, instantiate
    from .model import Model
    from .train import TrainConfig, fit_anchors, train

    cfg["genome"] = _genome_from_args(args.genome, cfg["genome"])
    _set(cfg, "train.epochs", args.epochs)
    _set(cfg, "train.seed", args.seed)
    if args.data is not None:
        cfg["data"]["dir"], cfg["data"]["generate"] = args.data, None
    if cfg["data"]["dir"] is None and cfg["data"]["generate"] is None:
        cfg["data"]["generate"] = {}
    cfg["data"] = _resolve_data(cfg["data"])
    try:
        tcfg = TrainConfig.from_dict(cfg["train"])
    except TypeError as e:
        raise UsageError(f"train: {e}") from None
    if tcfg.epochs < 0:
        raise UsageError("train.epochs must be non-negative")
    cfg["train"] = tcfg.to_dict()
    genome = _genome(cfg["genome"])
    ds = _load_data(cfg["data"])
    if not len(ds):
        raise DataFault("training set is empty")
    train_set, val_set = _split(ds, cfg["data"])
    try:
        spec = instantiate(genome, ds.image_shape)
    except GenomeError as e:
        raise DataFault(f"genome does not fit {ds.image_shape} inputs: {e}") from None
    out = _run_dir("train", cfg, args.out)
    model = Model.initialize(spec, int(cfg["init_seed"]), fit_anchors(train_set.boxes))
    model, history = train(model, train_set, tcfg, val_set, on_epoch=lambda r: log.info("%s", r))
    save_model(model, out / "model.ckpt")
    _write(out / "metrics.csv", _csv_text(
        ["epoch", "loss", "train_iou", "val_iou"],
        [(r.epoch, r.loss, r.train_iou, r.val_iou) for r in history],
    ))
    summary = {"epochs": len(history), "final_val_iou": history[-1].val_iou if history else None}
    return out, cfg, summary


def _predict(model, ds, batch_size=32):
    preds = []
    for i in range(0, len(ds), batch_size):
        idx = np.arange(i, min(i + batch_size, len(ds)))
        preds.append(model.predict(ds.float_images(idx), batch_size))
    return np.concatenate(preds)


def _check_shape(model, ds):
    if tuple(model.spec.input_shape) != tuple(ds.image_shape):
        raise DataFault(f"checkpoint expects {tuple(model.spec.input_shape)} inputs, data is {tuple(ds.image_shape)}")


def cmd_eval(args, cfg):
    from .scoring import iou_array

    if args.checkpoint is not None:
        cfg["checkpoint"] = args.checkpoint
    if cfg["checkpoint"] is None:
        raise UsageError("no checkpoint given")
    cfg["checkpoint"] = _abs(cfg["checkpoint"])
    if args.data is not None:
        cfg["data"]["dir"], cfg["data"]["generate"] = args.data, None
    cfg["data"]["val_fraction"] = 0.0
    cfg["data"] = _resolve_data(cfg["data"])
    model = _load_checkpoint(cfg["checkpoint"])
    ds = _load_data(cfg["data"])
    if not len(ds):
        raise DataFault("evaluation set is empty")
    _check_shape(model, ds)
    out = _run_dir("eval", cfg, args.out)
    ious = iou_array(_predict(model, ds), ds.boxes)
    _write(out / "ious.csv", _csv_text(["image_id", "iou"], [(f"{i:06d}", float(v)) for i, v in enumerate(ious)]))
    summary = {"images": len(ds), "mean_iou": float(ious.mean())}
    _write(out / "summary.yaml", _dump(summary))
    return out, cfg, summary


# --- quantize -----------------------------------------------------------------------------------

def cmd_quantize(args, cfg):
    from .checkpoint import save_quantized
    from .model import Model
    from .quant import quantize_model
    from .scoring import iou_array

    if args.checkpoint is not None:
        cfg["checkpoint"] = args.checkpoint
    if cfg["checkpoint"] is None:
        raise UsageError("no checkpoint given")
    cfg["checkpoint"] = _abs(cfg["checkpoint"])
    if args.scheme:
        cfg["schemes"] = [list(s) for s in args.scheme]
    _schemes(cfg["schemes"])
    if args.calib is not None:
        cfg["calib"]["dir"], cfg["calib"]["generate"] = args.calib, None
    if args.data is not None:
        cfg["data"]["dir"], cfg["data"]["generate"] = args.data, None
    cfg["calib"]["val_fraction"] = 0.0
    cfg["data"]["val_fraction"] = 0.0
    if cfg["calib"]["dir"] is None and cfg["calib"]["generate"] is None:
        raise DataFault("missing calibration data: pass --calib DIR")
    cfg["calib"] = _resolve_data(cfg["calib"])
    cfg["data"] = _resolve_data(cfg["data"]) if (cfg["data"]["dir"] or cfg["data"]["generate"]) else cfg["data"]
    model = _load_checkpoint(cfg["checkpoint"])
    if not isinstance(model, Model):
        raise DataFault("quantize needs a float checkpoint")
    calib = _load_data(cfg["calib"])
    if not len(calib):
        raise DataFault("calibration set is empty")
    _check_shape(model, calib)
    ev = _load_data(cfg["data"]) if (cfg["data"]["dir"] or cfg["data"]["generate"]) else calib
    _check_shape(model, ev)
    n = min(int(cfg["calib_count"]), len(calib))
    out = _run_dir("quantize", cfg, args.out)
    x_cal = calib.float_images(np.arange(n))
    f_iou = float(iou_array(_predict(model, ev), ev.boxes).mean())
    rows = []
    for i, q in enumerate(_schemes(cfg["schemes"]), start=1):
        qm = quantize_model(model, q, x_cal)
        q_iou = float(iou_array(_predict(qm, ev), ev.boxes).mean())
        save_quantized(qm, out / f"fm{q.fm_bits}_w{q.w_bits}.ckpt")
        rows.append((i, q.fm_bits, q.w_bits, f_iou, q_iou, q_iou - f_iou))
    _write(out / "report.csv", _csv_text(["scheme", "fm_bits", "w_bits", "float_iou", "quant_iou", "delta"], rows))
    return out, cfg, {"float_iou": f_iou}


def _quantize_defaults():
    return {"checkpoint": None, "schemes": [[9, 11]], "calib": dict(DATA_DEFAULT), "calib_count": 32,
            "data": dict(DATA_DEFAULT)}


# --- estimate ---------------------------------------------------------------------------------

def _estimate_defaults():
    return {"genome": None, "checkpoint": None, "input_shape": [3, 160, 320], "target": "ultra96",
            "schemes": [[16, 16]], "batch": 4, "overlap": True}


def cmd_estimate(args, cfg):
    from .genome import GenomeError, instantiate
    from .hw_model import GpuTarget, estimate_fpga, estimate_gpu, make_tiling_plan

    if args.checkpoint is not None:
        cfg["checkpoint"], cfg["genome"] = _abs(args.checkpoint), None
    if cfg["checkpoint"] is not None:
        m = _load_checkpoint(cfg["checkpoint"])
        cfg["genome"] = m.spec.genome.to_dict()
        cfg["input_shape"] = list(m.spec.input_shape)
        cfg["checkpoint"] = None  # the genome is embedded from here on
    else:
        cfg["genome"] = _genome_from_args(args.genome, cfg["genome"])
    _set(cfg, "target", args.target)
    if args.scheme:
        cfg["schemes"] = [list(s) for s in args.scheme]
    _set(cfg, "batch", args.batch)
    if args.no_overlap:
        cfg["overlap"] = False
    t = _target(cfg["target"])
    cfg["target"] = t.to_dict()
    schemes = _schemes(cfg["schemes"])
    try:
        spec = instantiate(_genome(cfg["genome"]), tuple(cfg["input_shape"]))
        plan = make_tiling_plan(tuple(cfg["input_shape"]), int(cfg["batch"]))
    except (GenomeError, ValueError) as e:
        raise UsageError(str(e)) from None
    out = _run_dir("estimate", cfg, args.out)
    summary_rows, layer_rows = [], []
    for q in schemes:
        if isinstance(t, GpuTarget):
            e = estimate_gpu(spec, t)
        else:
            e = estimate_fpga(spec, q, plan, t, overlap=bool(cfg["overlap"]))
        summary_rows.append((q.fm_bits, q.w_bits, e.latency_ms, e.latency_per_image_ms, e.dsp_used,
                             e.bram_bytes_used, e.bottleneck, e.feasible, e.weight_traffic_per_image))
        for r in e.rows:
            layer_rows.append((q.fm_bits, q.w_bits, r.name, r.macs, r.load, r.conv3, r.conv1, r.pool,
                               r.writeback, r.cycles, r.bottleneck))
    _write(out / "summary.csv", _csv_text(
        ["fm_bits", "w_bits", "latency_ms", "latency_per_image_ms", "dsp_used", "bram_bytes", "bottleneck",
         "feasible", "weight_traffic_per_image"], summary_rows))
    _write(out / "layers.csv", _csv_text(
        ["fm_bits", "w_bits", "layer", "macs", "load", "exe_conv3", "exe_conv1", "exe_pool", "writeback",
         "cycles", "bottleneck"], layer_rows))
    return out, cfg, {"latency_ms": summary_rows[0][2], "feasible": summary_rows[0][7]}


# --- score ----------------------------------------------------------------------------------------

def _score_defaults():
    return {"results_dir": None, "ground_truth": None, "track": "fpga"}


def cmd_score(args, cfg):
    from .scoring import ScoringError, TeamResult, leaderboard, read_box_csv, read_team_energies, team_ious

    _set(cfg, "results_dir", args.results_dir)
    _set(cfg, "ground_truth", args.ground_truth)
    _set(cfg, "track", args.track)
    if cfg["results_dir"] is None or cfg["ground_truth"] is None:
        raise UsageError("score needs --results-dir and --ground-truth")
    if cfg["track"] not in ("fpga", "gpu"):
        raise UsageError(f"track must be fpga or gpu, got {cfg['track']!r}")
    cfg["results_dir"], cfg["ground_truth"] = _abs(cfg["results_dir"]), _abs(cfg["ground_truth"])
    rdir = Path(cfg["results_dir"])
    if not rdir.is_dir():
        raise DataFault(f"results directory {rdir} not found")
    errors = []
    try:
        gt = read_box_csv(cfg["ground_truth"])
    except (OSError, ScoringError) as e:
        raise DataFault(str(e)) from None
    try:
        energies = read_team_energies(rdir / "energy.csv")
    except (OSError, ScoringError) as e:
        raise DataFault(str(e)) from None
    results = []
    for team in sorted(energies):
        path = rdir / f"{team}.csv"
        try:
            results.append(TeamResult(team, team_ious(read_box_csv(path), gt, path), energies[team]))
        except (OSError, ScoringError) as e:
            errors.append(str(e))
    if errors:
        raise DataFault("\n".join(errors))
    if not results:
        raise DataFault(f"{rdir}: no team results")
    out = _run_dir("score", cfg, args.out)
    rows = leaderboard(results, cfg["track"])
    _write(out / "leaderboard.csv", _csv_text(
        ["rank", "team", "r_iou", "es", "ts"],
        [(i, r.team, r.r_iou, r.es, r.ts) for i, r in enumerate(rows, start=1)],
    ))
    return out, cfg, {"teams": len(rows), "winner": rows[0].team}


def _eval_defaults():
    return {"checkpoint": None, "data": dict(DATA_DEFAULT)}


# --- entry point ---------------------------------------------------------------------------------

COMMANDS = {
    "search": (cmd_search, _search_defaults),
    "train": (cmd_train, _train_defaults),
    "eval": (cmd_eval, _eval_defaults),
    "quantize": (cmd_quantize, _quantize_defaults),
    "estimate": (cmd_estimate, _estimate_defaults),
    "score": (cmd_score, _score_defaults),
    "gen-data": (cmd_gen_data, _gen_data_defaults),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="skynas", description="Hardware-aware detector search, training and deployment modeling.")
    p.add_argument("--version", action="version", version=f"skynas {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML config (e.g. a previous run's config.yaml)")
        sp.add_argument("--out", help="output directory (default $SKYNAS_OUTPUT_ROOT/<command>-<hash>)")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        return sp

    s = common(sub.add_parser("search", help="group-based PSO architecture search"))
    s.add_argument("--evaluator", choices=("surrogate", "tiny-trainer"))
    s.add_argument("--iterations", type=int, help="number of iterations I (resets the epoch schedule)")
    s.add_argument("--particles", type=int, help="particles per group N")
    s.add_argument("--seed", type=int, help="swarm seed")
    s.add_argument("--data", help="dataset directory for the tiny-trainer evaluator")
    s.add_argument("--workers", type=int, default=1, help="parallel evaluation processes")

    s = common(sub.add_parser("train", help="train a genome on a dataset"))
    s.add_argument("--genome", help="genome YAML file, or skynet-A/B/C with optional /DIVISOR")
    s.add_argument("--data", help="dataset directory (default: generated synthetic set)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int, help="training seed")

    s = common(sub.add_parser("eval", help="mean IoU of a checkpoint on a dataset"))
    s.add_argument("--checkpoint", help="float or quantized checkpoint")
    s.add_argument("--data", help="dataset directory")

    s = common(sub.add_parser("quantize", help="fold BN, quantize and compare IoU per scheme"))
    s.add_argument("--checkpoint", help="float checkpoint")
    s.add_argument("--scheme", type=_parse_scheme, action="append", help="FM,W bit widths; repeatable")
    s.add_argument("--calib", help="calibration dataset directory")
    s.add_argument("--data", help="evaluation dataset directory (default: calibration set)")

    s = common(sub.add_parser("estimate", help="FPGA/GPU latency and resource estimate"))
    s.add_argument("--genome", help="genome YAML file, or skynet-A/B/C with optional /DIVISOR")
    s.add_argument("--checkpoint", help="take the genome from a checkpoint")
    s.add_argument("--target", help="profile name (ultra96, tx2) or YAML file")
    s.add_argument("--scheme", type=_parse_scheme, action="append", help="FM,W bit widths; repeatable")
    s.add_argument("--batch", type=int, help="images stitched per input (perfect square)")
    s.add_argument("--no-overlap", action="store_true", help="disable Load/WriteBack overlap")

    s = common(sub.add_parser("score", help="contest leaderboard from team result files"))
    s.add_argument("--results-dir", help="directory with <team>.csv boxes and energy.csv")
    s.add_argument("--ground-truth", help="ground-truth box CSV")
    s.add_argument("--track", choices=("fpga", "gpu"))

    s = common(sub.add_parser("gen-data", help="write a synthetic detection dataset"))
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    s.add_argument("--fixed-ratio", type=float, help="every object covers this fraction of the image")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    fn, defaults = COMMANDS[args.command]
    try:
        if getattr(args, "workers", 1) is not None and getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be at least 1")
        cfg = _merge(defaults(), _load_config_file(args.config))
        out, cfg, summary = fn(args, cfg)
        _write(out / "config.yaml", f"# skynas {args.command} resolved config\n"
               + _dump({"command": args.command, **cfg}))
        print(_dump({"out": str(out), **summary}).strip())
        return EXIT_OK
    except UsageError as e:
        print(f"skynas {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataFault as e:
        print(f"skynas {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
