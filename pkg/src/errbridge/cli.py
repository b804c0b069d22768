"""Command-line entry point.

Every subcommand writes into ``<out>/<command>-<hash>``, where the hash covers
the resolved configuration, the seed, the command options and the content of
the input artifacts.  Worker counts are deliberately excluded, so runs that
differ only in ``--threads`` land in identically named directories with
byte-identical contents.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import bridge as br
from . import pipeline as pl
from . import schedule as sch
from .checkpoint import load_model, save_model
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .datagen import build_corpus, corpus_from_items, generate_items, load_corpus
from .denoiser import ExpertPair, NumericError
from .metrics import evaluate
from .tensorio import SeedSpec, export_ppm, load_tensor, save_tensor
from .wsc import WscData, evaluate_ap, train_wsc

log = logging.getLogger("errbridge")

MAP_SOURCES = ("wsc", "ones", "rand")
_OPEN_RUNS = []


# ---------------------------------------------------------------- run plumbing

def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


class Run:
    """A content-addressed output directory with a timestamp-free log."""

    def __init__(self, args, cfg: RunConfig, inputs: dict, options: dict):
        key = {"command": args.command, "config": cfg.to_dict(), "options": options,
               "inputs": {k: _digest(v) for k, v in sorted(inputs.items()) if v is not None}}
        blob = json.dumps(key, sort_keys=True, separators=(",", ":")).encode()
        self.hash = hashlib.sha256(blob).hexdigest()[:16]
        self.dir = Path(args.out) / f"{args.command}-{self.hash}"
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.json").write_text(json.dumps(key, indent=1, sort_keys=True))
        self._handler = logging.FileHandler(self.dir / "log.txt", mode="w")
        self._handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        log.addHandler(self._handler)
        log.setLevel(logging.INFO)
        _OPEN_RUNS.append(self)

    def close(self):
        log.removeHandler(self._handler)
        self._handler.close()
        if self in _OPEN_RUNS:
            _OPEN_RUNS.remove(self)

    def write_json(self, name, payload):
        (self.dir / name).write_text(json.dumps(payload, indent=1, sort_keys=True, default=_json_default))


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        data = cfg.to_dict()
        data["seed"] = args.seed
        cfg = config_from_dict(data)
    return cfg


def _corpus(args, cfg: RunConfig):
    if args.corpus:
        return load_corpus(args.corpus)
    return corpus_from_items(generate_items(cfg.corpus, SeedSpec(cfg.seed).child("corpus"), args.threads))


def _split(corpus, name):
    if name == "all":
        return corpus
    return corpus.train() if name == "train" else corpus.test()


def _load(path, kind):
    if not path:
        return None
    model, _ = load_model(path)
    if kind == "bridge" and not isinstance(model, ExpertPair):
        model = ExpertPair(model, model)
    return model


def _maps(source, corpus, wsc, seeds):
    shape = corpus.x0.shape[-2:]
    if source == "ones":
        return np.ones((len(corpus),) + shape, np.float32)
    if source == "rand":
        return pl.random_maps(shape, seeds)
    if wsc is None:
        raise ConfigError("error maps from the classifier need --wsc")
    return pl.compute_maps(wsc, corpus)


def _write_history(path, hist):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "iteration", "loss"])
        for phase, values in hist.items():
            for i, v in enumerate(values):
                w.writerow([phase, i, repr(float(v))])


def _write_outputs(run: Run, ids, outputs, maps=None, ppm=False):
    (run.dir / "outputs").mkdir(exist_ok=True)
    files = []
    for i, img in zip(ids, outputs):
        rel = f"outputs/{i}.bft"
        save_tensor(img, run.dir / rel)
        if ppm:
            export_ppm(img, run.dir / f"outputs/{i}.ppm")
        files.append(rel)
    payload = {"ids": list(ids), "files": files}
    if maps is not None:
        payload["maps"] = []
        for i, m in zip(ids, maps):
            rel = f"outputs/{i}_M.bft"
            save_tensor(m[None], run.dir / rel)
            payload["maps"].append(rel)
    run.write_json("outputs.json", payload)


def _report(corpus, outputs, cfg):
    rep = evaluate(list(outputs), list(corpus.x0), cfg.eval.feature_seed)
    base = evaluate(list(corpus.x1), list(corpus.x0), cfg.eval.feature_seed)
    improved = [float(a < b) for a, b in zip(rep.mse, base.mse)]
    return rep, {"output": rep.aggregate(), "initial": base.aggregate(),
                 "fraction_improved": float(np.mean(improved)) if improved else 0.0}


def _sampler(cfg: RunConfig, **overrides):
    return dataclasses.replace(cfg.sampler, **overrides) if overrides else cfg.sampler


def _run_sampler(cfg, corpus, maps, pair, wsc, threads, sampler=None, x1=None):
    sampler = sampler or cfg.sampler
    if sampler.use_guidance and wsc is None:
        raise ConfigError("sampler.use_guidance is set but no --wsc checkpoint was given")
    seeds = pl.item_seeds(SeedSpec(cfg.seed).child("sample"), corpus.ids)
    x1 = corpus.x1 if x1 is None else x1
    return pl.refine(cfg.schedule, x1, corpus.C, corpus.P, maps, corpus.synth, pair, sampler, seeds,
                     wsc=wsc, threads=threads)


def _train_bridge(cfg, corpus, maps, x1=None, C=None):
    data = br.BridgeData.from_arrays(corpus.x0, corpus.x1 if x1 is None else x1,
                                     corpus.C if C is None else C, corpus.P, maps, corpus.synth)
    pair, hist = pl.fit_bridge(data, cfg.denoiser, cfg.schedule, cfg.bridge_train,
                               SeedSpec(cfg.seed).child("bridge"), log=log.info)
    return pair, hist


def _bridge_meta(cfg, run):
    s = cfg.schedule
    return {"schedule": {"beta_min": s.beta_min, "beta_max": s.beta_max, "form": s.form},
            "config_hash": cfg.config_hash(), "run_hash": run.hash}


# ---------------------------------------------------------------- subcommands

def cmd_datagen(args, cfg):
    run = Run(args, cfg, {}, {})
    manifest = build_corpus(cfg.corpus, SeedSpec(cfg.seed).child("corpus"), run.dir / "corpus", args.threads)
    counts = {s: sum(1 for e in manifest["items"] if e["split"] == s) for s in ("train", "test")}
    log.info(f"corpus items={len(manifest['items'])} train={counts['train']} test={counts['test']}")
    return run


def cmd_train_wsc(args, cfg):
    mode = args.mode or cfg.wsc_train.mode
    run = Run(args, cfg, {"corpus": args.corpus}, {"mode": mode})
    corpus = _corpus(args, cfg).train()
    tcfg = dataclasses.replace(cfg.wsc_train, mode=mode)
    model, hist = train_wsc(WscData.from_corpus(corpus), tcfg, SeedSpec(cfg.seed).child("wsc", mode),
                            cfg.wsc, log=log.info)
    save_model(model, run.dir / "wsc", {"config_hash": cfg.config_hash(), "mode": mode})
    _write_history(run.dir / "history.csv", {mode: hist})
    return run


def cmd_eval_wsc(args, cfg):
    run = Run(args, cfg, {"corpus": args.corpus, "wsc": _manifest(args.wsc)}, {"split": args.split})
    corpus = _split(_corpus(args, cfg), args.split)
    curve = evaluate_ap(_load(args.wsc, "wsc"), corpus)
    curve.to_csv(run.dir / "pr_curve.csv")
    run.write_json("metrics.json", {"ap": curve.ap, "n": len(corpus)})
    log.info(f"average precision {curve.ap:.6f}")
    return run


def cmd_train_bridge(args, cfg):
    opts = {"maps": args.maps, "inpaint": args.inpaint, "warped_aug": args.warped_aug}
    run = Run(args, cfg, {"corpus": args.corpus, "wsc": _manifest(args.wsc)}, opts)
    corpus = _corpus(args, cfg).train()
    seeds = pl.item_seeds(SeedSpec(cfg.seed).child("train-maps"), corpus.ids)
    maps = _maps(args.maps, corpus, _load(args.wsc, "wsc"), seeds)
    x1, C = None, None
    if args.inpaint:
        x1, maps = pl.inpaint_inputs(corpus.x1, maps, seeds)
    if args.warped_aug:
        C = pl.warped_garments(corpus, SeedSpec(cfg.seed).child("warped-aug"))
    pair, hist = _train_bridge(cfg, corpus, maps, x1, C)
    meta = _bridge_meta(cfg, run)
    meta.update(opts)
    save_model(pair, run.dir / "bridge", meta)
    _write_history(run.dir / "history.csv", hist)
    return run


def _sample_like(args, cfg, command_opts, maps_source, sampler=None, inpaint=False):
    inputs = {"corpus": args.corpus, "wsc": _manifest(args.wsc), "bridge": _manifest(args.bridge)}
    run = Run(args, cfg, inputs, command_opts)
    corpus = _split(_corpus(args, cfg), args.split)
    wsc = _load(args.wsc, "wsc")
    pair = _load(args.bridge, "bridge")
    if pair is None:
        raise ConfigError("sampling needs a --bridge checkpoint")
    seeds = pl.item_seeds(SeedSpec(cfg.seed).child("sample-maps"), corpus.ids)
    maps = _maps(maps_source, corpus, wsc, seeds)
    x1 = None
    if inpaint:
        x1, maps = pl.inpaint_inputs(corpus.x1, maps, seeds)
    sampler = sampler or cfg.sampler
    out = _run_sampler(cfg, corpus, maps, pair, wsc if sampler.use_guidance else None, args.threads, sampler, x1)
    _write_outputs(run, corpus.ids, out, maps, ppm=getattr(args, "ppm", False))
    rep, summary = _report(corpus, out, cfg)
    rep.to_csv(run.dir / "metrics.csv", corpus.ids)
    run.write_json("metrics.json", summary)
    log.info(f"mse {summary['initial']['mse']:.6g} -> {summary['output']['mse']:.6g}, "
             f"improved on {summary['fraction_improved']:.3f} of {len(corpus)} items")
    return run


def cmd_sample(args, cfg):
    return _sample_like(args, cfg, {"maps": args.maps, "split": args.split}, args.maps)


def cmd_refine(args, cfg):
    if not args.wsc:
        raise ConfigError("refine needs a --wsc checkpoint")
    return _sample_like(args, cfg, {"split": args.split}, "wsc")


def cmd_eval(args, cfg):
    out_manifest = Path(args.outputs)
    if out_manifest.is_dir():
        out_manifest = out_manifest / "outputs.json"
    run = Run(args, cfg, {"corpus": args.corpus, "outputs": out_manifest}, {})
    corpus = _corpus(args, cfg)
    spec = json.loads(out_manifest.read_text())
    index = {i: k for k, i in enumerate(corpus.ids)}
    missing = [i for i in spec["ids"] if i not in index]
    if missing:
        raise ConfigError(f"outputs reference ids absent from the corpus: {missing[:5]}")
    sub = corpus.subset(np.isin(np.arange(len(corpus)), [index[i] for i in spec["ids"]]))
    order = {i: k for k, i in enumerate(spec["ids"])}
    outputs = [None] * len(sub)
    for k, i in enumerate(sub.ids):
        outputs[k] = load_tensor(out_manifest.parent / spec["files"][order[i]])
    rep, summary = _report(sub, np.stack(outputs), cfg)
    rep.to_json(run.dir / "report.json")
    rep.to_csv(run.dir / "metrics.csv", sub.ids)
    run.write_json("metrics.json", summary)
    return run


def cmd_schedule_dump(args, cfg):
    run = Run(args, cfg, {}, {"rows": args.rows})
    with open(run.dir / "schedule.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "beta", "sigma_sq", "sigma_bar_sq", "var"])
        for row in sch.dump_rows(cfg.schedule, args.rows):
            w.writerow([repr(float(v)) for v in row])
    return run


def cmd_ablate(args, cfg):
    name = args.name
    if name in ("m-ones", "rand-m"):
        return _sample_like(args, cfg, {"ablation": name, "split": args.split},
                            "ones" if name == "m-ones" else "rand")
    if name == "no-guidance":
        return _sample_like(args, cfg, {"ablation": name, "split": args.split}, "wsc",
                            sampler=_sampler(cfg, use_guidance=False))
    # the two remaining controls need their own bridge weights
    if not args.wsc:
        raise ConfigError(f"ablation {name} needs a --wsc checkpoint")
    inputs = {"corpus": args.corpus, "wsc": _manifest(args.wsc)}
    run = Run(args, cfg, inputs, {"ablation": name, "split": args.split})
    full = _corpus(args, cfg)
    train, test = full.train(), _split(full, args.split)
    wsc = _load(args.wsc, "wsc")
    tr_seeds = pl.item_seeds(SeedSpec(cfg.seed).child("train-maps"), train.ids)
    te_seeds = pl.item_seeds(SeedSpec(cfg.seed).child("sample-maps"), test.ids)
    tr_maps, te_maps = pl.compute_maps(wsc, train), pl.compute_maps(wsc, test)
    x1_test = None
    if name == "inpaint":
        x1_train, tr_maps = pl.inpaint_inputs(train.x1, tr_maps, tr_seeds)
        x1_test, te_maps = pl.inpaint_inputs(test.x1, te_maps, te_seeds)
        pair, hist = _train_bridge(cfg, train, tr_maps, x1=x1_train)
    else:
        pair, hist = _train_bridge(cfg, train, tr_maps, C=pl.warped_garments(train, SeedSpec(cfg.seed).child("warped-aug")))
    _write_history(run.dir / "history.csv", hist)
    sampler = cfg.sampler
    out = _run_sampler(cfg, test, te_maps, pair, wsc if sampler.use_guidance else None, args.threads, sampler,
                       x1_test)
    _write_outputs(run, test.ids, out, te_maps)
    rep, summary = _report(test, out, cfg)
    rep.to_csv(run.dir / "metrics.csv", test.ids)
    run.write_json("metrics.json", summary)
    return run


def _manifest(path):
    if not path:
        return None
    p = Path(path)
    return p / "checkpoint.json" if p.is_dir() else p


# ---------------------------------------------------------------- argument parsing

COMMANDS = {
    "datagen": cmd_datagen,
    "train-wsc": cmd_train_wsc,
    "eval-wsc": cmd_eval_wsc,
    "train-bridge": cmd_train_bridge,
    "sample": cmd_sample,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "schedule-dump": cmd_schedule_dump,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, default=None, help="override the root seed")
    common.add_argument("--out", default="runs", help="parent directory for run directories")
    common.add_argument("--threads", type=int, default=1, help="worker threads (never changes results)")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--corpus", help="manifest.json from datagen (generated in memory when omitted)")

    models = argparse.ArgumentParser(add_help=False)
    models.add_argument("--wsc", help="classifier checkpoint directory")
    models.add_argument("--bridge", help="bridge checkpoint directory")
    models.add_argument("--split", choices=("test", "train", "all"), default="test")

    p = argparse.ArgumentParser(prog="errbridge", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("datagen", parents=[common], help="build the toy corpus")
    s = sub.add_parser("train-wsc", parents=[common, data], help="train the error classifier")
    s.add_argument("--mode", choices=("wsc", "uc", "cc"), default=None)
    s = sub.add_parser("eval-wsc", parents=[common, data], help="pixel PR curve of a classifier")
    s.add_argument("--wsc", required=True)
    s.add_argument("--split", choices=("test", "train", "all"), default="test")
    s = sub.add_parser("train-bridge", parents=[common, data], help="train the bridge denoiser")
    s.add_argument("--wsc")
    s.add_argument("--maps", choices=MAP_SOURCES, default="wsc")
    s.add_argument("--inpaint", action="store_true", help="train the inpainting control instead")
    s.add_argument("--warped-aug", action="store_true", help="use warped garments for synthetic items")
    s = sub.add_parser("sample", parents=[common, data, models], help="run the sampler")
    s.add_argument("--maps", choices=MAP_SOURCES, default="wsc")
    s.add_argument("--ppm", action="store_true", help="also export PPM previews")
    s = sub.add_parser("refine", parents=[common, data, models], help="classifier maps then sampling")
    s.add_argument("--ppm", action="store_true")
    s = sub.add_parser("eval", parents=[common, data], help="metrics for sampler outputs")
    s.add_argument("--outputs", required=True, help="run directory (or outputs.json) of sample/refine")
    s = sub.add_parser("schedule-dump", parents=[common], help="CSV of schedule quantities")
    s.add_argument("--rows", type=int, default=101)
    s = sub.add_parser("ablate", parents=[common, data, models], help="ablation rows")
    s.add_argument("name", choices=pl.ABLATIONS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        cfg = _resolve_config(args)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        run = COMMANDS[args.command](args, cfg)
        print(run.dir)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    finally:
        for run in list(_OPEN_RUNS):
            run.close()


if __name__ == "__main__":
    sys.exit(main())
