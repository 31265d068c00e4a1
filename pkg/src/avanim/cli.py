"""Command-line entry point: synth / curate / train-sync / train-embedder /
train / animate / evaluate / replay.

Every run resolves its parameters (defaults <- config file <- flags, flags
win), writes run.json into the run directory before any work starts, and a
summary.json after. `replay run.json` re-executes a saved run, so commands
that promise determinism reproduce their artifacts bit for bit.

AVANIM_ROOT, when set, re-roots relative --out paths; it is the only
environment override.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

# command -> {param: default}; None means required / no default
DEFAULTS = {
    "synth": {"n": 16, "seed": 0, "out": None, "distractor_frac": 0.0,
              "dur_min": 4.0, "dur_max": 10.0},
    "curate": {"in": None, "out": None, "thresholds": None, "syncnet": None,
               "embedder": None, "cut_threshold": 0.2, "min_count": 100},
    "train-sync": {"manifest": None, "out": None, "tau": 1.0, "steps": 1500,
                   "batch": 6, "lr": 2e-3, "seed": 0},
    "train-embedder": {"manifest": None, "out": None, "steps": 400,
                       "batch": 5, "lr": 2e-3, "seed": 0},
    "train": {"manifest": None, "embedder": None, "out": None, "steps": 2400,
              "batch": 4, "lr": 2e-3, "audio_dropout": 0.2, "seed": 0,
              "no_audio": False, "backbone_steps": 4000, "base_ch": 16,
              "frames": 12, "size": 32},
    "animate": {"image": None, "audio": None, "model": None, "embedder": None,
                "out": None, "eta": 1.0, "sampler": "ddim", "steps": 50,
                "seed": 0, "category": None, "start_k": 600},
    "evaluate": {"pred": None, "ref": None, "syncnet": None, "embedder": None,
                 "out": None},
}
REQUIRED = {
    "synth": ("out",),
    "curate": ("in", "out", "syncnet", "embedder"),
    "train-sync": ("manifest", "out"),
    "train-embedder": ("manifest", "out"),
    "train": ("manifest", "embedder", "out"),
    "animate": ("image", "audio", "model", "out"),
    "evaluate": ("pred", "ref", "syncnet", "embedder", "out"),
}
_FLAGS = {"no_audio"}  # store_true params


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avanim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, params in DEFAULTS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=None, help="INI file; [%s] section" % cmd)
        for name, default in params.items():
            flag = "--" + name.replace("_", "-")
            if name in _FLAGS:
                p.add_argument(flag, dest=name, action="store_true", default=None)
            else:
                typ = type(default) if default is not None else str
                p.add_argument(flag, dest=name, type=typ, default=None)
    rp = sub.add_parser("replay")
    rp.add_argument("run_json")
    rp.add_argument("--out", default=None)
    return parser


def _config_section(path, cmd: str) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    if not cp.has_section(cmd):
        return {}
    out = {}
    for key, raw in cp[cmd].items():
        if key not in DEFAULTS[cmd]:
            raise ValueError(f"unknown config key {key!r} for {cmd}")
        default = DEFAULTS[cmd][key]
        if key in _FLAGS:
            out[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, bool):
            out[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            out[key] = int(raw)
        elif isinstance(default, float):
            out[key] = float(raw)
        else:
            out[key] = raw
    return out


def _resolve(cmd: str, args: argparse.Namespace) -> dict:
    params = dict(DEFAULTS[cmd])
    if args.config:
        params.update(_config_section(args.config, cmd))
    for name in DEFAULTS[cmd]:
        v = getattr(args, name)
        if v is not None:
            params[name] = v
    missing = [n for n in REQUIRED[cmd] if params[n] is None]
    if missing:
        raise ValueError(f"{cmd}: missing required --{missing[0].replace('_', '-')}")
    root = os.environ.get("AVANIM_ROOT")
    if root and params.get("out") is not None and not Path(params["out"]).is_absolute():
        params["out"] = str(Path(root) / params["out"])
    return params


def _run_dir(params: dict) -> Path:
    out = Path(params["out"])
    return out if out.suffix == "" else out.parent


def _write_run_json(cmd: str, params: dict) -> Path:
    import numpy
    import torch

    from . import __version__

    d = _run_dir(params)
    d.mkdir(parents=True, exist_ok=True)
    run = {
        "command": cmd,
        "params": params,
        "versions": {
            "avanim": __version__,
            "numpy": numpy.__version__,
            "torch": torch.__version__,
            "python": sys.version.split()[0],
        },
    }
    path = d / "run.json"
    path.write_text(json.dumps(run, sort_keys=True, indent=2) + "\n")
    return path


def _write_summary(params: dict, summary: dict):
    (_run_dir(params) / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )


# ---------------------------------------------------------------------------
# runners


def _run_synth(p: dict) -> dict:
    from .synth import synth_corpus

    manifest = synth_corpus(p["n"], p["seed"], p["out"],
                            distractor_frac=p["distractor_frac"],
                            dur_min=p["dur_min"], dur_max=p["dur_max"])
    return {"manifest": str(manifest), "n": p["n"]}


def _run_curate(p: dict) -> dict:
    from .curation import FilterThresholds, load_thresholds, run_curation
    from .embedder import load_embedder
    from .syncnet import load_syncnet

    thr = load_thresholds(p["thresholds"]) if p["thresholds"] else FilterThresholds()
    summary = run_curation(p["in"], p["out"], thr,
                           load_embedder(p["embedder"]), load_syncnet(p["syncnet"]),
                           cut_threshold=p["cut_threshold"], min_count=p["min_count"])
    summary = dict(summary)
    summary.pop("examples", None)  # full detail lives in the JSONL
    return summary


def _run_train_sync(p: dict) -> dict:
    from .syncnet import SyncTrainConfig, train_sync

    cfg = SyncTrainConfig(tau=p["tau"], steps=p["steps"], batch_size=p["batch"],
                          lr=p["lr"], seed=p["seed"])
    _, curve = train_sync(p["manifest"], cfg, out=p["out"])
    return {"checkpoint": p["out"], "final_loss": curve[-1], "steps": len(curve)}


def _run_train_embedder(p: dict) -> dict:
    from .embedder import EmbedderTrainConfig, train_embedder

    cfg = EmbedderTrainConfig(steps=p["steps"], batch_size=p["batch"],
                              lr=p["lr"], seed=p["seed"])
    _, curve = train_embedder(p["manifest"], cfg, out=p["out"])
    return {"checkpoint": p["out"], "final_loss": curve[-1], "steps": len(curve)}


def _run_train(p: dict) -> dict:
    from .diffusion import VideoTrainConfig, train_video
    from .embedder import load_embedder

    cfg = VideoTrainConfig(steps=p["steps"], batch_size=p["batch"], lr=p["lr"],
                           audio_dropout_p=p["audio_dropout"], seed=p["seed"],
                           use_audio=not p["no_audio"],
                           backbone_steps=p["backbone_steps"],
                           base_ch=p["base_ch"], rT=p["frames"], size=p["size"])
    _, curve = train_video(p["manifest"], load_embedder(p["embedder"]), cfg,
                           out=p["out"], embedder_path=p["embedder"])
    return {"checkpoint": p["out"], "final_loss": curve[-1], "steps": len(curve),
            "use_audio": not p["no_audio"]}


def _run_animate(p: dict) -> dict:
    from .diffusion import animate
    from .embedder import load_embedder
    from .model import load_video_model

    model, ckpt = load_video_model(p["model"])
    emb_path = p["embedder"] or ckpt.get("embedder_path")
    if not emb_path:
        raise ValueError("no --embedder given and checkpoint stores no embedder path")
    embedder = load_embedder(emb_path)
    out = animate(p["image"], p["audio"], model, embedder, p["out"],
                  frames=model.cfg.rT, eta=p["eta"], sampler=p["sampler"],
                  steps=p["steps"], seed=p["seed"], category=p["category"],
                  start_k=p["start_k"])
    return {"frames_dir": str(out), "frames": model.cfg.rT}


def _run_evaluate(p: dict) -> dict:
    from .embedder import load_embedder
    from .metrics import evaluate
    from .syncnet import load_syncnet

    report = evaluate(p["pred"], p["ref"], load_syncnet(p["syncnet"]),
                      load_embedder(p["embedder"]))
    payload = {"overall": report["overall"].as_dict(),
               "per_category": {c: r.as_dict() for c, r in report["per_category"].items()}}
    out = Path(p["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return payload["overall"]


RUNNERS = {
    "synth": _run_synth,
    "curate": _run_curate,
    "train-sync": _run_train_sync,
    "train-embedder": _run_train_embedder,
    "train": _run_train,
    "animate": _run_animate,
    "evaluate": _run_evaluate,
}


def run_command(cmd: str, params: dict) -> dict:
    """Execute one resolved command: run.json first, then work, then summary."""
    _write_run_json(cmd, params)
    summary = RUNNERS[cmd](params)
    _write_summary(params, summary)
    return summary


def _replay(run_json: str, out=None) -> dict:
    saved = json.loads(Path(run_json).read_text())
    cmd, params = saved["command"], dict(saved["params"])
    if out is not None:
        params["out"] = out
    return run_command(cmd, params)


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse: bad usage -> 2, --help -> 0
        return int(e.code or 0)
    try:
        if args.command == "replay":
            summary = _replay(args.run_json, args.out)
        else:
            params = _resolve(args.command, args)
            summary = run_command(args.command, params)
    except Exception as e:
        print(str(e), file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
