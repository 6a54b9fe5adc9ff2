"""Command-line entry point: ``breakmove {synth,train,tune,lda,eval}``.

Settings resolve as built-in defaults < ``--config`` JSON < explicit flags.
Every command writes its resolved settings into its JSON output.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import lda
from .errors import BreakmoveError, DataError, MissingFile, UsageError
from .head import HeadConfig, load_checkpoint, save_checkpoint
from .hpo import configs_from_point, default_space, head_objective, run_search
from .objective import LossConfig
from .train import TrainConfig, fit, predict_dataset, write_report

GLOBAL_DEFAULTS = {"seed": 0, "config": None, "out_dir": "."}

DEFAULTS = {
    "synth": {
        "classes": 4,
        "d": 64,
        "videos": 20,
        "windows": 20,
        "sep": 50.0,
        "noise": 1.0,
        "fps": 2.0,
        "test_fraction": 0.2,
        "encoder": "synthetic",
    },
    "train": {
        "manifest": None,
        "split_file": None,
        "n_fm": 1,
        "n_hidden": 1,
        "scale": 2.0,
        "residual": "block",
        "margin": 0.5,
        "c_u": 0.1,
        "weight_decay": 1e-4,
        "lr": 1e-3,
        "batch_size": 64,
        "epochs": 50,
        "pairs_per_batch": 32,
        "optimizer": "adam",
        "patience": 10,
        "val_fraction": 0.15,
        "pool": "mean",
        "min_coverage": 0.5,
    },
    "tune": {
        "manifest": None,
        "split_file": None,
        "budget": 20,
        "eta": 4,
        "r_min": 2,
        "r_max": 32,
        "parallel": 1,
        "resume": False,
        "pairs_per_batch": 32,
        "optimizer": "adam",
        "val_fraction": 0.15,
        "pool": "mean",
        "min_coverage": 0.5,
    },
    "lda": {
        "manifest": None,
        "split_file": None,
        "split": "train",
        "ridge": None,
        "pool": "mean",
        "min_coverage": 0.5,
    },
    "eval": {
        "manifest": None,
        "split_file": None,
        "split": "test",
        "predictions": None,
        "checkpoint": None,
        "rule": "nearest-center",
        "frames": "all",
        "pool": "mean",
        "aggregate": None,
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _global_flags(parser: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    parser.add_argument("--seed", type=int, default=S, help="master seed for all random streams")
    parser.add_argument("--config", default=S, help="JSON file of settings; flags take precedence")
    parser.add_argument("--out-dir", dest="out_dir", default=S, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="breakmove", description=__doc__.splitlines()[0])
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic embedding dataset")
    _global_flags(p)
    p.add_argument("--classes", type=int, default=S)
    p.add_argument("--d", type=int, default=S)
    p.add_argument("--videos", type=int, default=S)
    p.add_argument("--windows", type=int, default=S, help="windows per video")
    p.add_argument("--sep", type=float, default=S, help="distance between class means")
    p.add_argument("--noise", type=float, default=S)
    p.add_argument("--fps", type=float, default=S)
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=S)
    p.add_argument("--encoder", default=S)

    def data_flags(p):
        p.add_argument("--manifest", default=S)
        p.add_argument("--split-file", dest="split_file", default=S, help="test video ids, one per line")
        p.add_argument("--pool", choices=("mean", "max"), default=S)
        p.add_argument("--min-coverage", dest="min_coverage", type=float, default=S)

    def train_flags(p):
        p.add_argument("--pairs-per-batch", dest="pairs_per_batch", type=int, default=S)
        p.add_argument("--optimizer", choices=("adam", "sgd"), default=S)
        p.add_argument("--val-fraction", dest="val_fraction", type=float, default=S)

    p = sub.add_parser("train", help="train a head")
    _global_flags(p)
    data_flags(p)
    train_flags(p)
    p.add_argument("--n-fm", dest="n_fm", type=int, default=S, help="number of FM blocks")
    p.add_argument("--n-hidden", dest="n_hidden", type=int, default=S, help="classifier hidden layers")
    p.add_argument("--scale", type=float, default=S, help="classifier width reduction factor")
    p.add_argument("--residual", choices=("block", "global"), default=S)
    p.add_argument("--margin", type=float, default=S)
    p.add_argument("--c-u", dest="c_u", type=float, default=S, help="contrastive weight")
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--patience", type=int, default=S)

    p = sub.add_parser("tune", help="ASHA hyperparameter search")
    _global_flags(p)
    data_flags(p)
    train_flags(p)
    p.add_argument("--budget", type=int, default=S, help="number of trials")
    p.add_argument("--eta", type=int, default=S)
    p.add_argument("--r-min", dest="r_min", type=int, default=S)
    p.add_argument("--r-max", dest="r_max", type=int, default=S)
    p.add_argument("--parallel", type=int, default=S)
    p.add_argument("--resume", action="store_true", default=S)

    p = sub.add_parser("lda", help="Fisher LDA separability scores")
    _global_flags(p)
    data_flags(p)
    p.add_argument("--split", choices=("train", "test", "all"), default=S)
    p.add_argument("--ridge", type=float, default=S)

    p = sub.add_parser("eval", help="frame-level scoring and run aggregation")
    _global_flags(p)
    data_flags(p)
    p.add_argument("--split", choices=("train", "test", "all"), default=S)
    p.add_argument("--predictions", default=S, help="predictions.jsonl (encoder or decoder format)")
    p.add_argument("--checkpoint", default=S, help="score a trained head instead of a predictions file")
    p.add_argument("--rule", choices=ev.FRAME_RULES, default=S)
    p.add_argument("--frames", choices=ev.FRAME_MODES, default=S)
    p.add_argument("--aggregate", nargs="+", default=S, help="report.json files from repeated runs")
    return parser


def resolve(argv=None) -> dict:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    known = {**GLOBAL_DEFAULTS, **DEFAULTS[command]}
    settings = dict(known)
    config_path = args.get("config")
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise MissingFile(f"config file not found: {path}")
        try:
            overlay = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        section = overlay.pop(command, {}) if isinstance(overlay.get(command), dict) else {}
        for name in DEFAULTS:
            if isinstance(overlay.get(name), dict):
                overlay.pop(name)
        all_keys = set(GLOBAL_DEFAULTS).union(*DEFAULTS.values())
        unknown = sorted(set(overlay) - all_keys) + sorted(set(section) - set(known))
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        settings.update({k: v for k, v in overlay.items() if k in known})
        settings.update(section)
    settings.update(args)
    settings["command"] = command
    return settings


# ---------------------------------------------------------------------------
# helpers


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(cfg) -> ds.EmbeddingDataset:
    if not cfg.get("manifest"):
        raise UsageError("--manifest is required")
    return ds.load_manifest(cfg["manifest"])


def _split(dataset, cfg):
    test_ids = ds.read_split_file(cfg["split_file"]) if cfg.get("split_file") else []
    return ds.split_train_test(dataset, test_ids)


def _pick(dataset, cfg) -> ds.EmbeddingDataset:
    train, test = _split(dataset, cfg)
    return {"train": train, "test": test, "all": dataset}[cfg["split"]]


def _dump(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, default=_json_default) + "\n", encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _echo(cfg) -> dict:
    return {k: v for k, v in cfg.items()}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg) -> int:
    if not 1 <= cfg["classes"] <= ds.NUM_CLASSES:
        raise UsageError(f"--classes must lie in 1..{ds.NUM_CLASSES}")
    data = ds.gen_synthetic(
        cfg["classes"], cfg["d"], cfg["videos"], cfg["windows"], cfg["sep"], cfg["seed"],
        noise=cfg["noise"], fps=cfg["fps"], encoder_name=cfg["encoder"],
    )
    out = _out_dir(cfg)
    ds.write_manifest(data, out, num_segments=True)
    n_test = int(round(cfg["test_fraction"] * len(data)))
    ds.write_split_file(out / "split.txt", data.video_ids[len(data) - n_test :])
    print(f"wrote {len(data)} videos, {len(data.annotations)} segments to {out}")
    return 0


def _train_configs(cfg, d: int):
    head = HeadConfig(d=d, n_fm=cfg["n_fm"], n_hidden=cfg["n_hidden"], scale=cfg["scale"],
                      seed=cfg["seed"], residual=cfg["residual"])
    loss = LossConfig(margin=cfg["margin"], c_u=cfg["c_u"], weight_decay=cfg["weight_decay"])
    train = TrainConfig(
        learning_rate=cfg["lr"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
        pairs_per_batch=cfg["pairs_per_batch"], optimizer=cfg["optimizer"], patience=cfg["patience"],
        seed=cfg["seed"], val_fraction=cfg["val_fraction"], pool=cfg["pool"], min_coverage=cfg["min_coverage"],
    )
    return head, loss, train


def _test_summary(params, test, pool) -> dict | None:
    if len(test) == 0:
        return None
    report = ev.score_predictions(predict_dataset(params, test, pool), test)
    return {"overall": report.overall, "per_video_mean": report.per_video_mean, "per_video_std": report.per_video_std}


def cmd_train(cfg) -> int:
    data = _load(cfg)
    train, test = _split(data, cfg)
    head, loss, tcfg = _train_configs(cfg, data.dim)
    params, report = fit(train, head, loss, tcfg)
    out = _out_dir(cfg)
    save_checkpoint(out / "checkpoint.bin", params, epoch=report.best_epoch)
    payload = report.to_dict()
    payload["test"] = _test_summary(params, test, cfg["pool"])
    payload["config"] = _echo(cfg)
    _dump(out / "report.json", payload)
    print(f"best epoch {report.best_epoch}, validation frame accuracy {report.best_val_accuracy:.4f}")
    return 0


def cmd_tune(cfg) -> int:
    data = _load(cfg)
    train, test = _split(data, cfg)
    base = TrainConfig(pairs_per_batch=cfg["pairs_per_batch"], optimizer=cfg["optimizer"],
                       val_fraction=cfg["val_fraction"], pool=cfg["pool"], min_coverage=cfg["min_coverage"])
    out = _out_dir(cfg)
    result = run_search(
        head_objective(train, base), default_space(), budget=cfg["budget"], eta=cfg["eta"],
        r_min=cfg["r_min"], r_max=cfg["r_max"], parallelism=cfg["parallel"], seed=cfg["seed"],
        ledger_path=out / "ledger.jsonl", resume=bool(cfg["resume"]),
    )
    best = result.best
    if best is None:
        raise DataError("every trial failed; see ledger.jsonl")
    head, loss, tcfg = configs_from_point(best.config, data.dim, best.seed, base, epochs=best.last_resource)
    params, report = fit(train, head, loss, tcfg)
    save_checkpoint(out / "best_checkpoint.bin", params, epoch=report.best_epoch)
    objectives = [t.last_objective for t in result.trials if t.reports]
    _dump(out / "best.json", {
        "trial": best.trial_id,
        "config": best.config,
        "seed": best.seed,
        "resource": best.last_resource,
        "objective": best.last_objective,
        "num_trials": len(result.trials),
        "median_objective": float(np.median([o for o in objectives if np.isfinite(o)])),
        "test": _test_summary(params, test, cfg["pool"]),
        "settings": _echo(cfg),
    })
    print(f"best trial {best.trial_id}: objective {best.last_objective:.4f} at {best.last_resource} epochs")
    return 0


def cmd_lda(cfg) -> int:
    data = _pick(_load(cfg), cfg)
    table = ds.window_table(data, cfg["pool"], cfg["min_coverage"])
    scores = lda.separability_scores(table.X, table.y, cfg["ridge"])
    out = _out_dir(cfg)
    counts = {ds.Label(int(k)).text: v for k, v in scores.class_counts.items()}
    lda.write_lda_report(out / "lda_report.json", scores, {
        "class_counts": counts, "encoder": data.encoder_name, "num_windows": len(table), "config": _echo(cfg),
    })
    labels = [ds.Label(int(c)).text for c in table.y]
    lda.write_projection_csv(out / "projection.csv", lda.project2d(table.X, scores), labels, table.video_ids)
    j2 = f"{scores.J2:.4f}" if scores.j2_defined else "undefined"
    print(f"{data.encoder_name}: J1 {scores.J1:.4f}  J2 {j2}")
    return 0


def cmd_eval(cfg) -> int:
    out = _out_dir(cfg)
    if cfg.get("aggregate"):
        runs = []
        for path in cfg["aggregate"]:
            path = Path(path)
            if not path.is_file():
                raise MissingFile(f"run report not found: {path}")
            rep = json.loads(path.read_text(encoding="utf-8"))
            rep = rep.get("test") or rep
            runs.append({"overall": rep["overall"], "per_video_mean": rep["per_video_mean"]})
        table = ev.aggregate_runs(runs)
        _dump(out / "aggregate.json", {"runs": len(runs), "table": table, "std": "population", "config": _echo(cfg)})
        for k, v in table.items():
            print(f"{k}\t{v}")
        return 0

    data = _pick(_load(cfg), cfg)
    if cfg.get("predictions"):
        preds = ev.read_predictions(cfg["predictions"])
    elif cfg.get("checkpoint"):
        params, _ = load_checkpoint(cfg["checkpoint"])
        preds = predict_dataset(params, data, cfg["pool"])
    else:
        raise UsageError("eval needs --predictions, --checkpoint or --aggregate")
    report = ev.score_predictions(preds, data, rule=cfg["rule"], mode=cfg["frames"])
    payload = report.to_dict()
    payload["metadata"]["rule"] = cfg["rule"]
    payload["config"] = _echo(cfg)
    _dump(out / "report.json", payload)
    print(f"overall\t{report.overall:.2f}\nper video\t{report.per_video_mean:.2f} ± {report.per_video_std:.2f}")
    if report.parse_failures:
        print(f"parse failures\t{report.parse_failures}/{report.num_predictions}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "tune": cmd_tune, "lda": cmd_lda, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        cfg = resolve(argv)
        return COMMANDS[cfg["command"]](cfg)
    except BreakmoveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
