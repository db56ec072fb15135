"""Command-line entry point.

Subcommands: datagen, train, eval, ablate, gradcheck, serve. Configuration is
a JSON object of flat dotted keys (e.g. {"train.lr": 0.001}); command-line
overrides win over file values, and every run echoes its fully resolved
configuration into the output directory. Exit codes: 0 success, 1 validation
error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .data import (
    ATTRIBUTES,
    CONCEPTS,
    MODALITIES,
    BiasProfile,
    generate_dataset,
    load_dataset,
)
from .errors import (
    BiassegError,
    ConfigError,
    InvalidPromptError,
    VocabularyError,
)
from .model import Hyper, load_checkpoint
from .train import TrainConfig, train
from .uncertainty import UncertaintyHyper

_QUOTA_DEFAULTS = {"circle": 400, "square": 150, "triangle": 50}
_MODALITY_DEFAULTS = {"plain": 0.55, "noise": 0.25, "lowcontrast": 0.15, "textured": 0.05}
_ATTRIBUTE_DEFAULTS = {"dark": 0.2, "mid": 0.6, "bright": 0.2}

_BETA_VL_DEFAULT = 0.5
_LAMBDA_U_DEFAULT = 1.0
_R_DEFAULT = 0.3


def default_flat_config() -> Dict[str, object]:
    """Every tunable as a dotted key with its default value."""
    cfg: Dict[str, object] = {
        "seed": 0,
        "data.size": 64,
        "data.n_test_per_concept": 24,
        "train.batch_size": 4,
        "train.lr": 1e-3,
        "train.epochs": 5,
        "train.r": _R_DEFAULT,
        "train.uncertainty_weighting": True,
        "train.hitl": True,
        "train.vlm_loss": True,
        "train.weight_aur": 1.0,
        "train.weight_hitl": 1.0,
        "train.weight_vlm": 1.0,
        "train.n_corrective": 1,
        "train.weight_decay": 0.01,
        "train.text_only_ratio": 0.0,
        "hyper.beta_vl": _BETA_VL_DEFAULT,
        "hyper.lambda_u": _LAMBDA_U_DEFAULT,
        "hyper.eps1": 1e-6,
        "hyper.eps_d": 1e-6,
        "arch.C": 32,
        "arch.d": 32,
        "arch.heads": 2,
        "arch.V": 24,
        "arch.L_max": 16,
        "eval.clicks": 0,
        "ablate.epochs": 15,
        "gradcheck.seeds": 20,
        "serve.port": 8765,
        "serve.session_ttl": 3600.0,
    }
    for c, q in _QUOTA_DEFAULTS.items():
        cfg[f"data.quota.{c}"] = q
    for m, w in _MODALITY_DEFAULTS.items():
        cfg[f"data.modality_weight.{m}"] = w
    for a, w in _ATTRIBUTE_DEFAULTS.items():
        cfg[f"data.attribute_weight.{a}"] = w
    return cfg


def _load_config_file(path: Optional[str]) -> Dict[str, object]:
    if path is None:
        return {}
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {p} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object of dotted keys")
    return doc


def _valid_keys() -> set:
    keys = set(default_flat_config())
    # quotas may name any known concept, not only the default three
    keys |= {f"data.quota.{c}" for c in CONCEPTS}
    return keys


def resolve_config(
    config_path: Optional[str], overrides: Dict[str, object]
) -> Dict[str, object]:
    """defaults <- config file <- command-line overrides; unknown keys rejected."""
    cfg = default_flat_config()
    valid = _valid_keys()
    file_cfg = _load_config_file(config_path)
    for key in file_cfg:
        if key not in valid:
            raise ConfigError(f"unknown config key: {key}")
    cfg.update(file_cfg)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _train_config(cfg: Dict[str, object]) -> TrainConfig:
    return TrainConfig(
        batch_size=int(cfg["train.batch_size"]),
        lr=float(cfg["train.lr"]),
        epochs=int(cfg["train.epochs"]),
        seed=int(cfg["seed"]),
        hyper=UncertaintyHyper(
            beta_vl=float(cfg["hyper.beta_vl"]),
            lambda_u=float(cfg["hyper.lambda_u"]),
            eps1=float(cfg["hyper.eps1"]),
            eps_d=float(cfg["hyper.eps_d"]),
        ),
        arch=Hyper(
            C=int(cfg["arch.C"]),
            d=int(cfg["arch.d"]),
            heads=int(cfg["arch.heads"]),
            V=int(cfg["arch.V"]),
            L_max=int(cfg["arch.L_max"]),
        ),
        r=float(cfg["train.r"]),
        uncertainty_weighting=bool(cfg["train.uncertainty_weighting"]),
        hitl=bool(cfg["train.hitl"]),
        vlm_loss=bool(cfg["train.vlm_loss"]),
        loss_weights=(
            float(cfg["train.weight_aur"]),
            float(cfg["train.weight_hitl"]),
            float(cfg["train.weight_vlm"]),
        ),
        n_corrective=int(cfg["train.n_corrective"]),
        weight_decay=float(cfg["train.weight_decay"]),
        text_only_ratio=float(cfg["train.text_only_ratio"]),
    )


def _profile(cfg: Dict[str, object]) -> BiasProfile:
    size = int(cfg["data.size"])
    quotas = {
        c: int(cfg[f"data.quota.{c}"])
        for c in CONCEPTS
        if f"data.quota.{c}" in cfg
    }
    return BiasProfile(
        concept_quotas=quotas,
        modality_weights={m: float(cfg[f"data.modality_weight.{m}"]) for m in MODALITIES},
        attribute_weights={a: float(cfg[f"data.attribute_weight.{a}"]) for a in ATTRIBUTES},
        image_size=(size, size),
    )


def _echo_config(cfg: Dict[str, object], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# -- subcommands -----------------------------------------------------------------


def _cmd_datagen(args, cfg) -> int:
    profile = _profile(cfg)
    out = Path(args.out)
    _echo_config(cfg, out)
    generate_dataset(
        profile,
        seed=int(cfg["seed"]),
        out_dir=out,
        n_test_per_concept=int(cfg["data.n_test_per_concept"]),
    )
    print(f"wrote train/test splits under {out}")
    return 0


def _cmd_train(args, cfg) -> int:
    tcfg = _train_config(cfg)  # validates before anything is written
    train_ds = load_dataset(Path(args.data) / "train" / "manifest.json")
    eval_ds = load_dataset(Path(args.data) / "test" / "manifest.json")
    out = Path(args.out)
    _echo_config(cfg, out)
    _, log = train(tcfg, train_ds, eval_ds=eval_ds, out_dir=out)
    final = log.epochs[-1]
    print(
        f"done: {len(log.steps)} steps, "
        f"eval dice {final.get('eval_dice_mean', float('nan')):.4f}"
    )
    return 0


def _cmd_eval(args, cfg) -> int:
    from .evaluate import (
        linear_probe,
        pooled_features,
        predict_dataset,
        stratified_report,
        write_report,
    )

    params = load_checkpoint(args.checkpoint)
    test_ds = load_dataset(Path(args.data) / "test" / "manifest.json")
    out = Path(args.out)
    _echo_config(cfg, out)
    preds = predict_dataset(params, test_ds, clicks=int(cfg["eval.clicks"]))
    report = stratified_report({p.sample_id: p.mask for p in preds}, test_ds)
    write_report(report, out)
    if args.probe:
        train_ds = load_dataset(Path(args.data) / "train" / "manifest.json")
        rename = {"head": "many", "medium": "medium", "tail": "few"}
        label_groups = {
            i: rename[train_ds.groups[c]] for i, c in enumerate(train_ds.concepts)
            if c in train_ds.groups
        }
        probe = linear_probe(
            pooled_features(params, train_ds),
            [r.concept_id for r in train_ds.records],
            pooled_features(params, test_ds),
            [r.concept_id for r in test_ds.records],
            label_groups,
            seed=int(cfg["seed"]),
        )
        (out / "probe.json").write_text(json.dumps(probe, indent=2) + "\n", encoding="utf-8")
    print(f"overall dice {report.overall['dice']:.4f} iou {report.overall['iou']:.4f}")
    return 0


def _cmd_ablate(args, cfg) -> int:
    from .evaluate import ablation_run

    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    base = _train_config(cfg)
    from dataclasses import replace

    base = replace(base, epochs=int(cfg["ablate.epochs"]))
    train_ds = load_dataset(Path(args.data) / "train" / "manifest.json")
    test_ds = load_dataset(Path(args.data) / "test" / "manifest.json")
    out = Path(args.out)
    _echo_config(cfg, out)
    table = ablation_run(base, train_ds, test_ds, seeds, out_dir=out)
    for name, row in table.items():
        if "error" in row:
            print(f"{name}: {row['error']}")
        else:
            print(f"{name}: overall dice {row['overall_dice']:.4f}")
    return 0


def _cmd_gradcheck(args, cfg) -> int:
    from .gradcheck import full_model_check, op_checks, run_op_gradcheck

    n_seeds = int(cfg["gradcheck.seeds"])
    per_op = run_op_gradcheck(seeds=range(n_seeds))
    ok = True
    for op, err in sorted(per_op.items()):
        flag = "ok" if err < 1e-4 else "FAIL"
        ok &= err < 1e-4
        print(f"{op:24s} {err:10.3e}  {flag}")
    worst_model = max(full_model_check(seed=s) for s in range(n_seeds))
    flag = "ok" if worst_model < 1e-3 else "FAIL"
    ok &= worst_model < 1e-3
    print(f"{'full_model':24s} {worst_model:10.3e}  {flag}")
    if not ok:
        raise BiassegError("gradient check exceeded tolerance")
    return 0


def _cmd_serve(args, cfg) -> int:
    from .server import run_server

    run_server(
        checkpoint=args.checkpoint,
        data=args.data,
        port=int(cfg["serve.port"]),
        static_dir=args.static,
        session_ttl=float(cfg["serve.session_ttl"]),
    )
    return 0


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biasseg",
        description="Prompted toy segmentation with uncertainty weighting and "
        "click-to-refine; every subcommand writes only under --out.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config of flat dotted keys")
        p.add_argument("--seed", type=int, help="global seed (default 0)")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("datagen", help="generate the synthetic biased dataset")
    common(p)
    p.add_argument("--size", type=int, help="square image size (default 64)")
    p.set_defaults(func=_cmd_datagen)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    common(p)
    p.add_argument("--data", required=True, help="datagen output directory")
    p.add_argument("--epochs", type=int, help="training epochs (default 5)")
    p.add_argument("--beta-vl", type=float,
                   help=f"semantic uncertainty weight (default {_BETA_VL_DEFAULT})")
    p.add_argument("--lambda-u", type=float,
                   help=f"sample-weight exponent scale (default {_LAMBDA_U_DEFAULT})")
    p.add_argument("--r", type=float,
                   help=f"hard-set fraction per batch (default {_R_DEFAULT})")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="stratified evaluation of a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clicks", type=int, help="simulated corrective clicks (default 0)")
    p.add_argument("--probe", action="store_true",
                   help="also fit the linear concept probe on frozen features")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and compare the four loss variants")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="1,2,3", help="comma-separated train seeds")
    p.add_argument("--epochs", type=int, help="epochs per variant (default 15)")
    p.add_argument("--beta-vl", type=float,
                   help=f"semantic uncertainty weight (default {_BETA_VL_DEFAULT})")
    p.add_argument("--lambda-u", type=float,
                   help=f"sample-weight exponent scale (default {_LAMBDA_U_DEFAULT})")
    p.add_argument("--r", type=float,
                   help=f"hard-set fraction per batch (default {_R_DEFAULT})")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--config", help="JSON config of flat dotted keys")
    p.add_argument("--seeds", type=int, dest="gradcheck_seeds",
                   help="number of seeds (default 20)")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("serve", help="HTTP predict/refine service")
    p.add_argument("--config", help="JSON config of flat dotted keys")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--port", type=int, help="listen port (default 8765)")
    p.add_argument("--static", help="directory of static UI files to serve from /")
    p.set_defaults(func=_cmd_serve)

    return parser


_OVERRIDE_KEYS = {
    "seed": "seed",
    "size": "data.size",
    "epochs": "train.epochs",
    "beta_vl": "hyper.beta_vl",
    "lambda_u": "hyper.lambda_u",
    "r": "train.r",
    "clicks": "eval.clicks",
    "port": "serve.port",
    "gradcheck_seeds": "gradcheck.seeds",
}


def _collect_overrides(args: argparse.Namespace) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for attr, key in _OVERRIDE_KEYS.items():
        if getattr(args, attr, None) is not None:
            out[key] = getattr(args, attr)
    if getattr(args, "command", None) == "ablate" and getattr(args, "epochs", None) is not None:
        out["ablate.epochs"] = args.epochs
        del out["train.epochs"]
    return out


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse prints usage/help itself; normalize its failure code to 1
        return 0 if e.code in (0, None) else 1

    try:
        cfg = resolve_config(getattr(args, "config", None), _collect_overrides(args))
        return args.func(args, cfg)
    except (ConfigError, VocabularyError, InvalidPromptError) as e:
        print(f"biasseg: invalid configuration: {e}", file=sys.stderr)
        return 1
    except (BiassegError, OSError) as e:
        print(f"biasseg: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2


if __name__ == "__main__":
    sys.exit(main())
