"""Command-line front door: data generation, pretraining, the six-method
tandem comparison over repeated seeds, evaluation, and report emission.

Every command writes deterministic outputs (sorted JSON keys, exact float
round-trips, no timestamps), so a fixed seed reproduces files byte for byte.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .metrics import compute_metric_report, filter_attacks
from .records import (
    RunRecord,
    comparison_table,
    learning_curves,
    read_rows_csv,
    write_table_csv,
)
from .synthdata import (
    AttackSpec,
    AttackSplit,
    PretrainConfig,
    WorldConfig,
    default_world_config,
    generate_world,
    pretrain_pair,
)
from .tandem_train import (
    BENCHMARK_TANDEM_LR,
    Method,
    PolicyPair,
    Splits,
    TrainConfig,
    run_method,
    score_trials,
)
from .types import (
    ASVSPOOF19_COST_PARAMS,
    MissingClassError,
    TandemCostParams,
    read_features,
    read_protocol,
    read_scores,
    write_features,
    write_protocol,
    write_scores,
)

DATA_MANIFEST = "manifest.json"
COSTS_HELP = (
    "six comma-separated values c_miss,c_fa,c_fa_spoof,rho_tar,rho_non,rho_spoof "
    "(default: ASVspoof19 convention)"
)


class CliError(Exception):
    pass


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out_dir: Path, command: str, config: dict, files: list[str]) -> None:
    _write_json(
        out_dir / DATA_MANIFEST,
        {"command": command, "config": config, "files": sorted(files)},
    )


# ---------------------------------------------------------------------------
# Config file parsing: flat "key = value" lines, '#' comments. Attacks are
# comma-separated id:split:asv_effectiveness:cm_detectability tuples.
# ---------------------------------------------------------------------------

_INT_KEYS = {
    "seed",
    "d_asv",
    "d_cm",
    "n_speakers_train",
    "n_speakers_dev",
    "n_speakers_eval",
    "trials_per_class_train",
    "trials_per_class_dev",
    "trials_per_class_eval",
}
_FLOAT_KEYS = {
    "speaker_scale",
    "utterance_noise",
    "spoof_offset_scale",
    "cm_noise",
    "cm_shift_scale",
    "attack_dir_jitter",
}


def parse_attacks(text: str) -> tuple[AttackSpec, ...]:
    attacks = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 4:
            raise CliError(
                f"bad attack {item!r}: expected id:split:asv_effectiveness:cm_detectability"
            )
        try:
            split = AttackSplit(parts[1])
        except ValueError:
            raise CliError(
                f"bad attack split {parts[1]!r}: expected seen, unseen, or outlier"
            ) from None
        attacks.append(
            AttackSpec(
                attack_id=parts[0],
                asv_effectiveness=float(parts[2]),
                cm_detectability=float(parts[3]),
                split=split,
            )
        )
    return tuple(attacks)


def load_world_config(path: str | None) -> WorldConfig:
    if path is None:
        return default_world_config()
    values: dict = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in _INT_KEYS:
            values[key] = int(value)
        elif key in _FLOAT_KEYS:
            values[key] = float(value)
        elif key == "attacks":
            values[key] = parse_attacks(value)
        else:
            valid = sorted(_INT_KEYS | _FLOAT_KEYS | {"attacks"})
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}; valid: {valid}")
    defaults = default_world_config()
    values.setdefault("attacks", defaults.attacks)
    try:
        return WorldConfig(**{**_world_defaults(), **values})
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid config: {exc}") from exc


def _world_defaults() -> dict:
    d = default_world_config().to_json_dict()
    d.pop("attacks")
    return d


# ---------------------------------------------------------------------------
# Data directory IO
# ---------------------------------------------------------------------------


def _load_data_dir(data_dir: Path) -> tuple[WorldConfig, Splits]:
    manifest_path = data_dir / DATA_MANIFEST
    if not manifest_path.exists():
        raise CliError(f"missing {manifest_path}; run gen-data first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    cfg = WorldConfig.from_json_dict(manifest["config"])
    loaded = {}
    for split in ("train", "dev", "eval"):
        protocol = data_dir / f"{split}.protocol.txt"
        features = data_dir / f"{split}.features.txt"
        if not protocol.exists() or not features.exists():
            raise CliError(f"missing data files for split {split!r} in {data_dir}")
        labels = read_protocol(protocol)
        loaded[split] = tuple(read_features(features, labels, cfg.d_asv, cfg.d_cm))
    return cfg, Splits(train=loaded["train"], dev=loaded["dev"], eval=loaded["eval"])


def _load_checkpoint(path: Path) -> tuple[PolicyPair, dict]:
    if not path.exists():
        raise CliError(f"checkpoint {path} does not exist")
    payload = json.loads(path.read_text(encoding="utf-8"))
    return PolicyPair.from_json_dict(payload["pair"]), payload


def _check_dims(pair: PolicyPair, cfg: WorldConfig) -> None:
    if pair.asv.scorer.input_dim != cfg.d_asv or pair.cm.scorer.input_dim != cfg.d_cm:
        raise CliError(
            f"checkpoint/data feature dims mismatch: checkpoint "
            f"({pair.asv.scorer.input_dim}, {pair.cm.scorer.input_dim}) vs data "
            f"({cfg.d_asv}, {cfg.d_cm})"
        )


def _cost_params(args) -> TandemCostParams:
    """Evaluation costs and priors; default is the ASVspoof19 convention."""
    raw = getattr(args, "costs", None)
    if raw is None:
        return ASVSPOOF19_COST_PARAMS
    parts = [float(v) for v in raw.split(",")]
    if len(parts) != 6:
        raise CliError(
            "expected --costs c_miss,c_fa,c_fa_spoof,rho_tar,rho_non,rho_spoof"
        )
    try:
        return TandemCostParams(*parts)
    except ValueError as exc:
        raise CliError(f"invalid --costs: {exc}") from exc


def _parse_excluded(arg: str | None) -> set[str] | None:
    if arg is None:
        return None
    return {a.strip() for a in arg.split(",") if a.strip()}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_world_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = generate_world(cfg)
    files = []
    for split in ("train", "dev", "eval"):
        trials = getattr(splits, split)
        protocol = f"{split}.protocol.txt"
        features = f"{split}.features.txt"
        write_protocol(out_dir / protocol, ((t.id, t.label) for t in trials))
        write_features(out_dir / features, trials)
        files += [protocol, features]
        n_tar = sum(t.label.is_target_bonafide for t in trials)
        n_non = sum(t.label.is_nontarget_bonafide for t in trials)
        n_spf = sum(t.label.is_spoof for t in trials)
        attacks = sorted({t.label.attack_id for t in trials if t.label.attack_id})
        print(
            f"{split}: {len(trials)} trials "
            f"(target {n_tar}, nontarget {n_non}, spoof {n_spf}; attacks {', '.join(attacks)})"
        )
    _write_manifest(out_dir, "gen-data", cfg.to_json_dict(), files)
    return 0


def cmd_pretrain(args) -> int:
    data_dir = Path(args.data)
    cfg, splits = _load_data_dir(data_dir)
    pre = PretrainConfig(
        asv_lr=args.asv_lr,
        asv_max_epochs=args.asv_max_epochs,
        cm_lr=args.cm_lr,
        cm_max_epochs=args.cm_max_epochs,
        batch_size=args.batch_size,
        hidden=args.hidden,
        seed=args.seed,
    )
    pair = pretrain_pair(splits.train, pre)
    params = _cost_params(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(
        out,
        {
            "format": "tandemopt-checkpoint-v1",
            "pair": pair.to_json_dict(),
            "pretrain_config": pre.to_json_dict(),
            "d_asv": cfg.d_asv,
            "d_cm": cfg.d_cm,
        },
    )
    for split in ("dev", "eval"):
        report = compute_metric_report(score_trials(pair, getattr(splits, split)), params)
        print(f"{split}: {json.dumps(report.to_json_dict(), sort_keys=True)}")
    return 0


def cmd_train_tandem(args) -> int:
    try:
        method = Method(args.method.upper())
    except ValueError:
        raise CliError(
            f"unknown method {args.method!r}; valid: {[m.value for m in Method]}"
        ) from None
    data_dir = Path(args.data)
    cfg, splits = _load_data_dir(data_dir)
    pair, _ = _load_checkpoint(Path(args.ckpt))
    _check_dims(pair, cfg)
    params = _cost_params(args)
    excluded = _parse_excluded(args.exclude_attacks)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    files = []
    train_cfg_snapshot = None
    for k in range(args.seeds):
        run_cfg = TrainConfig(
            lr=args.lr,
            batch_size=args.batch_size,
            epochs=args.epochs,
            balanced=True,
            seed=args.base_seed + k,
        )
        train_cfg_snapshot = run_cfg.to_json_dict()
        record = run_method(method, pair, splits, run_cfg, params, exclude_attacks=excluded)
        stem = f"{method.value}_seed{run_cfg.seed}"
        record.write_csv(out_dir / f"{stem}.csv")
        _write_json(out_dir / f"{stem}_summary.json", record.to_summary_json_dict())
        _write_json(
            out_dir / f"{stem}_checkpoint.json",
            {
                "format": "tandemopt-checkpoint-v1",
                "pair": record.final_pair.to_json_dict(),
                "d_asv": cfg.d_asv,
                "d_cm": cfg.d_cm,
            },
        )
        files += [f"{stem}.csv", f"{stem}_summary.json", f"{stem}_checkpoint.json"]
        for split in ("dev", "eval"):
            scores_name = f"{stem}_{split}.scores.txt"
            write_scores(
                out_dir / scores_name,
                score_trials(record.final_pair, getattr(splits, split)),
            )
            files.append(scores_name)
        final = record.final_report("dev")
        print(
            f"{stem}: dev min_norm_tdcf "
            f"{record.initial_report('dev').min_norm_tdcf:.6f} -> {final.min_norm_tdcf:.6f}"
        )
    snapshot = {
        "method": method.value,
        "seeds": args.seeds,
        "base_seed": args.base_seed,
        "train": train_cfg_snapshot,
        "exclude_attacks": sorted(excluded) if excluded else None,
    }
    _write_manifest(out_dir, "train-tandem", snapshot, files)
    return 0


def cmd_evaluate(args) -> int:
    data_dir = Path(args.data)
    cfg, splits = _load_data_dir(data_dir)
    pair, _ = _load_checkpoint(Path(args.ckpt))
    _check_dims(pair, cfg)
    params = _cost_params(args)
    trials = getattr(splits, args.split)
    scores = score_trials(pair, trials)
    excluded = _parse_excluded(args.exclude_attacks)
    if excluded:
        scores = filter_attacks(scores, excluded)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scores_path = out.with_suffix("").as_posix() + ".scores.txt"
    write_scores(scores_path, scores)
    report = compute_metric_report(scores, params)
    payload = report.to_json_dict()
    payload["split"] = args.split
    payload["excluded_attacks"] = sorted(excluded) if excluded else []
    _write_json(out, payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    runs_dir = Path(args.runs)
    csvs = sorted(runs_dir.glob("*_seed*.csv"))
    if not csvs:
        raise CliError(f"no run CSVs found under {runs_dir}")
    runs = []
    for csv_path in csvs:
        summary_path = csv_path.with_name(csv_path.stem + "_summary.json")
        if not summary_path.exists():
            raise CliError(f"missing {summary_path} for {csv_path}")
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        runs.append(RunRecord.from_summary_json_dict(summary, rows=read_rows_csv(csv_path)))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        table = comparison_table(runs)
        curves = learning_curves(runs)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    write_table_csv(out_dir / "comparison.csv", table)
    write_table_csv(out_dir / "learning_curves.csv", curves)
    _write_manifest(
        out_dir,
        "report",
        {"runs": [p.name for p in csvs]},
        ["comparison.csv", "learning_curves.csv"],
    )
    for row in table:
        print(
            f"{row['method']:>20s} {row['split']:>13s} "
            f"min_norm_tdcf {row['min_norm_tdcf_mean']:.6f} +/- {row['min_norm_tdcf_std']:.6f}"
        )
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tandemopt",
        description="Tandem speaker-verification + anti-spoofing optimization benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic tandem dataset")
    p.add_argument("--config", help="flat key=value config file (defaults used if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train the two systems separately")
    p.add_argument("--data", required=True, help="data directory from gen-data")
    p.add_argument("--out", required=True, help="checkpoint JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--asv-lr", type=float, default=PretrainConfig.asv_lr)
    p.add_argument("--asv-max-epochs", type=int, default=PretrainConfig.asv_max_epochs)
    p.add_argument("--cm-lr", type=float, default=PretrainConfig.cm_lr)
    p.add_argument("--cm-max-epochs", type=int, default=PretrainConfig.cm_max_epochs)
    p.add_argument("--batch-size", type=int, default=PretrainConfig.batch_size)
    p.add_argument("--hidden", type=int, default=PretrainConfig.hidden)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-tandem", help="run one tandem-optimization method")
    p.add_argument("--method", required=True, help="|".join(m.value for m in Method))
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=3, help="number of repetitions")
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--exclude-attacks", help="comma-separated attack ids for a filtered eval")
    p.add_argument("--lr", type=float, default=BENCHMARK_TANDEM_LR)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--costs", help=COSTS_HELP)
    p.set_defaults(func=cmd_train_tandem)

    p = sub.add_parser("evaluate", help="score a checkpoint and emit a metric report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "dev", "eval"), default="eval")
    p.add_argument("--exclude-attacks")
    p.add_argument("--costs", help=COSTS_HELP)
    p.add_argument("--out", required=True, help="metric report JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate run CSVs into comparison tables")
    p.add_argument("--runs", required=True, help="directory of train-tandem outputs")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, MissingClassError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
