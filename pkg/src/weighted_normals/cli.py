"""Command-line entry point: ``weighted-normals <command> [options]``.

Exit codes: 0 success, 1 validation failure, 2 usage error or missing file.
Every command writes ``<command>.manifest.json`` with the effective settings
into its output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, data, training
from .baselines import PCA_SCALES, pca_normals
from .errors import InvalidInput, WeightedNormalsError
from .evaluation import benchmark

DATA_ENV = "WEIGHTED_NORMALS_DATA"
DEFAULT_DATA_DIR = "wn_data"

log = logging.getLogger("weighted_normals")


class UsageError(Exception):
    """Bad arguments or a missing input file (exit code 2)."""


def data_dir_default() -> Path:
    return Path(os.environ.get(DATA_ENV, DEFAULT_DATA_DIR))


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _existing(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"no such file or directory: {path}")
    return path


def _parse_sets(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------- effective configuration


def resolve_configs(args, ablation=None):
    """Merge presets, the config file and ``--set`` overrides.

    Config-file sections: ``[train]`` applies to both stages, ``[pretrain]``
    and ``[finetune]`` to one stage, ``[model]`` to network hyper-parameters.
    ``--set`` keys use the same ``section.key`` form; a bare key means
    ``train.key``.
    """
    sections = {"train": {}, "pretrain": {}, "finetune": {}, "model": {}}
    if args.config:
        for name, values in training.read_config(_existing(args.config)).items():
            if name not in sections:
                raise UsageError(f"unknown config section [{name}] in {args.config}")
            sections[name].update(values)
    for key, value in _parse_sets(args.set).items():
        section, _, field = key.rpartition(".")
        section = section or "train"
        if section not in sections:
            raise UsageError(f"unknown setting section {section!r} in --set {key}")
        sections[section][field] = value
    scale = sections["train"].pop("scale_preset", None) or "desk"
    stages = {}
    for stage in ("pretrain", "finetune"):
        cfg = training.TrainConfig.preset(stage, scale)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if ablation:
            cfg = replace(cfg, **ablation)
        stages[stage] = _override(cfg, {**sections["train"], **sections[stage]})
    hp = _override(training.hyperparams_for(stages["pretrain"]), sections["model"])
    return stages["pretrain"], stages["finetune"], hp


def _override(obj, pairs):
    try:
        return training.apply_overrides(obj, pairs)
    except (InvalidInput, ValueError) as exc:
        raise UsageError(str(exc)) from None


def parse_ablation(text: str | None) -> dict:
    flags = {"use_cont": True, "use_weight": True}
    for token in (text or "").split(","):
        token = token.strip()
        if not token or token == "full":
            continue
        if token == "no-cont":
            flags["use_cont"] = False
        elif token == "no-weight":
            flags["use_weight"] = False
        elif token.isdigit() and int(token) in training.ABLATIONS:
            flags = dict(training.ABLATIONS[int(token)])
        else:
            raise UsageError(f"unknown ablation {token!r}; use no-cont, no-weight or a config number 1-4")
    return flags


def write_manifest(out_dir: Path, command: str, args, extra: dict | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": __version__,
           "arguments": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                         if k not in ("func",)}}
    if extra:
        doc.update(extra)
    path = out_dir / f"{command}.manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


# ---------------------------------------------------------------- data loading


def load_dataset_dir(directory: Path):
    """Entries and clouds of a directory written by ``gen-data``."""
    manifest = _existing(Path(directory) / "manifest.json")
    entries = data.read_manifest(manifest)
    clouds = {}
    for e in entries:
        clouds[e.name] = data.load_cloud(_existing(Path(directory) / f"{e.name}.xyz"), normals=True)
    return entries, clouds


def training_clouds(args):
    if args.data is not None:
        entries, clouds = load_dataset_dir(Path(args.data))
        return [clouds[e.name] for e in entries]
    default = data_dir_default()
    if (default / "manifest.json").exists():
        entries, clouds = load_dataset_dir(default)
        return [clouds[e.name] for e in entries]
    log.info("no dataset directory; generating the desk dataset in memory")
    return [e.build() for e in data.desk_dataset(seed=args.seed or 0)]


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    out = Path(args.out) if args.out else data_dir_default()
    levels = args.noise if args.noise is not None else [0.0, *data.NOISE_LEVELS]
    entries = data.desk_dataset(seed=args.seed or 0, point_count=args.points, noise_levels=tuple(levels))
    manifest = data.write_dataset(entries, out)
    write_manifest(out, "gen-data", args, {"entries": len(entries)})
    print(f"wrote {len(entries)} clouds and {manifest}")
    return 0


def _train_common(args, stage_only=None) -> int:
    ablation = parse_ablation(getattr(args, "ablation", None))
    pre, fine, hp = resolve_configs(args, ablation)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clouds = training_clouds(args)
    log_path = out / "train_log.tsv"
    if log_path.exists():
        log_path.unlink()
    dataset = training.PatchDataset(clouds, hp.patch_size)
    if stage_only == "pretrain":
        ckpt = training.pretrain(dataset, pre, hp, args.deterministic, log_path)
        target = Path(args.ckpt or out / "pretrain.ckpt")
    else:
        init = None
        if args.init:
            init = training.ModelCheckpoint.load(_existing(args.init))
        elif fine.use_cont:
            init = training.pretrain(dataset, pre, hp, args.deterministic, log_path)
        ckpt = training.finetune(dataset, init, fine, hp, args.deterministic, log_path)
        target = Path(args.ckpt or out / "model.ckpt")
    ckpt.save(target, deterministic=args.deterministic)
    write_manifest(out, args.command, args, {
        "pretrain": asdict(pre), "finetune": asdict(fine), "model": hp.to_dict(),
        "checkpoint": str(target), "checkpoint_sha256": ckpt.digest()})
    last = ckpt.history[-1]
    print(f"saved {target} ({last['stage']} epoch {last['epoch']}: total {last['total']:.5f})")
    return 0


def cmd_pretrain(args) -> int:
    return _train_common(args, "pretrain")


def cmd_train(args) -> int:
    return _train_common(args)


def cmd_predict(args) -> int:
    src = _existing(args.input)
    ckpt = training.ModelCheckpoint.load(_existing(args.ckpt))
    cloud = data.load_cloud(src, normals=False)
    normals = training.predict_normals(cloud, ckpt, workers=args.threads)
    target = Path(args.output) if args.output else data.normals_path(src)
    data.save_normals(normals, target)
    write_manifest(target.parent, "predict", args, {"points": len(cloud), "output": str(target)})
    print(f"wrote {len(normals)} normals to {target}")
    return 0


def _method_table(names, ckpt, threads):
    table = {}
    for name in names:
        if name == "model":
            if ckpt is None:
                raise UsageError("method 'model' needs --ckpt")
            table[name] = lambda c, i: training.predict_normals(c, ckpt, i, workers=threads)
        elif name.startswith("pca") and name[3:].isdigit():
            k = int(name[3:])
            table[name] = lambda c, i, k=k: pca_normals(c, k, i, workers=threads)
        elif name in PCA_SCALES:
            k = PCA_SCALES[name]
            table[f"pca{k}"] = lambda c, i, k=k: pca_normals(c, k, i, workers=threads)
        else:
            raise UsageError(f"unknown method {name!r}; use pcaK (e.g. pca18) or model")
    return table


def _query_subsets(entries, clouds, count, seed):
    if not count:
        return None
    rng = np.random.default_rng(seed)
    return {e.name: np.sort(rng.choice(len(clouds[e.name]), min(count, len(clouds[e.name])), replace=False))
            for e in entries}


def _run_benchmark(args, methods, levels) -> int:
    if args.data is not None:
        entries, clouds = load_dataset_dir(Path(args.data))
    else:
        entries = data.desk_dataset(seed=args.seed if args.seed is not None else 1, point_count=args.points,
                                    noise_levels=tuple(levels or data.NOISE_LEVELS))
        clouds = {e.name: e.build() for e in entries}
    if levels:
        entries = [e for e in entries if any(abs(e.noise.level - lv) < 1e-12 for lv in levels)]
        if not entries:
            raise UsageError(f"no dataset entries at noise levels {levels}")
    ckpt = training.ModelCheckpoint.load(_existing(args.ckpt)) if args.ckpt else None
    table = _method_table(methods, ckpt, args.threads)
    report = benchmark(table, entries, clouds, _query_subsets(entries, clouds, args.queries, args.seed or 0))
    out = Path(args.out)
    report.write(out, args.command)
    write_manifest(out, args.command, args, {"methods": list(table), "entries": [e.name for e in entries]})
    sys.stdout.write(report.summary())
    return 0


def cmd_eval(args) -> int:
    if args.pred is not None:
        from .evaluation import rmse_degrees
        pred = data.load_normals(_existing(args.pred))
        gt = data.load_normals(_existing(args.gt)) if args.gt else None
        if gt is None:
            raise UsageError("eval --pred needs --gt")
        value = rmse_degrees(pred, gt)
        out = Path(args.out)
        write_manifest(out, "eval", args, {"rmse_deg": value})
        print(f"unoriented RMSE {value:.4f} deg over {len(pred)} points")
        return 0
    if args.ckpt is None:
        raise UsageError("eval needs --ckpt (with --data) or --pred/--gt")
    return _run_benchmark(args, ["model"], args.noise)


def cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    return _run_benchmark(args, methods, args.noise)


def cmd_grad_check(args) -> int:
    from .gradcheck import format_suite, gradient_suite

    rows = gradient_suite(seed=args.seed or 0)
    print(format_suite(rows))
    ok = all(r.passed for _, _, r in rows)
    write_manifest(Path(args.out), "grad-check", args,
                   {"results": {name: r.worst for name, _, r in rows}, "passed": ok})
    return 0 if ok else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [train]/[pretrain]/[finetune]/[model] sections")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one setting, e.g. finetune.epochs=5 or model.feature_dim=64")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true",
                        help="omit timestamps and wall times so outputs are byte-identical")
    common.add_argument("--threads", type=int, default=1, help="workers for neighbor queries")
    common.add_argument("--out", default=None,
                        help=f"output directory (default: current directory; gen-data: ${DATA_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="weighted-normals",
                                     description="Weighted point-cloud normal estimation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic desk dataset")
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--noise", type=_float_list, default=None, help="comma-separated noise fractions")
    p.set_defaults(func=cmd_gen_data)

    for name, func, text in (("pretrain", cmd_pretrain, "contrastive pre-training"),
                             ("train", cmd_train, "pre-training (unless disabled) plus fine-tuning")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", help=f"dataset directory (default ${DATA_ENV} or generated in memory)")
        p.add_argument("--ckpt", help="checkpoint path to write")
        if name == "train":
            p.add_argument("--ablation", help="comma list of no-cont, no-weight (or a config number 1-4)")
            p.add_argument("--init", help="start fine-tuning from this pre-trained checkpoint")
        p.set_defaults(func=func)

    p = sub.add_parser("predict", parents=[common], help="estimate normals for an .xyz file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--output", help="normals file (default: beside the input)")
    p.set_defaults(func=cmd_predict)

    for name, func, text in (("eval", cmd_eval, "score a model or a normals file"),
                             ("bench", cmd_bench, "compare methods across noise levels")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", help="dataset directory (default: a fresh held-out desk dataset)")
        p.add_argument("--ckpt")
        p.add_argument("--noise", type=_float_list, default=None)
        p.add_argument("--points", type=int, default=2000)
        p.add_argument("--queries", type=int, default=0, help="evaluate this many points per cloud (0 = all)")
        if name == "bench":
            p.add_argument("--methods", default="pca18,pca112,pca450")
        else:
            p.add_argument("--pred", help="predicted .normals file")
            p.add_argument("--gt", help="ground-truth .normals file")
        p.set_defaults(func=func)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of every layer and loss")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out is None and args.command != "gen-data":
        args.out = "."
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return 2
    except (WeightedNormalsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
