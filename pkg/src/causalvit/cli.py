"""Command-line surface: train, eval, analyze, flops.

Configuration is plain key=value text; later ``--config`` files override
earlier ones and explicit flags win over files. Every run writes a
``run.cfg`` echo of the fully resolved configuration, which is enough to
reproduce the run bit-exactly. Dumped attention files and checkpoints
use the binary formats defined in their owning modules.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import analysis, data, model as model_mod, training
from .attention import AttentionRecord, FormatError, mask_kind_from_str, write_attention_dump
from .model import ClsPlacement, ModelConfig, PRESETS, build, forward, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .training import LrSchedule, Scheme, SoftMaskSchedule, TrainConfig, _atomic_write

DATA_ENV = "CAUSALVIT_DATA"

TRAIN_DEFAULTS = {
    "preset": "micro",
    "dataset": "synthetic",
    "data_dir": "",
    "out": "runs/latest",
    "epochs": 20,
    "batch_size": 64,
    "base_lr": 5e-4,
    "warmup_epochs": 2.0,
    "weight_decay": 0.05,
    "label_smoothing": 0.1,
    "mixup": 0.1,
    "cutmix": 0.1,
    "drop_path": 0.0,
    "softmask_scheme": "constant",
    "cutoff_epochs": 10,
    "alpha0": 1.0,
    "seed": 0,
    "cls": "post",
    "mask": "causal",
    "synth_train": 2000,
    "synth_test": 500,
}


def parse_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _resolve_train_settings(args) -> dict:
    settings = dict(TRAIN_DEFAULTS)
    for path in args.config or []:
        settings.update(parse_config_file(path))
    for key in TRAIN_DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag
    # normalize types (config files carry strings)
    casts = {int: ("epochs", "batch_size", "cutoff_epochs", "seed", "synth_train", "synth_test"),
             float: ("base_lr", "warmup_epochs", "weight_decay", "label_smoothing",
                     "mixup", "cutmix", "drop_path", "alpha0")}
    for typ, keys in casts.items():
        for key in keys:
            settings[key] = typ(settings[key])
    return settings


def _settings_text(settings: dict) -> str:
    return "".join(f"{k}={settings[k]}\n" for k in sorted(settings))


def _load_dataset(settings: dict):
    name = settings["dataset"]
    if name == "synthetic":
        return data.make_synthetic(n_train=settings["synth_train"], n_test=settings["synth_test"], seed=1234)
    # an explicit --data-dir wins; otherwise fall back to $CAUSALVIT_DATA/<dataset>
    directory = settings["data_dir"] or os.path.join(os.environ.get(DATA_ENV, "data"), name)
    if name == "cifar10":
        return data.load_cifar10(directory)
    if name == "mnist":
        return data.load_mnist(directory)
    raise ValueError(f"unknown dataset {name!r} (choose cifar10, mnist, or synthetic)")


def _model_config(settings: dict, train_ds: data.Dataset) -> ModelConfig:
    preset = PRESETS.get(settings["preset"])
    if preset is None:
        raise ValueError(f"unknown preset {settings['preset']!r} (choose {sorted(PRESETS)})")
    channels, image_size = train_ds.images.shape[1], train_ds.images.shape[2]
    if image_size != preset.image_size:
        raise ValueError(f"dataset image size {image_size} does not match preset {preset.image_size}")
    placement = ClsPlacement.FRONT if settings["cls"] == "front" else ClsPlacement.POST_SEQUENCE
    mask = mask_kind_from_str({"modified": "modified_causal"}.get(settings["mask"], settings["mask"]))
    return dataclasses.replace(
        preset,
        num_classes=train_ds.num_classes,
        in_channels=channels,
        cls_placement=placement,
        mask_kind_at_inference=mask,
    )


def cmd_train(args) -> int:
    settings = _resolve_train_settings(args)
    out_dir = settings["out"]
    os.makedirs(out_dir, exist_ok=True)
    train_ds, test_ds = _load_dataset(settings)
    config = _model_config(settings, train_ds)
    net = build(config, seed=settings["seed"])
    scheme = settings["softmask_scheme"]
    softmask = SoftMaskSchedule(
        scheme=Scheme.CONSTANT if scheme == "none" else Scheme(scheme),
        cutoff_epochs=0 if scheme == "none" else settings["cutoff_epochs"],
        alpha0=settings["alpha0"],
    )
    cfg = TrainConfig(
        epochs=settings["epochs"],
        batch_size=settings["batch_size"],
        lr=LrSchedule(settings["base_lr"], settings["warmup_epochs"], settings["epochs"]),
        weight_decay=settings["weight_decay"],
        label_smoothing=settings["label_smoothing"],
        mixup_alpha=settings["mixup"],
        cutmix_alpha=settings["cutmix"],
        drop_path_rate=settings["drop_path"],
        seed=settings["seed"],
        softmask=softmask,
    )
    _atomic_write(os.path.join(out_dir, "run.cfg"), _settings_text(settings))
    print(f"training {settings['preset']} on {settings['dataset']} "
          f"({len(train_ds)} train / {len(test_ds)} test, {model_mod.param_count(config):,} params)")
    try:
        history = training.train(
            net, train_ds.images, train_ds.labels, test_ds.images, test_ds.labels,
            cfg, out_dir=out_dir, log=print,
        )
    except training.DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    _atomic_write(os.path.join(out_dir, "metrics.csv"), training.metrics_to_csv(history))
    save_checkpoint(net, os.path.join(out_dir, "final.ckpt"), epoch=cfg.epochs)
    print(f"wrote {out_dir}/metrics.csv, {out_dir}/final.ckpt, {out_dir}/run.cfg")
    return 0


def _parse_dump_spec(items: list[str]) -> dict:
    spec = {"layers": "all", "heads": "all", "samples": "30"}
    for item in items:
        if "=" not in item:
            raise ValueError(f"--dump-attn expects key=value items, got {item!r}")
        key, value = item.split("=", 1)
        if key not in spec:
            raise ValueError(f"--dump-attn keys are layers/heads/samples, got {key!r}")
        spec[key] = value
    return spec


def _parse_index_list(text: str, count: int) -> list[int]:
    """1-based comma list (or 'all') -> 0-based indices."""
    if text == "all":
        return list(range(count))
    picked = [int(v) - 1 for v in text.split(",")]
    for p in picked:
        if p < 0 or p >= count:
            raise ValueError(f"index {p + 1} outside 1..{count}")
    return picked


def cmd_eval(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    settings = dict(TRAIN_DEFAULTS)
    settings.update({"dataset": args.dataset, "data_dir": args.data_dir or ""})
    _, test_ds = _load_dataset(settings)
    loss, acc, confs, correct = training.evaluate(net, test_ds.images, test_ds.labels, args.batch_size)
    report = analysis.ece(confs, correct)
    print(f"accuracy {acc:.4f}  loss {loss:.4f}  ece {report.ece:.4f}")

    if args.dump_attn is not None:
        spec = _parse_dump_spec(args.dump_attn)
        layers = _parse_index_list(spec["layers"], net.config.depth)
        heads = _parse_index_list(spec["heads"], net.config.num_heads)
        samples = min(int(spec["samples"]), len(test_ds))
        os.makedirs(args.dump_dir, exist_ok=True)
        for s in range(samples):
            image = Tensor(test_ds.images[s : s + 1])
            _, captures = forward(net, image, capture_layers=layers)
            for layer in layers:
                for head in heads:
                    rec = AttentionRecord(layer=layer + 1, head=head + 1, matrix=captures[layer][0, head])
                    path = os.path.join(args.dump_dir, f"sample{s:04d}_layer{layer + 1:02d}_head{head + 1}.atnr")
                    write_attention_dump(rec, path)
        print(f"wrote {samples * len(layers) * len(heads)} attention dumps to {args.dump_dir}")
    return 0


def cmd_analyze(args) -> int:
    try:
        curves, summaries = analysis.analyze_dumps(args.paths, threshold=args.threshold)
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    os.makedirs(args.out_dir, exist_ok=True)
    _atomic_write(os.path.join(args.out_dir, "spectra.csv"), analysis.spectra_csv(curves))
    _atomic_write(os.path.join(args.out_dir, "summary.csv"), analysis.summary_csv(summaries, args.threshold))
    for layer, head, rank in summaries:
        print(f"layer {layer} head {head}: effective rank ({args.threshold:g}) = {rank}")
    print(f"wrote {args.out_dir}/spectra.csv and {args.out_dir}/summary.csv")
    return 0


def cmd_flops(args) -> int:
    from .attention import BIDIRECTIONAL, CAUSAL

    bi = analysis.attention_flops(args.n, args.d, BIDIRECTIONAL)
    ca = analysis.attention_flops(args.n, args.d, CAUSAL)
    print(f"self-attention FLOPs at n={args.n}, d={args.d}")
    print(f"  bidirectional: {bi:,}")
    print(f"  causal:        {ca:,}")
    print(f"  difference:    {bi - ca:,}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causalvit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write metrics.csv / final.ckpt / run.cfg")
    p_train.add_argument("--config", action="append", help="key=value config file (repeatable; later wins)")
    p_train.add_argument("--preset", choices=sorted(PRESETS))
    p_train.add_argument("--dataset", choices=["cifar10", "mnist", "synthetic"])
    p_train.add_argument("--data-dir", dest="data_dir")
    p_train.add_argument("--out")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--base-lr", dest="base_lr", type=float)
    p_train.add_argument("--warmup-epochs", dest="warmup_epochs", type=float)
    p_train.add_argument("--weight-decay", dest="weight_decay", type=float)
    p_train.add_argument("--label-smoothing", dest="label_smoothing", type=float)
    p_train.add_argument("--mixup", type=float)
    p_train.add_argument("--cutmix", type=float)
    p_train.add_argument("--drop-path", dest="drop_path", type=float)
    p_train.add_argument("--softmask-scheme", dest="softmask_scheme", choices=["linear", "constant", "none"])
    p_train.add_argument("--cutoff-epochs", dest="cutoff_epochs", type=int)
    p_train.add_argument("--alpha0", type=float)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--cls", choices=["front", "post"])
    p_train.add_argument("--mask", choices=["causal", "bidirectional", "modified"])
    p_train.add_argument("--synth-train", dest="synth_train", type=int)
    p_train.add_argument("--synth-test", dest="synth_test", type=int)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint; optionally dump attention maps")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--dataset", choices=["cifar10", "mnist", "synthetic"], required=True)
    p_eval.add_argument("--data-dir", dest="data_dir")
    p_eval.add_argument("--batch-size", dest="batch_size", type=int, default=256)
    p_eval.add_argument("--dump-attn", dest="dump_attn", nargs="+", metavar="KEY=VALUE",
                        help="layers=1,4 heads=all samples=30 (1-based indices)")
    p_eval.add_argument("--dump-dir", dest="dump_dir", default="dumps")
    p_eval.set_defaults(func=cmd_eval)

    p_analyze = sub.add_parser("analyze", help="rank spectra of attention dumps -> CSV")
    p_analyze.add_argument("paths", nargs="+")
    p_analyze.add_argument("--threshold", type=float, default=0.8)
    p_analyze.add_argument("--out-dir", dest="out_dir", default="analysis_out")
    p_analyze.set_defaults(func=cmd_analyze)

    p_flops = sub.add_parser("flops", help="attention FLOPs for both mask types")
    p_flops.add_argument("--n", type=int, required=True)
    p_flops.add_argument("--d", type=int, required=True)
    p_flops.set_defaults(func=cmd_flops)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
