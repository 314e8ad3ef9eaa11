"""Command-line interface.  JSON results go to stdout, logs to stderr.

Exit status 0 means the command ran to completion (a verification verdict,
positive or not, lives in the JSON); 1 is an operational failure such as an
unreadable file or an unreachable model; 2 is a usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from datamark.config import ConfigError, RunConfig, load_run_config
from datamark.core import Dataset
from datamark.datasets import FORMATS, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from datamark.experiments import ABLATION_PARAMS, ablate, run_pipeline
from datamark.model.base import Classifier
from datamark.model.mocks import MOCK_KINDS, MockSpec, make_mock
from datamark.model.network import Architecture, MiniNetClassifier, MiniNetParams, TrainConfig, accuracy, train
from datamark.model.remote import RemoteClassifier, make_server
from datamark.verify import ANY_NONTARGET, VerificationConfig, evaluate, rsd_experiment, verify_dataset_usage
from datamark.watermark import (
    CORNERS,
    WatermarkConfig,
    WatermarkKey,
    make_line_trigger,
    make_square_trigger,
    watermark_dataset,
)

log = logging.getLogger("datamark")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _emit(obj, indent: int | None = 2) -> None:
    json.dump(obj, sys.stdout, indent=indent)
    sys.stdout.write("\n")
    sys.stdout.flush()


def _add_dataset_args(p: argparse.ArgumentParser, name: str, required: bool = True) -> None:
    p.add_argument(f"--{name}", required=required, help=f"{name} dataset path (file or directory)")
    p.add_argument(f"--{name}-format", choices=FORMATS, default="npz")
    p.add_argument(f"--{name}-labels", help="IDX labels file or PNG-directory CSV")


def _load(args, name: str) -> Dataset:
    return load_dataset(
        getattr(args, f"{name}_format"),
        getattr(args, name),
        getattr(args, f"{name}_labels"),
        args.num_classes,
    )


def _load_key(path: str) -> WatermarkKey:
    return WatermarkKey.from_json(Path(path).read_text())


def _add_model_args(p: argparse.ArgumentParser, remote: bool = True) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--params", help="trained parameter file from `train`")
    if remote:
        g.add_argument("--endpoint", help="URL of a posterior server (wire protocol /v1/posterior)")
    g.add_argument("--mock", choices=MOCK_KINDS, help="analytic mock classifier")
    p.add_argument("--mock-label", type=int, default=0, help="label returned by the constant mock")
    p.add_argument("--gap-mean", type=float, default=0.6)
    p.add_argument("--gap-std", type=float, default=0.05)
    if remote:
        p.add_argument("--timeout", type=float, default=10.0)
        p.add_argument("--retries", type=int, default=2)


def _model(args, key: WatermarkKey | None, data: Dataset | None, num_classes: int | None) -> Classifier:
    if args.params:
        return MiniNetClassifier(MiniNetParams.load(args.params))
    if getattr(args, "endpoint", None):
        return RemoteClassifier(args.endpoint, num_classes, args.timeout, args.retries)
    if num_classes is None:
        raise ValueError("a mock classifier needs a class count (--num-classes or a test set)")
    spec = MockSpec(
        kind=args.mock,
        num_classes=num_classes,
        target_label=key.target_label if key else 0,
        trigger=key.trigger if key else None,
        constant_label=args.mock_label,
        gap_mean=args.gap_mean,
        gap_std=args.gap_std,
        seed=getattr(args, "seed", 0) or 0,
    )
    mock = make_mock(spec)
    if data is not None:
        mock.register(data)
    return mock


def _add_verification_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--certainty-margin", "--alpha", dest="alpha", type=float, default=0.5)
    p.add_argument("--samples", type=int, default=100, help="M, benign images per verification")
    p.add_argument("--significance", type=float, default=0.05)
    p.add_argument("--source-label", default=None, help=f"integer class or {ANY_NONTARGET}")
    p.add_argument("--test-kind", choices=("t", "wilcoxon"), default="t")


def _verification_config(args) -> VerificationConfig:
    src = args.source_label
    if src is not None and src != ANY_NONTARGET:
        src = int(src)
    return VerificationConfig(args.alpha, args.samples, args.significance, src, args.seed, args.test_kind)


# --- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        num_classes=args.classes,
        per_class=args.per_class,
        shape=_ints(args.shape),
        noise_std=args.noise_std,
        seed=args.seed,
    )
    tr, te = generate_synthetic(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr.save_npz(out / "train.npz")
    te.save_npz(out / "test.npz")
    _emit({"train": str(out / "train.npz"), "test": str(out / "test.npz"), "train_size": len(tr), "test_size": len(te)})
    return 0


def cmd_make_trigger(args) -> int:
    shape = _ints(args.shape)
    if args.kind == "square":
        trig = make_square_trigger(
            shape, args.side, args.corner, _ints(args.offset),
            255 if args.intensity is None else args.intensity, args.blend_value,
        )
    else:
        trig = make_line_trigger(
            shape, args.width, args.orientation, args.position,
            0 if args.intensity is None else args.intensity, args.blend_value,
        )
    target = args.target_label - args.label_base
    if target < 0:
        raise ValueError(f"target label {args.target_label} is below label base {args.label_base}")
    key = WatermarkKey(trig, target)
    if args.out:
        Path(args.out).write_text(key.to_json())
    _emit(key.to_dict())
    return 0


def cmd_watermark(args) -> int:
    data = _load(args, "input")
    key = _load_key(args.key)
    marked, modified = watermark_dataset(data, key, WatermarkConfig(args.rate, args.seed, args.exclude_target))
    save_dataset(marked, args.out_format or args.input_format, args.out, args.out_labels)
    manifest = {"n": len(data), "rate": args.rate, "seed": args.seed, "count": len(modified), "modified_indices": modified}
    if args.manifest:
        Path(args.manifest).write_text(json.dumps(manifest))
    _emit(manifest)
    return 0


def cmd_train(args) -> int:
    data = _load(args, "input")
    arch = Architecture.from_name(args.arch, args.hidden)
    cfg = TrainConfig(args.epochs, args.batch_size, args.lr, args.momentum, args.seed, args.init_scale)
    params = train(data, arch, cfg)
    params.save(args.out)
    _emit({"params": args.out, "loss_history": params.loss_history, "train_accuracy": accuracy(params, data)})
    return 0


def cmd_evaluate(args) -> int:
    test = _load(args, "test")
    key = _load_key(args.key)
    model = _model(args, key, test, test.num_classes)
    _emit(evaluate(model, test, key).to_dict())
    return 0


def cmd_verify(args) -> int:
    test = _load(args, "test")
    key = _load_key(args.key)
    model = _model(args, key, test, test.num_classes)
    outcome = verify_dataset_usage(model, test, key, _verification_config(args))
    print(outcome.verdict_line(), file=sys.stderr)
    _emit(outcome.to_dict(verbose=args.verbose))
    return 0


def cmd_rsd(args) -> int:
    test = _load(args, "test")
    key = _load_key(args.key)
    model = _model(args, key, test, test.num_classes)
    cfg = _verification_config(args)
    rsd = rsd_experiment(model, test, key, cfg, args.repetitions, args.workers)
    _emit({"rsd": rsd, "repetitions": args.repetitions, "rejections": round(rsd * args.repetitions),
           "certainty_margin": cfg.certainty_margin, "significance": cfg.significance, "samples": cfg.sample_count})
    return 0


def cmd_serve_mock(args) -> int:
    key = _load_key(args.key) if args.key else None
    test = _load(args, "test") if args.test else None
    k = args.num_classes if args.num_classes is not None else (test.num_classes if test else None)
    model = _model(args, key, test, k)
    server = make_server(model, args.host, args.port)
    host, port = server.server_address[:2]
    # a single line, so a parent process can read the address before serving starts
    _emit({"url": f"http://{host}:{port}", "path": "/v1/posterior"}, indent=None)
    log.info("serving posteriors on http://%s:%d", host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _config_or_default(args) -> RunConfig:
    if args.config:
        return load_run_config(args.config)
    from datamark.config import parse_run_config

    return parse_run_config({"label_base": 0})


def cmd_ablate(args) -> int:
    cfg = _config_or_default(args)
    rows = ablate(cfg, args.param, _floats(args.values))
    w = csv.DictWriter(sys.stdout, fieldnames=[args.param, "modified", "ba", "wsr"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    sys.stdout.flush()
    return 0


def cmd_run(args) -> int:
    _emit(run_pipeline(_config_or_default(args)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="datamark", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--num-classes", type=int, default=None)
        return p

    p = add("synth", cmd_synth, "generate the synthetic corpus as train/test .npz files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=625)
    p.add_argument("--shape", default="3,8,8", help="C,W,H")
    p.add_argument("--noise-std", type=float, default=30.0)

    p = add("make-trigger", cmd_make_trigger, "emit a watermark key as JSON")
    p.add_argument("--kind", choices=("square", "line"), default="square")
    p.add_argument("--shape", required=True, help="C,W,H")
    p.add_argument("--target-label", type=int, required=True)
    p.add_argument("--label-base", type=int, choices=(0, 1), default=0)
    p.add_argument("--side", type=int, default=3)
    p.add_argument("--corner", choices=CORNERS, default="bottom_right")
    p.add_argument("--offset", default="1,1", help="dx,dy from the corner")
    p.add_argument("--width", type=int, default=3)
    p.add_argument("--orientation", choices=("horizontal", "vertical"), default="horizontal")
    p.add_argument("--position", type=int, default=None)
    p.add_argument("--intensity", type=int, default=None, help="default 255 for squares, 0 for lines")
    p.add_argument("--blend-value", type=float, default=1.0)
    p.add_argument("--out")

    p = add("watermark", cmd_watermark, "watermark a training set")
    _add_dataset_args(p, "input")
    p.add_argument("--key", required=True)
    p.add_argument("--rate", type=float, default=0.05)
    p.add_argument("--exclude-target", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--out-format", choices=FORMATS)
    p.add_argument("--out-labels")
    p.add_argument("--manifest")

    p = add("train", cmd_train, "train the reference network")
    _add_dataset_args(p, "input")
    p.add_argument("--arch", choices=("linear", "mlp", "conv"), default="mlp")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--init-scale", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "benign accuracy and watermark success rate")
    _add_model_args(p)
    _add_dataset_args(p, "test")
    p.add_argument("--key", required=True)

    for name, fn, text in (("verify", cmd_verify, "one ownership verification"), ("rsd", cmd_rsd, "ratio of successful detections")):
        p = add(name, fn, text)
        _add_model_args(p)
        _add_dataset_args(p, "test")
        p.add_argument("--key", required=True)
        _add_verification_args(p)
        if name == "verify":
            p.add_argument("--verbose", action="store_true", help="include raw pairs and differences")
        else:
            p.add_argument("--repetitions", type=int, default=100)
            p.add_argument("--workers", type=int, default=1)

    p = add("serve-mock", cmd_serve_mock, "serve a classifier over the posterior wire protocol")
    _add_model_args(p, remote=False)
    _add_dataset_args(p, "test", required=False)
    p.add_argument("--key")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)

    p = add("ablate", cmd_ablate, "sweep the watermarking rate or blend value, CSV of WSR per setting")
    p.add_argument("--config")
    p.add_argument("--param", choices=ABLATION_PARAMS, required=True)
    p.add_argument("--values", required=True, help="comma-separated")

    p = add("run", cmd_run, "full baseline/watermarked pipeline from a config file")
    p.add_argument("--config")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return 2
    except (ValueError, OSError, RuntimeError, ArithmeticError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
