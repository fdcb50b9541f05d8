"""Command-line entry point: train, eval, predict, gradcheck, params, gen-toy.

Configuration is a flat JSON object whose keys mirror `RunConfig`; any key
can also be given as ``--key value`` on the command line, which wins over
the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (DataFormatError, FORMATS, Vocabulary, generate_toy_corpus, load_dataset,
                   load_embeddings, random_embeddings, save_dataset, tokenize, Example)
from .experiments import ToyProtocol
from .model import NLI_LABELS, VARIANTS, ModelConfig
from .train import (CheckpointFormatError, DivergenceError, TrainConfig, ensemble_eval, evaluate,
                    history_json, load_checkpoint, new_model, predict_proba, save_checkpoint, train)
from .verify import count_params, gradcheck, tiny_config

log = logging.getLogger("mimn")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    embed_dim: int = 300
    hidden: int = 300
    turns: int = 3
    variant: str = "full"
    mlp_hidden: int = 300
    dropout: float = 0.2
    labels: str = ",".join(NLI_LABELS)
    # optimisation
    batch_size: int = 32
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_coeff: float = 3e-4
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    # data and files
    data_format: str = "unified_jsonl"
    train_data: str = ""
    valid_data: str = ""
    test_data: str = ""
    embeddings: str = ""
    embed_init_scale: float = 0.05
    checkpoint: str = ""
    out_dir: str = "runs"
    precision: str = "f32"

    @property
    def label_names(self) -> tuple[str, ...]:
        return tuple(s.strip() for s in self.labels.split(",") if s.strip())

    @property
    def dtype(self):
        return {"f32": np.float32, "f64": np.float64}[self.precision]

    def model_config(self) -> ModelConfig:
        return ModelConfig(embed_dim=self.embed_dim, hidden=self.hidden, turns=self.turns,
                           variant=self.variant, mlp_hidden=self.mlp_hidden, dropout=self.dropout,
                           labels=self.label_names)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                           eps=self.eps, l2_coeff=self.l2_coeff, patience=self.patience,
                           max_epochs=self.max_epochs, seed=self.seed)

    def validate(self) -> None:
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.data_format not in FORMATS:
            raise ConfigError(f"data_format must be one of {FORMATS}")
        try:
            self.model_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _field_type(f: dataclasses.Field):
    return {"int": int, "float": float, "str": str}[f.type if isinstance(f.type, str) else f.type.__name__]


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    values: dict = {}
    if path:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a flat JSON object")
        if isinstance(values.get("labels"), list):
            values["labels"] = ",".join(values["labels"])
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    values.update(overrides)
    try:
        cfg = RunConfig(**{k: _field_type(known[k])(v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def _emit(doc: dict, path: str | Path | None = None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if path:
        Path(path).write_text(text, encoding="utf-8")


def _require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} path is not set")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {path}")
    return p


# -- commands --------------------------------------------------------------------------------


def cmd_train(cfg: RunConfig, args) -> int:
    train_path = _require(cfg.train_data, "train_data")
    valid_path = _require(cfg.valid_data, "valid_data")
    labels = cfg.label_names
    try:
        train_set = load_dataset(train_path, cfg.data_format, labels)
        valid_set = load_dataset(valid_path, cfg.data_format, labels)
        test_set = load_dataset(_require(cfg.test_data, "test_data"), cfg.data_format, labels) \
            if cfg.test_data else []
    except DataFormatError as exc:
        raise ConfigError(str(exc)) from None
    # the table is frozen, so covering every split leaks nothing into training
    vocab = Vocabulary.build(list(train_set) + list(valid_set) + list(test_set))
    mcfg = cfg.model_config()
    if cfg.embeddings:
        table = load_embeddings(_require(cfg.embeddings, "embeddings"), vocab, cfg.embed_dim,
                                seed=cfg.seed).vectors
    else:
        table = random_embeddings(vocab, cfg.embed_dim, seed=cfg.seed, scale=cfg.embed_init_scale)
    model = new_model(mcfg, vocab, table, seed=cfg.seed, dtype=cfg.dtype)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = train(model, train_set, valid_set, cfg.train_config())
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out_dir / "best.ckpt"
    save_checkpoint(result.best, ckpt)
    extra = {"variant": mcfg.variant, "best_epoch": result.best_epoch,
             "stopped_early": result.stopped_early, "checkpoint": str(ckpt),
             "config": dataclasses.asdict(cfg)}
    if test_set:
        extra["test"] = evaluate(result.best, test_set)
    (out_dir / "history.json").write_text(history_json(result.history, extra), encoding="utf-8")
    _emit({"best_epoch": result.best_epoch, "checkpoint": str(ckpt), "variant": mcfg.variant,
           "valid_accuracy": result.history[result.best_epoch - 1]["valid_accuracy"]})
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    members = [args.model] if args.model else []
    if args.ensemble:
        members += [p for p in args.ensemble.split(",") if p]
    if not members:
        raise ConfigError("eval needs --model and/or --ensemble")
    try:
        models = [load_checkpoint(_require(p, "checkpoint")) for p in members]
    except CheckpointFormatError as exc:
        raise ConfigError(str(exc)) from None
    labels = models[0].config.labels
    if any(m.config.labels != labels for m in models):
        raise ConfigError("ensemble members use different label sets")
    data = _require(args.data or cfg.test_data, "data")
    try:
        examples = load_dataset(data, cfg.data_format, labels)
    except DataFormatError as exc:
        raise ConfigError(f"label set mismatch or bad data: {exc}") from None
    if not examples:
        raise ConfigError("no examples to evaluate")
    try:
        report = ensemble_eval(models, examples) if len(models) > 1 else evaluate(models[0], examples)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    report["members"] = len(models)
    _emit(report)
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    try:
        model = load_checkpoint(_require(args.model, "checkpoint"))
    except CheckpointFormatError as exc:
        raise ConfigError(str(exc)) from None
    p, h = tokenize(args.premise or ""), tokenize(args.hypothesis or "")
    if not p or not h:
        raise ConfigError("premise and hypothesis must be nonempty")
    probs = predict_proba(model, [Example(p, h, 0)])[0]
    labels = model.config.labels
    _emit({"label": labels[int(probs.argmax())],
           "probabilities": {name: float(v) for name, v in zip(labels, probs)}})
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    if cfg.precision != "f64":
        raise ConfigError("gradcheck runs in double precision; use --precision f64")
    mcfg = tiny_config(cfg.variant, dim=args.dim)
    if args.corrupt_backward:
        with T.corrupt_backward(args.corrupt_backward):
            report = gradcheck(mcfg, seed=cfg.seed, tolerance=args.tolerance)
    else:
        report = gradcheck(mcfg, seed=cfg.seed, tolerance=args.tolerance)
    _emit(report.to_dict(), args.report)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_params(cfg: RunConfig, args) -> int:
    _emit(count_params(cfg.model_config()).to_dict())
    return EXIT_OK


def cmd_gen_toy(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = dict(zip(("train", "valid", "test"), generate_toy_corpus(cfg.seed, args.size)))
    for name, exs in splits.items():
        save_dataset(exs, out / f"{name}.jsonl", NLI_LABELS)
    proto = ToyProtocol()
    toy_cfg = {
        "embed_dim": proto.dim, "hidden": proto.dim, "mlp_hidden": proto.dim, "lr": proto.lr,
        "max_epochs": proto.max_epochs, "patience": proto.patience, "dropout": proto.dropout,
        "embed_init_scale": proto.embed_scale, "seed": cfg.seed, "data_format": "unified_jsonl",
        "train_data": str(out / "train.jsonl"), "valid_data": str(out / "valid.jsonl"),
        "test_data": str(out / "test.jsonl"), "out_dir": str(out / "run"),
    }
    (out / "config.json").write_text(json.dumps(toy_cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit({"out_dir": str(out), **{name: len(exs) for name, exs in splits.items()}})
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "gradcheck": cmd_gradcheck, "params": cmd_params, "gen-toy": cmd_gen_toy,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kw: dict = {"dest": f.name, "default": argparse.SUPPRESS, "type": _field_type(f),
                    "help": f"(default: {f.default})"}
        if f.name == "variant":
            kw["choices"] = VARIANTS
        elif f.name == "precision":
            kw["choices"] = ("f32", "f64")
        elif f.name == "data_format":
            kw["choices"] = FORMATS
        common.add_argument(flag, **kw)

    parser = argparse.ArgumentParser(prog="mimn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model and write the best checkpoint")
    p = sub.add_parser("eval", parents=[common], help="accuracy overall and per label, as JSON")
    p.add_argument("--model", help="checkpoint file")
    p.add_argument("--ensemble", help="comma-separated checkpoints averaged by probability")
    p.add_argument("--data", help="examples to evaluate (default: test_data)")
    p = sub.add_parser("predict", parents=[common], help="label one premise/hypothesis pair")
    p.add_argument("--model", required=True)
    p.add_argument("--premise", required=True)
    p.add_argument("--hypothesis", required=True)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--report", help="also write the JSON report here")
    p.add_argument("--corrupt-backward", metavar="OP", choices=sorted(T.RECORDED_OPS),
                   help="negative control: perturb the backward rule of primitive OP")
    sub.add_parser("params", parents=[common], help="count trainable parameters")
    p = sub.add_parser("gen-toy", parents=[common], help="write the synthetic toy corpus")
    p.add_argument("--size", type=int, default=600)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if hasattr(args, f.name)}
    if args.command == "gradcheck":
        overrides.setdefault("precision", "f64")
    try:
        cfg = load_run_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"mimn {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
