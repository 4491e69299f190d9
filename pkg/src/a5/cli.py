"""Command line: ``a5 {train,a5o,a5r,a5rc,a5p,a5pc,certify,attack,report} [flags]``.

Exit codes: 0 success, 1 configuration / input error, 2 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from a5.attacks import AttackConfig, pgd_attack
from a5.certify import BoundMethod
from a5.data import Dataset, load_glyph_set, load_idx, split_subset, synth_dataset
from a5.defense import (AugmentPolicy, DefenseSpec, EpsSchedule, Robustifier, TrainConfig, a5o_robustify_dataset,
                        a5r_train, a5rc_cotrain, crown_ibp_train, evaluate)
from a5.defense.quality import mean_psnr
from a5.errors import CheckpointError, ConfigError, FormatError
from a5.models import build_model
from a5.nn import load_checkpoint, read_manifest, save_checkpoint
from a5.physical import (AcquisitionPolicy, PhysicalConfig, a5p_robustify, a5pc_cotrain, acquisition_dataset,
                         physical_evaluate, write_glyph_set)
from a5.rng import Rng

log = logging.getLogger("a5")

RECIPES = ("train", "a5o", "a5r", "a5rc", "a5p", "a5pc", "certify", "attack", "report")
SCHEMA_VERSION = 1
REPORT_COLUMNS = ("recipe", "eps_a_c", "eps_a_r", "eps_d", "clean_err", "pgd_err", "cert_err", "psnr_mean")

# recipe -> flags that must be present (after merging the config file)
REQUIRED = {
    "train": ("data",),
    "a5o": ("data", "checkpoint"),
    "a5r": ("data", "checkpoint"),
    "a5rc": ("data", "checkpoint", "robustifier"),
    "a5p": ("data", "checkpoint"),
    "a5pc": ("data", "checkpoint"),
    "certify": ("data", "checkpoint"),
    "attack": ("data", "checkpoint"),
    "report": (),
}


class ReportError(RuntimeError):
    """A metrics record violates clean <= pgd <= certified."""


# -- configuration --------------------------------------------------------------------------

@dataclass
class RunConfig:
    recipe: str
    out: Path
    seed: int = 0
    data: str | None = None
    checkpoint: Path | None = None
    robustifier: Path | None = None
    model: str = "conv-small"
    robustifier_model: str = "robustifier"
    split: dict | None = None
    eval: dict = field(default_factory=lambda: {"eps": 0.1, "method": "best", "batch_size": 250})
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: dict = field(default_factory=lambda: {"steps": 50, "restarts": 5, "step_size": None})
    a5o: dict = field(default_factory=lambda: {"steps": 100, "lr": 0.05, "method": "crown-ibp"})
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    acquisition: AcquisitionPolicy = field(default_factory=AcquisitionPolicy)
    physical: PhysicalConfig = field(default_factory=PhysicalConfig)
    glyphs: dict = field(default_factory=lambda: {"train_per_prototype": 100, "eval_per_prototype": 100})

    @property
    def eval_eps(self) -> float:
        return float(self.eval["eps"])

    @property
    def eval_method(self) -> BoundMethod:
        return BoundMethod.parse(self.eval.get("method", "best"))

    def attack_config(self, eps: float | None = None) -> AttackConfig:
        a = self.attack
        return AttackConfig(self.eval_eps if eps is None else eps, steps=int(a.get("steps", 50)),
                            step_size=a.get("step_size"), restarts=int(a.get("restarts", 5)), seed=self.seed)


def _dataclass_from(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def _dict_section(values, defaults: dict, where: str) -> dict:
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(values) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return {**defaults, **values}


def load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"config {path}: schema_version must be {SCHEMA_VERSION}, "
                          f"got {doc.get('schema_version')!r}")
    return doc


def build_run_config(args: argparse.Namespace) -> RunConfig:
    doc = load_config_file(args.config) if args.config else {"schema_version": SCHEMA_VERSION}
    doc = copy.deepcopy(doc)
    doc.pop("schema_version")
    base = RunConfig(args.command, Path("."))
    known = {f.name for f in dataclasses.fields(RunConfig)} - {"recipe"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    # flags override file values
    for key in ("seed", "data", "checkpoint", "robustifier", "out"):
        value = getattr(args, key)
        if value is not None:
            doc[key] = value
    for key in REQUIRED[args.command] + ("out",):
        if doc.get(key) is None:
            raise ConfigError(f"missing required flag --{key} for '{args.command}'")
    seed = int(doc.get("seed", 0))
    if not 0 <= seed < 2**64:
        raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {seed}")

    train = dict(doc.get("train", {}))
    schedule = doc.get("schedule", train.pop("schedule", None))
    train.setdefault("seed", seed)
    if args.eps_train is not None:
        train["eps_train"] = args.eps_train
        if schedule:
            schedule = {**schedule, "target": args.eps_train}
    if args.eps_d is not None:
        train["eps_d"] = args.eps_d
    if schedule:
        train["schedule"] = _dataclass_from(EpsSchedule, schedule, "schedule")
    train_cfg = _dataclass_from(TrainConfig, train, "train")

    physical = dict(doc.get("physical", {}))
    physical.setdefault("seed", seed)
    if args.eps_d is not None:
        physical["eps_d"] = args.eps_d
    if args.eps_train is not None:
        physical["eps_ar"] = args.eps_train
    evaluation = _dict_section(doc.get("eval", {}), base.eval, "eval")
    if args.eps is not None:
        evaluation["eps"] = args.eps

    cfg = RunConfig(
        recipe=args.command,
        out=Path(doc["out"]),
        seed=seed,
        data=doc.get("data"),
        checkpoint=Path(doc["checkpoint"]) if doc.get("checkpoint") else None,
        robustifier=Path(doc["robustifier"]) if doc.get("robustifier") else None,
        model=doc.get("model", base.model),
        robustifier_model=doc.get("robustifier_model", base.robustifier_model),
        split=doc.get("split"),
        eval=evaluation,
        train=train_cfg,
        attack=_dict_section(doc.get("attack", {}), base.attack, "attack"),
        a5o=_dict_section(doc.get("a5o", {}), base.a5o, "a5o"),
        augment=_dataclass_from(AugmentPolicy, doc.get("augment", {}), "augment"),
        acquisition=_dataclass_from(AcquisitionPolicy, doc.get("acquisition", {}), "acquisition"),
        physical=_dataclass_from(PhysicalConfig, physical, "physical"),
        glyphs=_dict_section(doc.get("glyphs", {}), base.glyphs, "glyphs"),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.eval_eps < 0:
        raise ConfigError("--eps must be >= 0")
    try:
        cfg.eval_method
        cfg.attack_config()
        BoundMethod.parse(cfg.train.method)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    outputs = {cfg.out.resolve()} | {(cfg.out / n).resolve() for n in ("classifier.ckpt", "robustifier.ckpt")}
    for name in ("checkpoint", "robustifier"):
        path = getattr(cfg, name)
        if path is not None and path.resolve() in outputs:
            raise ConfigError(f"--{name} {path} would be overwritten by outputs in --out {cfg.out}")
    if cfg.recipe in ("a5p", "a5pc") and not str(cfg.data).startswith("pgm:"):
        raise ConfigError(f"'{cfg.recipe}' needs --data pgm:<dir>")


# -- inputs -------------------------------------------------------------------------------

def parse_data_spec(spec: str):
    """``idx:<images>,<labels>`` | ``synth:<kind>,<n>[,<classes>[,<dim>]]`` | ``pgm:<dir>``."""
    kind, sep, rest = spec.partition(":")
    if not sep:
        raise ConfigError(f"malformed --data {spec!r}")
    if kind == "idx":
        parts = rest.split(",")
        if len(parts) != 2:
            raise ConfigError("--data idx: needs <images>,<labels>")
        return load_idx(*parts)
    if kind == "synth":
        parts = rest.split(",")
        if not 2 <= len(parts) <= 4:
            raise ConfigError("--data synth: needs <kind>,<n>[,<classes>[,<dim>]]")
        try:
            nums = [int(p) for p in parts[1:]]
        except ValueError as exc:
            raise ConfigError(f"malformed --data {spec!r}") from exc
        return synth_dataset(parts[0], *nums)
    if kind == "pgm":
        return load_glyph_set(rest)
    raise ConfigError(f"unknown data kind {kind!r} in --data")


def _splits(cfg: RunConfig, ds: Dataset, default_split: bool) -> tuple[Dataset, Dataset]:
    split = cfg.split
    if split is None and not default_split:
        return ds, ds
    n = len(ds)
    split = {"train_n": min(2000, 2 * n // 3), "test_n": None, "seed": 17, **(split or {})}
    if split["test_n"] is None:
        split["test_n"] = min(1000, n - split["train_n"])
    return split_subset(ds, int(split["train_n"]), int(split["test_n"]), int(split["seed"]))


def _glyph_sets(cfg: RunConfig, protos) -> tuple[Dataset, Dataset]:
    rng = Rng(cfg.seed)
    m = max(p.label for p in protos) + 1
    train = acquisition_dataset(protos, cfg.acquisition, int(cfg.glyphs["train_per_prototype"]),
                                rng.child("glyphs", "train"), m)
    test = acquisition_dataset(protos, cfg.acquisition, int(cfg.glyphs["eval_per_prototype"]),
                               rng.child("glyphs", "eval"), m)
    return train, test


def _load_net(path: Path, role: str):
    net = load_checkpoint(path)
    meta = read_manifest(path).get("meta", {})
    if meta.get("role", role) != role:
        raise CheckpointError(f"{path} holds a {meta.get('role')}, expected a {role}")
    return net, meta


def _check_classifier(net, ds_shape, num_classes, path):
    if net.input_shape != tuple(ds_shape) or net.output_shape != (num_classes,):
        raise CheckpointError(f"{path}: network {net.input_shape}->{net.output_shape} is incompatible with "
                              f"data {tuple(ds_shape)} with {num_classes} classes")


# -- metrics ----------------------------------------------------------------------------

def _jsonable(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, float) and math.isnan(value):
        raise ValueError("NaN in metrics")
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def metrics_line(record: dict) -> str:
    return json.dumps(_jsonable(record), sort_keys=True, allow_nan=False) + "\n"


class MetricsWriter:
    def __init__(self, path: Path):
        self.path = path
        self.path.write_text("", encoding="utf-8")

    def __call__(self, record: dict):
        with self.path.open("a", encoding="utf-8", newline="\n") as fh:
            fh.write(metrics_line(record))


def _final(cfg: RunConfig, metrics: dict, eps_a_c=None, eps_a_r=None, eps_d=None, **extra) -> dict:
    record = {
        "final": True, "recipe": cfg.recipe, "seed": cfg.seed, "eps": cfg.eval_eps,
        "eps_a_c": eps_a_c, "eps_a_r": eps_a_r, "eps_d": eps_d,
        "clean_err": metrics["clean_err"], "pgd_err": metrics.get("pgd_err"), "cert_err": metrics["cert_err"],
        "mean_wc_xent": metrics.get("mean_wc_xent"), "psnr_mean": metrics.get("psnr_mean"),
    }
    record.update(extra)
    return record


# -- recipes -----------------------------------------------------------------------------

def _eval(cfg, net, ds, robustify=None):
    return evaluate(net, ds, cfg.eval_eps, robustify, cfg.attack_config(), cfg.eval_method,
                    batch_size=int(cfg.eval["batch_size"]), rng=Rng(cfg.seed).child("final-eval"))


def run_train(cfg: RunConfig, emit) -> dict:
    data = parse_data_spec(cfg.data)
    if isinstance(data, list):
        train, test = _glyph_sets(cfg, data)
    else:
        train, test = _splits(cfg, data, default_split=True)
    if cfg.checkpoint is not None:
        net, _ = _load_net(cfg.checkpoint, "classifier")
        _check_classifier(net, train.sample_shape, train.num_classes, cfg.checkpoint)
    else:
        try:
            net = build_model(cfg.model, train.sample_shape, train.num_classes, cfg.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    result = crown_ibp_train(net, train, cfg.train, val=test, on_epoch=emit)
    net = result.networks["classifier"]
    eps_c = cfg.train.eval_eps
    save_checkpoint(net, cfg.out / "classifier.ckpt", {"role": "classifier", "model": cfg.model,
                                                         "eps_a_c": eps_c, "recipe": "train"})
    return _final(cfg, _eval(cfg, net, test), eps_a_c=eps_c)


def _classifier_and_sets(cfg, default_split=True):
    data = parse_data_spec(cfg.data)
    if isinstance(data, list):
        train, test = _glyph_sets(cfg, data)
    else:
        train, test = _splits(cfg, data, default_split)
    net, meta = _load_net(cfg.checkpoint, "classifier")
    _check_classifier(net, train.sample_shape, train.num_classes, cfg.checkpoint)
    return net, meta, train, test


def run_a5o(cfg: RunConfig, emit) -> dict:
    net, meta, _, test = _classifier_and_sets(cfg)
    eps_ar, eps_d = cfg.train.eps_train, cfg.train.eps_d
    a = cfg.a5o
    robust, _ = a5o_robustify_dataset(net, test, eps_ar, DefenseSpec(eps_d), steps=int(a["steps"]),
                                      lr=float(a["lr"]), method=BoundMethod.parse(a["method"]))
    np.save(cfg.out / "robustified.npy", robust.x.numpy())
    metrics = _eval(cfg, net, robust)
    metrics["psnr_mean"] = mean_psnr(test.x, robust.x)
    return _final(cfg, metrics, meta.get("eps_a_c"), eps_ar, eps_d)


def _new_robustifier(cfg, shape):
    try:
        return build_model(cfg.robustifier_model, shape, 0, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def run_a5r(cfg: RunConfig, emit) -> dict:
    net, meta, train, test = _classifier_and_sets(cfg)
    rob = _load_net(cfg.robustifier, "robustifier")[0] if cfg.robustifier else _new_robustifier(cfg, train.sample_shape)
    result = a5r_train(net, rob, train, cfg.train, val=test, on_epoch=emit)
    rob = result.networks["robustifier"]
    t = cfg.train
    save_checkpoint(rob, cfg.out / "robustifier.ckpt", {"role": "robustifier", "eps_a_r": t.eps_train,
                                                         "eps_d": t.eps_d, "recipe": "a5r"})
    metrics = _eval(cfg, net, test, Robustifier(rob, DefenseSpec(t.eps_d)))
    return _final(cfg, metrics, meta.get("eps_a_c"), t.eps_train, t.eps_d)


def run_a5rc(cfg: RunConfig, emit) -> dict:
    net, meta, train, test = _classifier_and_sets(cfg)
    rob, _ = _load_net(cfg.robustifier, "robustifier")
    result = a5rc_cotrain(net, rob, train, cfg.train, augment=cfg.augment, val=test, on_epoch=emit)
    net, rob = result.networks["classifier"], result.networks["robustifier"]
    t = cfg.train
    save_checkpoint(net, cfg.out / "classifier.ckpt", {"role": "classifier", "eps_a_c": meta.get("eps_a_c"),
                                                       "recipe": "a5rc"})
    save_checkpoint(rob, cfg.out / "robustifier.ckpt", {"role": "robustifier", "eps_a_r": t.eps_train,
                                                         "eps_d": t.eps_d, "recipe": "a5rc"})
    metrics = _eval(cfg, net, test, Robustifier(rob, DefenseSpec(t.eps_d)))
    return _final(cfg, metrics, meta.get("eps_a_c"), t.eps_train, t.eps_d)


def _run_physical(cfg: RunConfig, emit, cotrain: bool) -> dict:
    protos = parse_data_spec(cfg.data)
    net, meta = _load_net(cfg.checkpoint, "classifier")
    m = max(p.label for p in protos) + 1
    _check_classifier(net, protos[0].w.shape, net.output_shape[0], cfg.checkpoint)
    if m > net.output_shape[0]:
        raise CheckpointError(f"{cfg.checkpoint}: {net.output_shape[0]} outputs for {m} glyph classes")
    recipe = a5pc_cotrain if cotrain else a5p_robustify
    result = recipe(protos, net, cfg.acquisition, cfg.physical)
    emit({"steps": len(result.loss_trace), "final_train_loss": result.loss_trace[-1] if result.loss_trace else None})
    write_glyph_set(cfg.out, result.prototypes, suffix="_rob")
    if cotrain:
        save_checkpoint(result.classifier, cfg.out / "classifier.ckpt",
                        {"role": "classifier", "eps_a_c": meta.get("eps_a_c"), "recipe": cfg.recipe})
    p = cfg.physical
    metrics = physical_evaluate(result.prototypes, result.classifier, cfg.acquisition, cfg.eval_eps,
                                int(cfg.glyphs["eval_per_prototype"]), Rng(cfg.seed).child("glyphs", "eval"),
                                cfg.attack_config(), cfg.eval_method, originals=protos)
    return _final(cfg, metrics, meta.get("eps_a_c"), p.eps_ar, p.eps_d)


def run_certify(cfg: RunConfig, emit, save_adversarial: bool = False) -> dict:
    net, meta, _, test = _classifier_and_sets(cfg, default_split=False)
    robustify, eps_d, eps_ar = None, None, None
    if cfg.robustifier is not None:
        rob, rmeta = _load_net(cfg.robustifier, "robustifier")
        eps_d = rmeta.get("eps_d", cfg.train.eps_d)
        eps_ar = rmeta.get("eps_a_r")
        robustify = Robustifier(rob, DefenseSpec(eps_d))
    metrics = _eval(cfg, net, test, robustify)
    if save_adversarial:
        x = robustify(test.x) if robustify is not None else test.x
        x_adv = pgd_attack(net, x.detach(), test.y, cfg.attack_config(), Rng(cfg.seed).child("adversarial"))
        np.save(cfg.out / "adversarial.npy", x_adv.numpy())
    return _final(cfg, metrics, meta.get("eps_a_c"), eps_ar, eps_d)


# -- report ------------------------------------------------------------------------------

def _cell(value):
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def emit_report(metrics_dir, out_path=None) -> dict:
    """Collect the final record of every ``*.jsonl`` under ``metrics_dir`` into a CSV.

    Rows are sorted by (recipe, eps_d), stably.  Malformed lines are skipped with a
    warning; an error-ordering violation raises :class:`ReportError`.
    """
    metrics_dir = Path(metrics_dir)
    out_path = Path(out_path) if out_path else metrics_dir / "report.csv"
    rows, warnings = [], []
    for path in sorted(metrics_dir.rglob("*.jsonl")):
        final = None
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise ValueError("not an object")
            except ValueError as exc:
                warnings.append(f"{path}:{lineno}: malformed metrics line skipped ({exc})")
                continue
            if record.get("final"):
                final = record
        if final is None:
            continue
        try:
            clean, cert = float(final["clean_err"]), float(final["cert_err"])
            pgd = final.get("pgd_err")
            recipe = str(final["recipe"])
        except (KeyError, TypeError, ValueError) as exc:
            warnings.append(f"{path}: final record lacks error rates ({exc}); skipped")
            continue
        if pgd is not None and not clean <= float(pgd) <= cert or pgd is None and not clean <= cert:
            raise ReportError(f"{path}: error ordering violated (clean {clean}, pgd {pgd}, certified {cert})")
        rows.append({**{c: final.get(c) for c in REPORT_COLUMNS}, "recipe": recipe})
    rows.sort(key=lambda r: (r["recipe"], -math.inf if r["eps_d"] is None else float(r["eps_d"])))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in REPORT_COLUMNS])
    out_path.write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    summary = {"rows": len(rows), "warnings": len(warnings), "messages": warnings}
    (out_path.parent / "report-summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                                          encoding="utf-8")
    for msg in warnings:
        log.warning(msg)
    return summary


# -- entry point ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config with schema_version")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--checkpoint", type=Path, help="classifier checkpoint")
    common.add_argument("--robustifier", type=Path, help="robustifier checkpoint")
    common.add_argument("--data", help="idx:<img>,<lbl> | synth:<kind>,<n>[,<M>[,<dim>]] | pgm:<dir>")
    common.add_argument("--eps", type=float, help="evaluation radius")
    common.add_argument("--eps-d", dest="eps_d", type=float, help="defense magnitude")
    common.add_argument("--eps-train", dest="eps_train", type=float, help="training radius")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="a5", description="Certified preemptive defenses.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in RECIPES:
        sub.add_parser(name, parents=[common])
    return parser


RUNNERS = {
    "train": run_train,
    "a5o": run_a5o,
    "a5r": run_a5r,
    "a5rc": run_a5rc,
    "a5p": lambda cfg, emit: _run_physical(cfg, emit, cotrain=False),
    "a5pc": lambda cfg, emit: _run_physical(cfg, emit, cotrain=True),
    "certify": run_certify,
    "attack": lambda cfg, emit: run_certify(cfg, emit, save_adversarial=True),
}


def run(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        cfg = build_run_config(args)
        cfg.out.mkdir(parents=True, exist_ok=True)
    except (ConfigError, OSError) as exc:
        print(f"a5: error: {exc}", file=sys.stderr)
        return 1
    try:
        if cfg.recipe == "report":
            summary = emit_report(cfg.out)
            print(f"a5: report with {summary['rows']} rows, {summary['warnings']} warnings", file=sys.stderr)
            return 0
        writer = MetricsWriter(cfg.out / "metrics.jsonl")
        final = RUNNERS[cfg.recipe](cfg, writer)
        writer(final)
    except (ConfigError, FormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"a5: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime or numeric failure
        log.debug("run failed", exc_info=True)
        print(f"a5: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
