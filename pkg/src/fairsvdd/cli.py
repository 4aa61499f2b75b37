"""Command-line entry point: ``fairsvdd {synth,train,evaluate,sweep,overlap}``.

Settings resolve in three layers: built-in defaults, then a JSON file given
with ``--config``, then explicit flags.  Exit codes: 0 success, 2 bad
configuration, 3 bad data, 4 numerical failure during training.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import DataError, Dataset, Scaler, SynthSpec, balance_by_psv, load_csv, standardize, synth_biased, write_csv
from .fair import export_trace, load_fair, svdd_trace, train_fair_svdd
from .metrics import FairnessReport, TieError, evaluate, overlap_ratio, threshold_from_count
from .nn import dump_json, load_checkpoint
from .svdd import NumericalError, SvddModel, TrainConfig, export_embeddings, export_scores, load_svdd, train_svdd

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SWEEP_COLUMNS = ["lambda", "p_rule", "wasserstein", "auc"]
DEFAULT_LAMBDAS = [0.01, 0.1, 1.0, 10.0, 100.0]


class ConfigError(ValueError):
    pass


def _sub_dict(obj) -> dict:
    d = asdict(obj)
    d.pop("seed")  # the run-level seed drives every stream
    return d


@dataclass
class RunConfig:
    """Everything a command may need; unused fields are ignored by a command.

    ``synth`` and ``training`` hold :class:`SynthSpec` and
    :class:`TrainConfig` fields (minus ``seed``, which lives at top level).
    """

    seed: int = 0
    out_dir: str = "run"
    train_csv: str | None = None
    test_csv: str | None = None
    checkpoint: str | None = None
    checkpoint_b: str | None = None
    psv_col: str = "psv"
    label_col: str | None = "label"
    fair: bool = True
    balanced: bool = False
    k_anomalies: int | None = None
    threshold: float | None = None
    lambdas: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    synth: dict = field(default_factory=lambda: _sub_dict(SynthSpec()))
    training: dict = field(default_factory=lambda: _sub_dict(TrainConfig()))

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(**self.synth, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.training, seed=self.seed)

    def validate(self) -> None:
        try:
            self.synth_spec().validate()
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not self.lambdas or any(l < 0 for l in self.lambdas):
            raise ConfigError("lambdas must be a nonempty list of non-negative reals")
        if self.k_anomalies is not None and self.k_anomalies < 0:
            raise ConfigError("k_anomalies must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        _reject_unknown(d, known, "config")
        base = cls()
        synth = dict(base.synth)
        training = dict(base.training)
        _reject_unknown(d.get("synth", {}), set(synth), "synth")
        _reject_unknown(d.get("training", {}), set(training), "training")
        synth.update(d.get("synth", {}))
        training.update(d.get("training", {}))
        cfg = cls(**{**d, "synth": synth, "training": training})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)


def _reject_unknown(d: dict, known: set, where: str) -> None:
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


# -- pipeline pieces shared by the commands ------------------------------------


def _need(value, flag: str):
    if value is None:
        raise ConfigError(f"missing required setting {flag}")
    return value


def _load(path: str, cfg: RunConfig, labels: bool = True) -> Dataset:
    return load_csv(path, cfg.psv_col, cfg.label_col if labels else None)


def _train_labels(cfg: RunConfig) -> bool:
    # training data may lack a label column; use it only if present
    with open(_need(cfg.train_csv, "--train"), encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().split(",")]
    return cfg.label_col is not None and cfg.label_col in header


def fit_model(train: Dataset, cfg: RunConfig, lam: float | None = None):
    """Standardize, optionally balance, and train; returns ``(model, trace, scaler)``."""
    tc = cfg.train_config()
    if lam is not None:
        tc = TrainConfig.from_dict({**tc.to_dict(), "lambda_fair": lam})
    if cfg.balanced:
        train = balance_by_psv(train, cfg.seed)
    (train,), scaler = standardize(train)
    if cfg.fair:
        model = train_fair_svdd(train, tc)
        return model, model.trace, scaler
    # plain SVDD gets the same number of encoder epochs as the fair schedule
    model = train_svdd_budget(train, tc)
    return model, svdd_trace(model.history), scaler


def train_svdd_budget(train: Dataset, tc: TrainConfig) -> SvddModel:
    return train_svdd(train, tc, epochs=tc.pretrain_epochs + tc.adversarial_epochs)


def load_model(path: str) -> tuple[SvddModel, Scaler | None]:
    try:
        _, meta = load_checkpoint(path)
        model = load_fair(path).svdd if meta.get("kind") == "fair" else load_svdd(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})") from None
    scaler = Scaler.from_dict(meta["scaler"]) if "scaler" in meta else None
    return model, scaler


def score_dataset(model: SvddModel, scaler: Scaler | None, data: Dataset) -> tuple[np.ndarray, Dataset]:
    scaled = scaler.transform(data) if scaler is not None else data
    return model.score(scaled), scaled


def report_for(scores: np.ndarray, data: Dataset, cfg: RunConfig) -> FairnessReport:
    if cfg.threshold is None and cfg.k_anomalies is None and data.labels is None:
        raise DataError("test data has no labels; pass --k-anomalies or --threshold")
    return evaluate(scores, data.psv, data.labels, k=cfg.k_anomalies, t=cfg.threshold)


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


# -- commands --------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> int:
    train, test = synth_biased(cfg.synth_spec())
    if cfg.balanced:
        train = balance_by_psv(train, cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(train, out / "train.csv", cfg.psv_col, cfg.label_col or "label")
    write_csv(test, out / "test.csv", cfg.psv_col, cfg.label_col or "label")
    for name, ds in (("train", train), ("test", test)):
        n0, n1 = ds.group_counts()
        print(f"{name}: {len(ds)} rows, psv=0: {n0}, psv=1: {n1}, abnormal: {int(ds.labels.sum())}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    train = _load(cfg.train_csv, cfg, labels=_train_labels(cfg))
    model, trace, scaler = fit_model(train, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json", {"scaler": scaler.to_dict()})
    export_trace(trace, out / "trace.csv")
    last = trace[-1] if trace else None
    kind = "fair" if cfg.fair else "plain"
    if last is None:
        print(f"{kind} model trained for 0 epochs")
    else:
        parts = [f"{k}={getattr(last, k):.6g}" for k in ("l_svdd", "l_d", "l_adv") if getattr(last, k) is not None]
        print(f"{kind} model, final {last.phase} epoch {last.epoch}: " + " ".join(parts))
    print(f"wrote {out / 'model.json'} and {out / 'trace.csv'}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    model, scaler = load_model(_need(cfg.checkpoint, "--checkpoint"))
    test = _load(_need(cfg.test_csv, "--test"), cfg)
    scores, scaled = score_dataset(model, scaler, test)
    report = report_for(scores, test, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    export_scores(scores, test, out / "scores.csv")
    export_embeddings(model, scaled, out / "embeddings.csv")
    print(report.summary())
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    if not cfg.fair:
        raise ConfigError("sweep trains fair models; drop --fair=false")
    train = _load(_need(cfg.train_csv, "--train"), cfg, labels=_train_labels(cfg))
    test = _load(_need(cfg.test_csv, "--test"), cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    try:
        for lam in cfg.lambdas:
            model, trace, scaler = fit_model(train, cfg, lam)
            run_dir = out / f"lambda_{lam:g}"
            run_dir.mkdir(exist_ok=True)
            model.save(run_dir / "model.json", {"scaler": scaler.to_dict()})
            export_trace(trace, run_dir / "trace.csv")
            scores, _ = score_dataset(model.svdd, scaler, test)
            rep = report_for(scores, test, cfg)
            rep.save(run_dir / "report.json")
            rows.append([lam, rep.p_rule, rep.wasserstein, rep.auc])
            print(f"lambda={lam:g}  p_rule={rep.p_rule:.4f}  W={rep.wasserstein:.6g}  auc={_fmt(rep.auc) or 'n/a'}")
    except Exception:
        _write_sweep(out / "sweep_incomplete.csv", rows)
        print(f"sweep aborted after {len(rows)} of {len(cfg.lambdas)} runs; partial table in "
              f"{out / 'sweep_incomplete.csv'}", file=sys.stderr)
        raise
    _write_sweep(out / "sweep.csv", rows)
    print(f"wrote {out / 'sweep.csv'}")
    return EXIT_OK


def _write_sweep(path: Path, rows: list) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for lam, p, wd, a in rows:
            w.writerow([repr(float(lam)), repr(float(p)), repr(float(wd)), _fmt(a)])


def cmd_overlap(cfg: RunConfig) -> int:
    test = _load(_need(cfg.test_csv, "--test"), cfg)
    k = cfg.k_anomalies
    if k is None:
        if test.labels is None:
            raise DataError("test data has no labels; pass --k-anomalies")
        k = int(test.labels.sum())
    rows = []
    flagged = []
    paths = (_need(cfg.checkpoint, "--checkpoint"), _need(cfg.checkpoint_b, "--checkpoint-b"))
    for label, path in zip("AB", paths):
        model, scaler = load_model(path)
        scores, _ = score_dataset(model, scaler, test)
        pos = scores > threshold_from_count(scores, k)
        flagged.append(scores)
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        rows.append({"model": label, "checkpoint_sha256": digest,
                     "z0": int(np.sum(pos & (test.psv == 0))), "z1": int(np.sum(pos & (test.psv == 1)))})
        print(f"{label}: {path}")
    ratio = overlap_ratio(flagged[0], flagged[1], k)
    print("model  anomalies (Z0:Z1)")
    for r in rows:
        print(f"{r['model']:<5}  {r['z0']}:{r['z1']}")
    print(f"overlap ratio  {ratio:.4f}  (k={k})")
    # hashes rather than paths keep the report identical wherever the files live
    report = {"k": k, "overlap_ratio": ratio, "models": rows}
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(report, out / "overlap.json")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
            "overlap": cmd_overlap}


# -- argument parsing --------------------------------------------------------------


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated reals, got {text!r}") from None


# flag -> (RunConfig path, type); a path "training.x" targets the nested dict
FLAGS = {
    "--seed": ("seed", int),
    "--out-dir": ("out_dir", str),
    "--train": ("train_csv", str),
    "--test": ("test_csv", str),
    "--checkpoint": ("checkpoint", str),
    "--checkpoint-b": ("checkpoint_b", str),
    "--psv-col": ("psv_col", str),
    "--label-col": ("label_col", str),
    "--k-anomalies": ("k_anomalies", int),
    "--threshold": ("threshold", float),
    "--lambdas": ("lambdas", _floats),
    "--lambda": ("training.lambda_fair", float),
    "--pretrain-epochs": ("training.pretrain_epochs", int),
    "--adv-epochs": ("training.adversarial_epochs", int),
    "--batch-size": ("training.batch_size", int),
    "--lr": ("training.learning_rate", float),
    "--weight-decay": ("training.weight_decay", float),
    "--n-per-group": ("synth.n_per_group", int),
    "--bias-strength": ("synth.bias_strength", float),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairsvdd", description="Deep SVDD and Deep Fair SVDD anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        for flag, (dest, typ) in FLAGS.items():
            p.add_argument(flag, dest=dest.replace(".", "__"), type=typ, default=None)
        p.add_argument("--fair", type=_bool, nargs="?", const=True, default=None)
        p.add_argument("--balanced", type=_bool, nargs="?", const=True, default=None)
        p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    d = cfg.to_dict()
    for dest, _ in [*FLAGS.values(), ("fair", None), ("balanced", None)]:
        value = getattr(args, dest.replace(".", "__"))
        if value is None:
            continue
        if "." in dest:
            group, key = dest.split(".")
            d[group][key] = value
        else:
            d[dest] = value
    return RunConfig.from_dict(d)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            print(cfg.to_json())
            return EXIT_OK
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TieError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
