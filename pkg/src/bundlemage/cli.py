"""Command-line interface: prepare, train, eval, generate, analyze.

Exit codes: 0 on success, 1 on data/protocol/training errors, 2 on usage
errors (argparse). Every option can also come from ``--config FILE`` holding
``key = value`` lines; explicit flags win over the file, which wins over
defaults.
"""

import argparse
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import analysis
from .data import load_dataset, load_split, make_split, save_split
from .errors import BundleMageError, ConfigError, UnknownIdError
from .eval import DEFAULT_KS, ModelScorer, PopScorer, RandomScorer, evaluate_generation, evaluate_matching
from .model import VARIANTS, load_checkpoint
from .numerics import log_softmax
from .training import TrainConfig, save_training_checkpoint, train

log = logging.getLogger("bundlemage")


@dataclass
class RunConfig:
    # inputs and outputs
    ui: str = None
    ub: str = None
    bi: str = None
    data: str = None
    out: str = None
    ckpt: str = None
    log: str = None
    dataset_name: str = "steam"
    # split
    holdout_frac: float = 0.1
    n_pos: int = None
    n_neg: int = None
    n_matching_neg: int = 99
    # model and training
    d: int = 200
    dropout: float = 0.3
    variant: str = "full"
    activation: str = "relu"
    lr: float = 0.001
    weight_decay: float = 0.00001
    rho: float = 0.5
    psi: float = 0.5
    max_epochs: int = 200
    batch_size_users: int = 256
    batch_size_pairs: int = 1024
    seed: int = 0
    stop_grad_zu: bool = False
    fixed_masks: bool = False
    timing: bool = True
    # evaluation
    task: str = "matching"
    baseline: str = None
    k: str = "5,10,20"
    split: str = "test"
    recall_mode: str = "min"
    # generation / analysis
    user: str = None
    items: str = None
    topk: int = 10
    report: str = "popularity"
    threads: int = 1

    def train_config(self):
        keys = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in keys})

    def ks(self):
        try:
            ks = tuple(int(x) for x in self.k.split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"bad --k value {self.k!r}") from None
        if not ks or min(ks) < 1:
            raise ConfigError(f"bad --k value {self.k!r}")
        return ks

    def dump(self):
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


_TYPES = {f.name: type(f.default) if f.default is not None else None for f in fields(RunConfig)}
_TYPES.update(n_pos=int, n_neg=int)


def _format(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key, text):
    kind = _TYPES.get(key)
    text = text.strip()
    if text == "" and RunConfig.__dataclass_fields__[key].default is None:
        return None
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None
    return text


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return values


def build_run_config(file_values, flag_values):
    cfg = RunConfig()
    for source in (file_values, flag_values):
        for k, v in source.items():
            setattr(cfg, k, v)
    cfg.variant = cfg.variant.replace("-", "_")
    return cfg


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _bool(text):
    return _coerce("timing", text)


def _common(p):
    p.add_argument("--config", dest="config_file", metavar="FILE", help="key = value defaults file")
    p.add_argument("--dump-config", action="store_true", dest="dump_config", help="print the merged config and exit")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="BLAS thread cap (default 1, bit-deterministic)")
    p.add_argument("-v", "--verbose", action="count", dest="verbosity", default=0)


def _hyper(p):
    p.add_argument("--variant", choices=sorted(set(VARIANTS) | {v.replace("_", "-") for v in VARIANTS}))
    p.add_argument("--d", "--dim", dest="d", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--activation", choices=["relu", "tanh", "identity"])
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--psi", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size-users", type=int)
    p.add_argument("--batch-size-pairs", type=int)
    p.add_argument("--stop-grad-zu", type=_bool, metavar="BOOL")
    p.add_argument("--fixed-masks", type=_bool, metavar="BOOL")
    p.add_argument("--timing", type=_bool, metavar="BOOL", help="record wall time in the log (false writes 0)")
    p.add_argument("--no-timing", action="store_false", dest="timing")


def make_parser():
    parser = argparse.ArgumentParser(prog="bundlemage", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("prepare", help="ingest TSV files and write a split directory", argument_default=S)
    p.add_argument("--ui", help="user-item pairs")
    p.add_argument("--ub", help="user-bundle pairs")
    p.add_argument("--bi", help="bundle-item pairs")
    p.add_argument("--out", help="split directory to write")
    p.add_argument("--dataset-name")
    p.add_argument("--holdout-frac", type=float)
    p.add_argument("--n-pos", type=int)
    p.add_argument("--n-neg", type=int)
    p.add_argument("--n-matching-neg", type=int, help="frozen matching negatives per pair (default 99)")
    _common(p)

    p = sub.add_parser("train", help="train a model on a split directory", argument_default=S)
    p.add_argument("--data", help="split directory")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--log", help="training log CSV (default: train_log.csv next to the checkpoint)")
    _hyper(p)
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint or baseline", argument_default=S)
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--task", choices=["matching", "generation"])
    p.add_argument("--baseline", choices=["pop", "random"])
    p.add_argument("--k")
    p.add_argument("--split", choices=["val", "test"], help="matching held-out set")
    p.add_argument("--recall-mode", choices=["min", "n"])
    p.add_argument("--out", help="metrics CSV path")
    _common(p)

    p = sub.add_parser("generate", help="complete a partial bundle for a user", argument_default=S)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--user")
    p.add_argument("--items", help="comma-separated item ids of the incomplete bundle")
    p.add_argument("--topk", type=int)
    _common(p)

    p = sub.add_parser("analyze", help="dataset similarity / popularity reports", argument_default=S)
    p.add_argument("--data")
    p.add_argument("--report", choices=["similarity", "popularity"])
    p.add_argument("--out", help="also write the CSV here")
    _common(p)
    return parser


REQUIRED = {
    "prepare": ("ui", "ub", "bi", "out"),
    "train": ("data", "out"),
    "eval": ("data",),
    "generate": ("ckpt", "data", "user", "items"),
    "analyze": ("data",),
}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_prepare(cfg):
    dataset = load_dataset(cfg.ui, cfg.ub, cfg.bi, name=cfg.dataset_name)
    split = make_split(
        dataset, cfg.seed, holdout_frac=cfg.holdout_frac, n_pos=cfg.n_pos, n_neg=cfg.n_neg, n_matching_neg=cfg.n_matching_neg
    )
    out = save_split(cfg.out, dataset, split)
    sys.stdout.write((out / "summary.txt").read_text(encoding="utf-8"))
    return 0


def _checkpoint_model(cfg, dataset):
    model, header, _ = load_checkpoint(cfg.ckpt)
    if model.n_items != dataset.n_items or model.n_bundles != dataset.n_bundles:
        raise ConfigError(
            f"checkpoint dimensions (items={model.n_items}, bundles={model.n_bundles}) do not match "
            f"dataset (items={dataset.n_items}, bundles={dataset.n_bundles})"
        )
    return model, header


def cmd_train(cfg):
    dataset, split = load_split(cfg.data)
    tc = cfg.train_config()
    ckpt = Path(cfg.out)
    log_path = Path(cfg.log) if cfg.log else ckpt.parent / "train_log.csv"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    result = train(dataset, split, tc, log_path=log_path, timing=cfg.timing)
    save_training_checkpoint(ckpt, result, tc)
    print(f"best epoch {result.state.best_epoch}: val nDCG@5 = {result.state.best_val_ndcg5:.4f}")
    print(f"checkpoint: {ckpt}")
    print(f"log: {log_path}")
    return 0


def cmd_eval(cfg):
    dataset, split = load_split(cfg.data)
    if cfg.baseline == "pop":
        scorer = PopScorer.from_split(dataset, split)
    elif cfg.baseline == "random":
        scorer = RandomScorer(cfg.seed)
    else:
        if not cfg.ckpt:
            raise ConfigError("eval needs --ckpt or --baseline")
        model, _ = _checkpoint_model(cfg, dataset)
        scorer = ModelScorer(model, dataset, split)
    ks = cfg.ks()
    if cfg.task == "matching":
        report = evaluate_matching(scorer, split, ks=ks, which=cfg.split, recall_mode=cfg.recall_mode)
    else:
        report = evaluate_generation(scorer, split, ks=ks, recall_mode=cfg.recall_mode)
    text = report.to_csv()
    sys.stdout.write(text)
    if cfg.out:
        out = Path(cfg.out)
    elif cfg.ckpt and not cfg.baseline:
        out = Path(f"{cfg.ckpt}.{cfg.task}.csv")
    else:
        out = Path(f"metrics_{cfg.task}_{scorer.name}.csv")
    out.write_text(text, encoding="utf-8")
    return 0


def cmd_generate(cfg):
    dataset, split = load_split(cfg.data)
    model, _ = _checkpoint_model(cfg, dataset)
    if cfg.user not in dataset.users:
        raise UnknownIdError("user", [cfg.user])
    tokens = [t.strip() for t in cfg.items.split(",") if t.strip()]
    unknown = [t for t in tokens if t not in dataset.items]
    if unknown:
        raise UnknownIdError("item", unknown)
    given = np.unique([dataset.items[t] for t in tokens])
    if len(given) == 0:
        raise ConfigError("--items must name at least one item")
    if len(given) >= dataset.n_items:
        raise ConfigError("the given items already cover every item; nothing to complete")
    scorer = ModelScorer(model, dataset, split)
    logits = scorer.generation_logits([dataset.users[cfg.user]], [given])[0]
    probs = np.exp(log_softmax(logits))
    probs[given] = -1.0
    topk = max(0, min(cfg.topk, dataset.n_items - len(given)))
    order = np.argsort(-probs, kind="stable")[:topk]
    print("rank\titem_id\tprobability")
    for rank, i in enumerate(order, start=1):
        print(f"{rank}\t{dataset.items.to_external[i]}\t{probs[i]:.6g}")
    return 0


def cmd_analyze(cfg):
    dataset, _ = load_split(cfg.data)
    if cfg.report == "similarity":
        text = analysis.similarity_csv(analysis.preference_similarity(dataset), dataset)
    else:
        text = analysis.popularity_csv(dataset)
    sys.stdout.write(text)
    if cfg.out:
        Path(cfg.out).write_text(text, encoding="utf-8")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "analyze": cmd_analyze,
}


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    ns = vars(args)
    command = ns.pop("command")
    config_file = ns.pop("config_file", None)
    dump = ns.pop("dump_config", False)
    verbosity = ns.pop("verbosity", 0)
    logging.basicConfig(
        level=logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        file_values = {}
        if config_file:
            file_values = parse_config_text(Path(config_file).read_text(encoding="utf-8"), config_file)
        cfg = build_run_config(file_values, ns)
    except (ConfigError, OSError) as exc:
        parser.error(str(exc))
    if dump:
        sys.stdout.write(cfg.dump())
        return 0
    missing = [k for k in REQUIRED[command] if getattr(cfg, k) in (None, "")]
    if missing:
        parser.error(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))

    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=max(1, cfg.threads)):
            return COMMANDS[command](cfg)
    except BundleMageError as exc:
        print(f"bundlemage {command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"bundlemage {command}: error: {exc}", file=sys.stderr)
        return 1


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
