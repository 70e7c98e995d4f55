"""Command-line entry points.

    consprompt split        K-shot split manifests
    consprompt train        grid search + test accuracy over seeds
    consprompt eval         accuracy of a saved checkpoint
    consprompt sweep-ratio  loss-weight ablation table (t = a)
    consprompt sweep-kshot  K ablation table for both sampling strategies
    consprompt report       rebuild every table from a run directory

Settings come from built-in defaults, then ``--config run.json``, then flags.
"""

from __future__ import annotations

import argparse
import functools
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from .backend import HashSentenceEncoder, ReferenceMaskedLM, Vocabulary, make_backend
from .contrastive import ContrastiveConfig
from .data import (
    DEFAULT_SEEDS,
    PAIR,
    SINGLE,
    Dataset,
    file_digest,
    load_tsv,
    make_kshot,
    manifest_bytes,
    split_from_manifest,
)
from .errors import ConfigError, ConsPromptError, DataError, NumericError
from .sampling import SamplingConfig
from .templates import load_template_set
from .trainer import ExperimentReport, Summary, TrainConfig, evaluate, expand_grid, run_experiment
from .verbalizer import Verbalizer, read_verbalizer

log = logging.getLogger("consprompt")

OUT_ENV = "CONSPROMPT_OUT_DIR"

TASKS = {
    "sst-2": SINGLE,
    "sst-5": SINGLE,
    "trec": SINGLE,
    "qnli": PAIR,
    "snli": PAIR,
    "toy": SINGLE,
}


@dataclass
class RunConfig:
    task: Optional[str] = None
    data_dir: Optional[str] = None
    train_file: str = "train.tsv"
    test_file: str = "test.tsv"
    task_kind: Optional[str] = None
    templates: Optional[str] = None
    verbalizer: Optional[str] = None
    k: int = 16
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    strategy: str = "sim"
    filtering_ratio: float = 0.5
    max_negatives: Optional[int] = None
    prompt_level_scope: str = "batch"
    temperature: float = 0.07
    t: float = 0.5
    a: float = 0.5
    denominator: str = "with_positive"
    pc_pairing: str = "symmetric"
    lr: list = field(default_factory=lambda: [0.3])
    bs: list = field(default_factory=lambda: [8])
    max_steps: int = 1000
    eval_every: int = 100
    train_seed: int = 42
    backend: str = "reference"
    backend_seed: int = 0
    hidden_size: int = 16
    encoder_dim: int = 32
    encoder_seed: int = 0
    out_dir: Optional[str] = None
    splits_dir: Optional[str] = None
    jobs: int = 1

    def resolved_task_kind(self) -> str:
        if self.task_kind:
            return self.task_kind
        if self.task in TASKS:
            return TASKS[self.task]
        return SINGLE

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.lr[0],
            batch_size=self.bs[0],
            max_steps=self.max_steps,
            eval_every=self.eval_every,
            seed=self.train_seed,
            loss=ContrastiveConfig(
                temperature=self.temperature,
                t=self.t,
                a=self.a,
                denominator=self.denominator,
                pc_pairing=self.pc_pairing,
            ),
            sampling=SamplingConfig(
                strategy=self.strategy,
                filtering_ratio=self.filtering_ratio,
                max_negatives=self.max_negatives,
                prompt_level_scope=self.prompt_level_scope,
            ),
        )

    def grid(self) -> list[TrainConfig]:
        return expand_grid(self.train_config(), self.lr, self.bs)


_CONFIG_FIELDS = {f.name for f in fields(RunConfig)}


def _csv(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad {kind.__name__} list: {text!r}") from None

    return parse


def _common(p: argparse.ArgumentParser, experiment: bool = True):
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--task", help=f"task preset ({', '.join(TASKS)})")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--train-file", dest="train_file")
    p.add_argument("--test-file", dest="test_file")
    p.add_argument("--task-kind", dest="task_kind", choices=[SINGLE, PAIR])
    p.add_argument("--k", type=int)
    p.add_argument("--seeds", type=_csv(int))
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    if not experiment:
        return
    p.add_argument("--splits-dir", dest="splits_dir", help="replay manifests written by 'split'")
    p.add_argument("--templates")
    p.add_argument("--verbalizer")
    p.add_argument("--strategy", choices=["sim", "label"])
    p.add_argument("--filtering-ratio", dest="filtering_ratio", type=float)
    p.add_argument("--max-negatives", dest="max_negatives", type=int)
    p.add_argument("--prompt-level-scope", dest="prompt_level_scope", choices=["batch", "query_only"])
    p.add_argument("--temperature", type=float)
    p.add_argument("--t", type=float)
    p.add_argument("--a", type=float)
    p.add_argument("--denominator", choices=["with_positive", "negatives_only"])
    p.add_argument("--pc-pairing", dest="pc_pairing", choices=["symmetric", "literal"])
    p.add_argument("--lr", type=_csv(float))
    p.add_argument("--bs", type=_csv(int))
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--train-seed", dest="train_seed", type=int)
    p.add_argument("--backend")
    p.add_argument("--backend-seed", dest="backend_seed", type=int)
    p.add_argument("--hidden-size", dest="hidden_size", type=int)
    p.add_argument("--jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="consprompt", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write K-shot split manifests")
    _common(p, experiment=False)

    p = sub.add_parser("train", help="train over seeds and the lr x bs grid")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="TSV to score (default: <data-dir>/<test-file>)")

    p = sub.add_parser("sweep-ratio", help="loss-weight ablation with t = a")
    _common(p)
    p.add_argument("--values", type=_csv(float), default=[0.1, 0.5, 1.0, 20.0])

    p = sub.add_parser("sweep-kshot", help="K ablation for both sampling strategies")
    _common(p)
    p.add_argument("--k-values", dest="k_values", type=_csv(int), default=[8, 16, 32, 64, 128, 160])

    p = sub.add_parser("report", help="rebuild tables from a run directory")
    p.add_argument("run_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(loaded) - _CONFIG_FIELDS
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(loaded)
    for name in _CONFIG_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    cfg = RunConfig(**values)
    if cfg.task is not None and cfg.task not in TASKS:
        raise ConfigError(f"unknown task {cfg.task!r} (known: {', '.join(TASKS)})")
    if cfg.data_dir is None:
        raise ConfigError("--data-dir is required")
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    if cfg.out_dir is None:
        cfg.out_dir = str(Path(os.environ.get(OUT_ENV, "runs")) / args.command)
    if cfg.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    return cfg


def _resource(kind: str, task: str) -> str:
    return str(resources.files("consprompt") / "resources" / kind / f"{task}.tsv")


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


@dataclass
class Workspace:
    """Everything loaded from disk for one resolved config."""

    cfg: RunConfig
    train: Dataset
    test: Optional[Dataset]
    templates: list = field(default_factory=list)
    verbalizer_map: dict = field(default_factory=dict)
    vocab: Optional[Vocabulary] = None

    @property
    def train_path(self) -> Path:
        return Path(self.cfg.data_dir) / self.cfg.train_file

    def backend_factory(self):
        return functools.partial(
            make_backend, self.cfg.backend, self.vocab, self.cfg.backend_seed, hidden_size=self.cfg.hidden_size
        )

    def verbalizer(self) -> Verbalizer:
        return Verbalizer.from_mapping(self.verbalizer_map, self.backend_factory()())

    def encoder(self) -> HashSentenceEncoder:
        return HashSentenceEncoder(self.cfg.encoder_dim, self.cfg.encoder_seed)


def load_workspace(cfg: RunConfig, need_prompts: bool = True) -> Workspace:
    data_dir = Path(cfg.data_dir)
    kind = cfg.resolved_task_kind()
    train = load_tsv(data_dir / cfg.train_file, kind)
    test_path = data_dir / cfg.test_file
    test = load_tsv(test_path, kind, train.label_set) if test_path.exists() else None
    ws = Workspace(cfg, train, test)
    if not need_prompts:
        return ws
    templates = cfg.templates or (_resource("templates", cfg.task) if cfg.task else None)
    verbalizer = cfg.verbalizer or (_resource("verbalizers", cfg.task) if cfg.task else None)
    if templates is None or verbalizer is None:
        raise ConfigError("give --task or both --templates and --verbalizer")
    ws.templates = load_template_set(templates)
    ws.verbalizer_map = read_verbalizer(verbalizer)
    missing = set(train.label_set) - set(ws.verbalizer_map)
    if missing:
        raise ConfigError(f"verbalizer has no word for labels {sorted(missing)}")
    for tpl in ws.templates:
        if tpl.n_inputs != (2 if kind == PAIR else 1):
            raise ConfigError(f"template {tpl.id!r} does not fit task kind {kind}")
    texts = [f for ex in train for f in ex.fields]
    if test is not None:
        texts += [f for ex in test for f in ex.fields]
    scaffold = []
    for tpl in ws.templates:
        scaffold += [p for i, p in enumerate(tpl.parts) if i % 2 == 0]
    ws.vocab = Vocabulary.from_texts(texts + scaffold, ws.verbalizer_map.values())
    return ws


def _seed_records(report: ExperimentReport, tag: dict) -> list[dict]:
    out = []
    for r in report.seeds:
        for cfg_row, metrics in zip(r.grid, r.runs):
            for s in metrics.steps:
                out.append({"kind": "step", **tag, "seed": r.seed, **_grid_key(cfg_row), **asdict(s)})
            for e in metrics.evals:
                out.append({"kind": "eval", **tag, "seed": r.seed, **_grid_key(cfg_row), **e})
            out.append({"kind": "grid_point", **tag, "seed": r.seed, **cfg_row})
        out.append(
            {
                "kind": "seed_result",
                **tag,
                "seed": r.seed,
                "k": report.k,
                "learning_rate": r.learning_rate,
                "batch_size": r.batch_size,
                "dev_accuracy": r.dev_accuracy,
                "test_accuracy": r.test_accuracy,
            }
        )
    return out


def _grid_key(row: dict) -> dict:
    return {"learning_rate": row["learning_rate"], "batch_size": row["batch_size"]}


def _run_one(ws: Workspace, cfg: RunConfig, run_dir: Path, tag: dict) -> ExperimentReport:
    """Train over all seeds into ``run_dir``: config, splits, metrics, checkpoints, report."""
    digest = file_digest(ws.train_path)
    splits = {}
    for seed in cfg.seeds:
        split = _load_or_make_split(ws, cfg, seed, digest)
        _atomic_write(
            run_dir / "splits" / f"k{cfg.k}-seed{seed}.json",
            manifest_bytes(split.manifest(str(ws.train_path), digest)),
        )
        splits[seed] = split
    _write_json(run_dir / "config.json", asdict(cfg))
    verbalizer = ws.verbalizer()
    report = run_experiment(
        ws.train,
        cfg.k,
        cfg.seeds,
        cfg.grid(),
        ws.templates,
        verbalizer,
        ws.encoder(),
        ws.backend_factory(),
        ws.test,
        jobs=cfg.jobs,
        splits=splits,
    )
    records = _seed_records(report, tag)
    _atomic_write(
        run_dir / "metrics.jsonl",
        "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode("utf-8"),
    )
    if cfg.backend == "reference":
        for r in report.seeds:
            model = ws.backend_factory()()
            model.load_state_dict(r.state)
            (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            model.save(run_dir / "checkpoints" / f"seed{r.seed}.pt")
    summary = {**tag, **report.to_dict()}
    _write_json(run_dir / "report.json", summary)
    for r in report.seeds:
        log.info(
            "%s seed %d: lr=%g bs=%d dev=%.4f test=%s skipped anchors bc=%d pc=%d",
            run_dir.name,
            r.seed,
            r.learning_rate,
            r.batch_size,
            r.dev_accuracy,
            r.test_accuracy,
            sum(g["skipped_bc"] for g in r.grid),
            sum(g["skipped_pc"] for g in r.grid),
        )
    return report


def _load_or_make_split(ws: Workspace, cfg: RunConfig, seed: int, digest: str):
    if cfg.splits_dir is None:
        return make_kshot(ws.train, cfg.k, seed, ws.test)
    path = Path(cfg.splits_dir) / f"k{cfg.k}-seed{seed}.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read split manifest {path}: {exc}") from None
    if manifest.get("source_sha256") not in ("", digest):
        raise DataError(f"{path} was made from a different {cfg.train_file}")
    return split_from_manifest(ws.train, manifest, ws.test)


def _require_test(ws: Workspace):
    if ws.test is None:
        raise ConfigError(f"no test file {ws.cfg.test_file} in {ws.cfg.data_dir}")


def cmd_split(cfg: RunConfig) -> list[Path]:
    ws = load_workspace(cfg, need_prompts=False)
    digest = file_digest(ws.train_path)
    written = []
    for seed in cfg.seeds:
        split = make_kshot(ws.train, cfg.k, seed)
        path = Path(cfg.out_dir) / f"k{cfg.k}-seed{seed}.json"
        _atomic_write(path, manifest_bytes(split.manifest(str(ws.train_path), digest)))
        written.append(path)
    return written


def cmd_train(cfg: RunConfig) -> ExperimentReport:
    ws = load_workspace(cfg)
    _require_test(ws)
    out = Path(cfg.out_dir)
    report = _run_one(ws, cfg, out, {"sweep": "train"})
    tables = {"train": render_train_table([report.to_dict()])}
    _atomic_write(out / "report.txt", tables["train"].encode("utf-8"))
    return report


def cmd_eval(cfg: RunConfig, checkpoint: str, data: Optional[str]) -> float:
    ws = load_workspace(cfg)
    model = ReferenceMaskedLM.load(checkpoint)
    dataset = (
        load_tsv(data, cfg.resolved_task_kind(), ws.train.label_set) if data else ws.test
    )
    if dataset is None:
        raise ConfigError("nothing to evaluate: pass --data or provide a test file")
    verbalizer = Verbalizer.from_mapping(ws.verbalizer_map, model)
    acc = evaluate(model, dataset, ws.templates[0], verbalizer)
    _write_json(Path(cfg.out_dir) / "eval.json", {"checkpoint": checkpoint, "accuracy": acc, "n": len(dataset)})
    return acc


def _fmt_value(v: float) -> str:
    return f"{v:g}"


def cmd_sweep_ratio(cfg: RunConfig, values) -> str:
    ws = load_workspace(cfg)
    _require_test(ws)
    out = Path(cfg.out_dir)
    for v in values:
        run_cfg = replace(cfg, t=v, a=v)
        _run_one(ws, run_cfg, out / f"ratio-{_fmt_value(v)}", {"sweep": "ratio", "value": v})
    _write_json(out / "sweep.json", {"sweep": "ratio", "values": list(values), "config": asdict(cfg)})
    return rebuild_reports(out)["ratio"]


def cmd_sweep_kshot(cfg: RunConfig, k_values) -> str:
    ws = load_workspace(cfg)
    _require_test(ws)
    top = max(k_values)
    short = {lab: n for lab, n in _label_counts(ws.train).items() if n < 2 * top}
    if short:
        lab, n = sorted(short.items())[0]
        failing = [k for k in k_values if 2 * k > n]
        raise DataError(
            f"k={min(failing)} needs {2 * min(failing)} examples per label; label {lab!r} has {n}"
        )
    out = Path(cfg.out_dir)
    for k in k_values:
        for strategy in ("sim", "label"):
            run_cfg = replace(cfg, k=k, strategy=strategy)
            _run_one(ws, run_cfg, out / f"k{k}-{strategy}", {"sweep": "kshot", "k": k, "strategy": strategy})
    _write_json(out / "sweep.json", {"sweep": "kshot", "k_values": list(k_values), "config": asdict(cfg)})
    return rebuild_reports(out)["kshot"]


def _label_counts(ds: Dataset) -> dict:
    counts = {lab: 0 for lab in ds.label_set}
    for ex in ds:
        counts[ex.label] += 1
    return counts


# ---------------------------------------------------------------- reports


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths)).rstrip()
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), sep, *map(line, rows)]) + "\n"


def _pct(x: float) -> str:
    return f"{100 * x:.1f}"


def render_train_table(reports: list[dict]) -> str:
    rows = [[str(r["k"]), r["cell"], _pct(r["median"])] for r in reports]
    return _table(["K", "Acc (+std)", "Median"], rows)


def ratio_rows(results: dict) -> list[dict]:
    rows = []
    for value in sorted(results):
        s = Summary.of(results[value])
        rows.append({"t,a": value, "average": s.mean, "std": s.std, "median": s.median, "n_seeds": len(s.values), "accuracies": list(s.values)})
    return rows


def render_ratio_table(rows: list[dict]) -> str:
    body = [[_fmt_value(r["t,a"]), _pct(r["average"]), _pct(r["std"]), _pct(r["median"])] for r in rows]
    return _table(["t,a", "Average (acc.)", "Variance (+std)", "Median (acc.)"], body)


def kshot_rows(results: dict) -> list[dict]:
    rows = []
    for k in sorted({k for k, _ in results}):
        row = {"k": k}
        for strategy in ("sim", "label"):
            accs = results.get((k, strategy))
            if accs:
                s = Summary.of(accs)
                row[strategy] = {"mean": s.mean, "std": s.std, "median": s.median, "accuracies": list(s.values)}
        rows.append(row)
    return rows


def render_kshot_table(rows: list[dict]) -> str:
    body = []
    for r in rows:
        cells = [str(r["k"])]
        for strategy in ("sim", "label"):
            s = r.get(strategy)
            cells += [f"{_pct(s['mean'])} ({_pct(s['std'])})", _pct(s["median"])] if s else ["-", "-"]
        body.append(cells)
    return _table(
        ["K-shot", "Sim-based Acc(+std)", "Sim-based Median", "Label-based Acc(+std)", "Label-based Median"],
        body,
    )


def _seed_results(run_dir: Path) -> list[dict]:
    path = run_dir / "metrics.jsonl"
    if not path.exists():
        return []
    with path.open(encoding="utf-8") as fh:
        return [r for r in map(json.loads, fh) if r.get("kind") == "seed_result"]


def rebuild_reports(root) -> dict:
    """Recompute every table under ``root`` from the metrics files alone."""
    root = Path(root)
    ratio, kshot, train = {}, {}, []
    for metrics in sorted(root.rglob("metrics.jsonl")):
        records = _seed_results(metrics.parent)
        for rec in records:
            if rec.get("sweep") == "ratio":
                ratio.setdefault(rec["value"], []).append(rec["test_accuracy"])
            elif rec.get("sweep") == "kshot":
                kshot.setdefault((rec["k"], rec["strategy"]), []).append(rec["test_accuracy"])
        if records and records[0].get("sweep") == "train":
            s = Summary.of([r["test_accuracy"] for r in records])
            train.append({"k": records[0]["k"], "cell": s.cell(), "median": s.median, "mean": s.mean, "std": s.std})
    tables = {}
    if ratio:
        rows = ratio_rows(ratio)
        tables["ratio"] = render_ratio_table(rows)
        _write_json(root / "table_ratio.json", rows)
        _atomic_write(root / "table_ratio.txt", tables["ratio"].encode("utf-8"))
    if kshot:
        rows = kshot_rows(kshot)
        tables["kshot"] = render_kshot_table(rows)
        _write_json(root / "table_kshot.json", rows)
        _atomic_write(root / "table_kshot.txt", tables["kshot"].encode("utf-8"))
    if train:
        tables["train"] = render_train_table(train)
    return tables


# ---------------------------------------------------------------- main


def _dump_diagnostics(cfg: Optional[RunConfig], exc: NumericError):
    if cfg is None or not exc.diagnostics:
        return
    path = Path(cfg.out_dir) / "numeric_failure.json"
    _write_json(path, exc.diagnostics)
    print(f"diagnostics written to {path}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    cfg = None
    try:
        if args.command == "report":
            tables = rebuild_reports(args.run_dir)
            if not tables:
                raise ConfigError(f"no run metrics found under {args.run_dir}")
            for name, text in tables.items():
                print(f"[{name}]\n{text}")
            return 0
        cfg = resolve_config(args)
        if args.command == "split":
            for path in cmd_split(cfg):
                print(path)
        elif args.command == "train":
            report = cmd_train(cfg)
            print(render_train_table([report.to_dict()]), end="")
        elif args.command == "eval":
            print(f"accuracy {cmd_eval(cfg, args.checkpoint, args.data):.4f}")
        elif args.command == "sweep-ratio":
            print(cmd_sweep_ratio(cfg, args.values), end="")
        elif args.command == "sweep-kshot":
            print(cmd_sweep_kshot(cfg, args.k_values), end="")
    except NumericError as exc:
        _dump_diagnostics(cfg, exc)
        print(f"consprompt: numeric failure: {exc}", file=sys.stderr)
        return exc.exit_code
    except ConsPromptError as exc:
        print(f"consprompt: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, TypeError) as exc:
        print(f"consprompt: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
