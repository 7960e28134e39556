"""Command-line entry point: ``scalpel <command> [options]``.

Every command writes a ``*.manifest.json`` next to its output. Failures print
one line ``error: <category>: <message>`` to stderr and exit with the
category's status (2 config, 3 data, 4 training, 5 invariant/internal).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import svg
from . import tensor as T
from .analysis import cluster_report, layer_importance, mds_embed, task_similarity
from .baselines import EPS_GRID, METHODS, TOP_K, compare, compare_csv
from .data import CATEGORIES, KINDS, generate_general_corpus, generate_task, read_dataset, read_general, write_dataset, write_general
from .errors import ConfigError, InputError, ScalpelError
from .lora import load_adapters, save_adapters
from .metrics import MetricReport, evaluate
from .model import ModelConfig, load_model, save_model
from .train import PretrainConfig, TrainConfig, ablate, build_tokenizer, pretrain, sweep, sweep_csv

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

ROOT_ENV = "SCALPEL_ROOT"
log = logging.getLogger("scalpel")


# -- manifests ----------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _tree_hash(path: Path) -> str:
    if path.is_file():
        return _sha256(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file() and not p.name.endswith(".manifest.json")):
        h.update(str(f.relative_to(path)).encode())
        h.update(_sha256(f).encode())
    return h.hexdigest()


def version_string() -> str:
    """``git describe`` when run from a checkout, else the installed package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


@dataclass
class RunManifest:
    command: str
    config: dict
    config_text: str | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    version: str = ""

    @property
    def run_id(self) -> str:
        blob = json.dumps({"command": self.command, "config": self.config, "inputs": self.inputs}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def write(self, path: Path) -> None:
        missing = [p for p in self.outputs if not Path(p).exists()]
        if missing:
            from .errors import InvariantError

            raise InvariantError(f"declared outputs missing: {missing}")
        doc = {"run_id": self.run_id, **asdict(self)}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- config handling ---------------------------------------------------------------------

def load_config(path: str | None) -> tuple[dict, str | None]:
    if path is None:
        return {}, None
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = p.read_text()
    try:
        return tomllib.loads(text), text
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section [{name}] must be a table")
    return dict(sec)


def _merge(cls, section: dict, flags: dict, base=None):
    """Dataclass from defaults < config section < explicit flags."""
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names - {"textreg", "normreg", "sparsityreg"}
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} options: {sorted(unknown)}")
    values = {**section, **{k: v for k, v in flags.items() if v is not None}}
    if cls is TrainConfig:
        base = base or TrainConfig()
        return TrainConfig.from_dict({**base.to_dict(), **values})
    try:
        return replace(base, **values) if base is not None else cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _root() -> Path:
    return Path(os.environ.get(ROOT_ENV, "runs"))


def _data_dir(args) -> Path:
    return Path(args.data) if args.data else _root() / "data"


def _task_names(data: Path) -> list[str]:
    names = [k for k in KINDS if (data / k / "train.jsonl").exists()]
    extra = sorted(p.name for p in data.iterdir() if p.is_dir() and p.name not in KINDS and p.name != "general"
                   and (p / "train.jsonl").exists()) if data.is_dir() else []
    if not names and not extra:
        raise InputError(f"no task datasets under {data}")
    return names + extra


def _load_tasks(data: Path, names=None):
    return [read_dataset(data, n) for n in (names or _task_names(data))]


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# -- commands ----------------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> RunManifest:
    sec = _section(cfg, "data")
    kinds = args.kind or sec.get("kinds", list(KINDS))
    size = args.size or sec.get("size", 400)
    corpus_size = args.corpus_size or sec.get("corpus_size", 40000)
    out = Path(args.out) if args.out else _root() / "data"
    outputs = []
    for kind in kinds:
        ds = generate_task(kind, size, args.seed)
        write_dataset(out, ds)
        outputs += [str(out / kind / f"{s}.jsonl") for s in ("train", "dev", "test")]
    write_general(out, generate_general_corpus(corpus_size, args.seed))
    outputs += [str(out / "general" / f"{s}.jsonl") for s in ("textreg", "eval")]
    snapshot = {"kinds": list(kinds), "size": size, "corpus_size": corpus_size, "seed": args.seed}
    return RunManifest("gen-data", snapshot, outputs=outputs), out / "gen-data.manifest.json"


def cmd_pretrain(args, cfg):
    data = _data_dir(args)
    tasks = _load_tasks(data)
    corpus = read_general(data)
    tok = build_tokenizer(tasks, corpus)
    mcfg = _merge(ModelConfig, {**_section(cfg, "model"), "vocab_size": len(tok)}, {"seed": args.seed})
    pcfg = _merge(PretrainConfig, _section(cfg, "pretrain"), {"steps": args.steps, "seed": args.seed})
    model, report = pretrain(mcfg, tok, tasks, corpus, pcfg)
    out = Path(args.out) if args.out else _root() / "model.sclp"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    report_path = out.with_suffix(".report.json")
    _write(report_path, json.dumps({"dev_accuracy": report.dev_accuracy, "perplexity": report.perplexity},
                                   indent=2, sort_keys=True) + "\n")
    print(json.dumps({"dev_accuracy": report.dev_accuracy, "perplexity": report.perplexity}, sort_keys=True))
    snapshot = {"model": mcfg.to_dict(), "pretrain": asdict(pcfg)}
    return (RunManifest("pretrain", snapshot, inputs={str(data): _tree_hash(data)}, outputs=[str(out), str(report_path)]),
            out.with_suffix(".manifest.json"))


def _train_flags(args) -> dict:
    return {
        "learning_rate": args.lr, "batch_size": args.batch_size, "epochs": args.epochs, "rank": args.rank,
        "alpha": args.alpha, "textreg": args.textreg, "normreg": args.normreg, "sparsityreg": args.sparsityreg,
        "init_seed": args.init_seed, "seed": args.seed,
    }


def _train_config(args, cfg) -> TrainConfig:
    base = TrainConfig.paper() if getattr(args, "preset", None) == "paper" else TrainConfig()
    return _merge(TrainConfig, _section(cfg, "train"), _train_flags(args), base)


def _target_and_held_out(data: Path, task: str):
    tasks = _load_tasks(data)
    by_name = {t.name: t for t in tasks}
    if task not in by_name:
        raise InputError(f"task {task!r} not found under {data}; available: {sorted(by_name)}")
    return by_name[task], [t for t in tasks if t.name != task]


def cmd_ablate(args, cfg):
    data = _data_dir(args)
    model = load_model(args.model)
    target, held_out = _target_and_held_out(data, args.task)
    corpus = read_general(data)
    tcfg = _train_config(args, cfg)
    adapters, train_log = ablate(model, target, corpus.textreg, tcfg, held_out)
    out = Path(args.out) if args.out else _root() / f"adapters_{args.task}.sclp"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_adapters(adapters, out)
    log_path = out.with_suffix(".log.csv")
    _write(log_path, train_log.to_csv())
    inputs = {args.model: _sha256(Path(args.model)), str(data): _tree_hash(data)}
    return (RunManifest("ablate", {"task": args.task, "train": tcfg.to_dict(), "best_epoch": train_log.best_epoch},
                        inputs=inputs, outputs=[str(out), str(log_path)]), out.with_suffix(".manifest.json"))


def cmd_eval(args, cfg):
    data = _data_dir(args)
    model = load_model(args.model)
    adapters = load_adapters(args.adapters, model.config) if args.adapters else None
    tasks = _load_tasks(data, args.tasks)
    corpus = read_general(data)
    lines = [",".join(MetricReport.COLUMNS) + "\n"]
    for t in tasks:
        held_out = [h for h in tasks if h.name != t.name]
        report = evaluate(model, adapters, t, held_out, corpus.eval, split=args.split)
        lines.append(report.to_csv_row())
    out = Path(args.out) if args.out else _root() / "eval.csv"
    _write(out, "".join(lines))
    sys.stdout.write("".join(lines))
    inputs = {args.model: _sha256(Path(args.model)), str(data): _tree_hash(data)}
    if args.adapters:
        inputs[args.adapters] = _sha256(Path(args.adapters))
    return (RunManifest("eval", {"tasks": [t.name for t in tasks], "split": args.split}, inputs=inputs,
                        outputs=[str(out)]), out.with_suffix(".manifest.json"))


def cmd_analyze(args, cfg):
    out = Path(args.out) if args.out else _root() / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    sets = [load_adapters(p) for p in args.adapters]
    names = args.names or [s.task_label or Path(p).stem for s, p in zip(sets, args.adapters)]
    if len(set(names)) != len(names):
        names = [f"{n}#{i}" for i, n in enumerate(names)]
    outputs = []
    for name, s in zip(names, sets):
        rep = layer_importance(s)
        csv_path, svg_path = out / f"importance_{name}.csv", out / f"importance_{name}.svg"
        _write(csv_path, rep.to_csv())
        _write(svg_path, svg.bar_chart([str(i) for i in range(rep.n_layers)], rep.per_layer,
                                       f"layer importance: {name}", "sum of ||(alpha/r) BA||_F",
                                       highlight=rep.peak_layer, fixed=args.fixed_metadata))
        outputs += [str(csv_path), str(svg_path)]
    if len(sets) >= 2:
        sim = task_similarity(sets, names)
        emb = mds_embed(sim)
        labels = [CATEGORIES.get(s.task_label, s.task_label or n) for s, n in zip(sets, names)]
        summary = cluster_report(emb, labels)
        files = {
            "similarity.csv": sim.to_csv(),
            "distances.csv": sim.to_csv(distances=True),
            "mds.csv": emb.to_csv(),
            "mds.svg": svg.scatter([tuple(c) for c in emb.coords], names, "MDS of adapter similarity",
                                   "dim 1", "dim 2", groups=labels, fixed=args.fixed_metadata),
            "clusters.json": json.dumps({"intra": summary.intra, "inter": summary.inter, "ratio": summary.ratio,
                                         "stress": emb.stress}, indent=2, sort_keys=True) + "\n",
        }
        for fname, text in files.items():
            _write(out / fname, text)
            outputs.append(str(out / fname))
    inputs = {p: _sha256(Path(p)) for p in args.adapters}
    return RunManifest("analyze", {"names": names}, inputs=inputs, outputs=outputs), out / "analyze.manifest.json"


def cmd_compare(args, cfg):
    sec = _section(cfg, "compare")
    data = _data_dir(args)
    model = load_model(args.model)
    adapters = load_adapters(args.adapters, model.config)
    target, held_out = _target_and_held_out(data, args.task)
    corpus = read_general(data)
    methods = args.methods or sec.get("methods", list(METHODS))
    eps_grid = args.eps_grid or sec.get("eps_grid", list(EPS_GRID))
    k = args.k if args.k is not None else sec.get("k", TOP_K)
    rows = compare(model, adapters, target, held_out, corpus.eval, methods, eps_grid, k, args.seed)
    out = Path(args.out) if args.out else _root() / f"compare_{args.task}.csv"
    _write(out, compare_csv(rows))
    plot = out.with_suffix(".svg")
    ok = [r for r in rows if r.status == "ok"]
    _write(plot, svg.tradeoff_plot([r.method for r in ok], [r.accuracy_drop for r in ok],
                                   [r.capability for r in ok], [r.perplexity for r in ok],
                                   f"trade-off on {args.task}", fixed=args.fixed_metadata))
    sys.stdout.write(compare_csv(rows))
    inputs = {args.model: _sha256(Path(args.model)), args.adapters: _sha256(Path(args.adapters)),
              str(data): _tree_hash(data)}
    snapshot = {"task": args.task, "methods": list(methods), "eps_grid": list(eps_grid), "k": k, "seed": args.seed}
    return RunManifest("compare", snapshot, inputs=inputs, outputs=[str(out), str(plot)]), out.with_suffix(".manifest.json")


def cmd_sweep(args, cfg):
    data = _data_dir(args)
    grid_cfg, _ = load_config(args.grid) if args.grid else (cfg, None)
    axes = _section(grid_cfg, "grid")
    if args.ranks:
        axes["rank"] = args.ranks
    if not axes:
        raise ConfigError("sweep grid is empty; give --grid FILE with a [grid] table or --ranks")
    for k, v in axes.items():
        if not isinstance(v, list) or not v:
            raise ConfigError(f"grid axis {k!r} must be a non-empty list")
    model = load_model(args.model)
    target, held_out = _target_and_held_out(data, args.task)
    corpus = read_general(data)
    tcfg = _train_config(args, cfg)
    workers = args.workers or args.threads or 1
    rows = sweep(model, target, corpus.textreg, corpus.eval, tcfg, axes, held_out, workers=workers)
    out = Path(args.out) if args.out else _root() / f"sweep_{args.task}.csv"
    _write(out, sweep_csv(rows))
    sys.stdout.write(sweep_csv(rows))
    inputs = {args.model: _sha256(Path(args.model)), str(data): _tree_hash(data)}
    snapshot = {"task": args.task, "grid": axes, "train": tcfg.to_dict()}
    return RunManifest("sweep", snapshot, inputs=inputs, outputs=[str(out)]), out.with_suffix(".manifest.json")


# -- parser ---------------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--preset", choices=["toy", "paper"], default="toy")
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--rank", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--textreg", type=float)
    g.add_argument("--normreg", type=float)
    g.add_argument("--sparsityreg", type=float)
    g.add_argument("--init-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalpel", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--precision", choices=["f32", "f64"], default="f32")
    parser.add_argument("--threads", type=int, help="BLAS threads for worker processes; default sweep workers")
    parser.add_argument("--config", help="TOML config file; command-line flags take precedence")
    parser.add_argument("--fixed-metadata", action="store_true", help="omit timestamps from SVG output")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate task datasets and the general corpus")
    p.add_argument("--kind", action="append", choices=KINDS)
    p.add_argument("--size", type=int)
    p.add_argument("--corpus-size", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train and freeze the base model")
    p.add_argument("--data")
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("ablate", help="train ablation adapters for one task")
    p.add_argument("--model", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--data")
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="accuracy, accuracy drop, perplexity and capability per task")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters")
    p.add_argument("--tasks", nargs="+")
    p.add_argument("--data")
    p.add_argument("--split", choices=["dev", "test"], default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="importance, similarity and MDS from adapter files")
    p.add_argument("--adapters", nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", help="compare against noise-corruption baselines")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--data")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--eps-grid", nargs="+", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="grid over loss weights, ranks and seeds")
    p.add_argument("--model", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--data")
    p.add_argument("--grid", help="TOML file with a [grid] table of lists")
    p.add_argument("--ranks", nargs="+", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        cfg, cfg_text = load_config(args.config)
        T.set_default_dtype(np.float64 if args.precision == "f64" else np.float32)
        manifest, path = args.func(args, cfg)
        manifest.config_text = cfg_text
        manifest.config = {**manifest.config, "precision": args.precision}
        manifest.version = version_string()
        manifest.outputs.append(str(path))
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("")  # reserve so the outputs check sees it
        manifest.write(path)
    except ScalpelError as exc:
        print(f"error: {exc.category}: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # anything unexpected is an internal invariant failure
        log.debug("internal error", exc_info=True)
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
