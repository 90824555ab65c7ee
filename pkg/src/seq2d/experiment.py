"""Layered vs randomized training runs driven by a JSON config."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteActivationError
from .blockmap import map_to_dict
from .constructors import build_tiled_map, make_layered_tiling, make_random_tiling
from .mnist import MNIST_MEAN, MNIST_STD, SplitSpec, load_idx, preprocess, split
from .training import TrainConfig, train

__all__ = ["ConfigError", "ExperimentConfig", "LOG_FIELDS", "RunFailed", "run_compare",
           "run_train", "summarize", "worker_count"]

logger = logging.getLogger(__name__)

LOG_FIELDS = ["run_id", "model", "seed", "epoch", "split", "loss", "accuracy"]
SPLIT_ORDER = {"train": 0, "val": 1, "test": 2}

# multiply-adds (weights x examples x epochs x iterations) above which a warning is printed
LONG_RUNNING_WORK = 1e11


class ConfigError(ValueError):
    pass


class RunFailed(RuntimeError):
    def __init__(self, run_id, cause):
        super().__init__(f"run {run_id}: {cause}")
        self.run_id = run_id


@dataclass(frozen=True)
class DataConfig:
    images: str
    labels: str


@dataclass(frozen=True)
class PreprocessConfig:
    size: tuple | None = None
    erase: tuple | None = (0.02, 0.05)
    seed: int = 0
    mean: float = MNIST_MEAN
    std: float = MNIST_STD
    perspective: float | None = None


@dataclass(frozen=True)
class MaskConfig:
    """How random grids are drawn; ``hidden_path`` rejects masks whose logits
    cannot see a hidden block within ``iterations`` steps."""

    budget: int | None = None
    match: str = "tiles"
    hidden_path: bool = True


def _strict(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(doc) - known)
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}")
    return doc


@dataclass(frozen=True)
class ExperimentConfig:
    dims: tuple
    data: DataConfig
    split: SplitSpec
    tile: int = 100
    iterations: int | None = None
    architecture: str = "layered"
    n_runs: int = 1
    n_random_runs: int | None = None
    seed: int = 0
    train: TrainConfig | None = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    output_dir: str = "runs"
    base_dir: str = field(default=".", compare=False, repr=False)

    def __post_init__(self):
        dims = tuple(self.dims)
        if len(dims) < 2 or not all(isinstance(d, int) and d >= 1 for d in dims):
            raise ConfigError(f"dims must be >= 2 positive integers, got {list(dims)}")
        object.__setattr__(self, "dims", dims)
        if not isinstance(self.tile, int) or self.tile < 1:
            raise ConfigError("tile must be a positive integer")
        if self.iterations is None:
            object.__setattr__(self, "iterations", len(dims) - 1)
        if not isinstance(self.iterations, int) or self.iterations < 1:
            raise ConfigError("iterations must be a positive integer")
        if self.architecture not in ("layered", "random"):
            raise ConfigError(f"architecture must be layered or random, got {self.architecture!r}")
        if self.n_runs < 1 or (self.n_random_runs is not None and self.n_random_runs < 0):
            raise ConfigError("n_runs must be >= 1 and n_random_runs >= 0")
        if self.mask.match not in ("tiles", "shape"):
            raise ConfigError("mask.match must be 'tiles' or 'shape'")
        if self.train is None:
            object.__setattr__(self, "train", TrainConfig(iterations=self.iterations))
        elif self.train.iterations != self.iterations:
            object.__setattr__(self, "train", TrainConfig(**{**self._train_kwargs(),
                                                             "iterations": self.iterations}))

    def _train_kwargs(self):
        return {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}

    @property
    def random_runs(self) -> int:
        return self.n_runs if self.n_random_runs is None else self.n_random_runs

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "ExperimentConfig":
        doc = dict(_strict(cls, doc, "config"))
        doc.pop("base_dir", None)
        try:
            data = DataConfig(**_strict(DataConfig, doc.pop("data"), "data"))
            sp = SplitSpec(**_strict(SplitSpec, doc.pop("split"), "split"))
            pre = doc.pop("preprocess", None) or {}
            pre = PreprocessConfig(**_strict(PreprocessConfig, pre, "preprocess"))
            pre = PreprocessConfig(**{**asdict(pre),
                                      "size": None if pre.size is None else tuple(pre.size),
                                      "erase": None if pre.erase is None else tuple(pre.erase)})
            mask = MaskConfig(**_strict(MaskConfig, doc.pop("mask", None) or {}, "mask"))
            tr = doc.pop("train", None)
            iterations = doc.get("iterations") or len(doc.get("dims", ())) - 1
            if tr is not None:
                tr = dict(_strict(TrainConfig, tr, "train"))
                if tr.setdefault("iterations", iterations) != iterations:
                    raise ConfigError("train.iterations disagrees with iterations")
                tr = TrainConfig.from_dict(tr)
            return cls(data=data, split=sp, preprocess=pre, mask=mask, train=tr,
                       base_dir=str(base_dir), **doc)
        except KeyError as exc:
            raise ConfigError(f"config is missing {exc}") from None
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.pop("base_dir")
        doc["dims"] = list(self.dims)
        return json.loads(json.dumps(doc))

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def work(self) -> float:
        grid = make_layered_tiling(self.dims, self.tile)
        return (float(grid.n_trainable_weights) * self.split.train
                * self.train.epochs * self.iterations)

    @property
    def long_running(self) -> bool:
        return self.work() > LONG_RUNNING_WORK


def worker_count(n_jobs: int) -> int:
    """Worker processes to use: ``SEQ2D_THREADS`` if set, else the CPU count."""
    raw = os.environ.get("SEQ2D_THREADS")
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"SEQ2D_THREADS must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ConfigError("SEQ2D_THREADS must be >= 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_jobs))


def load_splits(cfg: ExperimentConfig):
    try:
        images = load_idx(cfg.resolve(cfg.data.images), cfg.resolve(cfg.data.labels))
    except OSError as exc:
        raise ConfigError(f"cannot read data: {exc}") from None
    pre = cfg.preprocess
    images = preprocess(images, pre.size, pre.erase, pre.seed, pre.mean, pre.std, pre.perspective)
    h, w = images.shape
    if h * w != cfg.dims[0]:
        raise ConfigError(f"images flatten to {h * w} values but dims[0] is {cfg.dims[0]}")
    n_classes = int(images.labels.max()) + 1
    if cfg.dims[-1] < n_classes:
        raise ConfigError(f"output width {cfg.dims[-1]} < {n_classes} classes")
    try:
        parts = split(images, cfg.split)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return {name: (s.flat(), s.labels) for name, s in zip(("train", "val", "test"), parts)
            if len(s)}


def _grid(cfg: ExperimentConfig, model: str, seed: int):
    if model == "layered":
        return make_layered_tiling(cfg.dims, cfg.tile)
    depth = cfg.iterations if cfg.mask.hidden_path else None
    try:
        return make_random_tiling(cfg.dims, cfg.tile, cfg.mask.budget, seed,
                                  match=cfg.mask.match, max_depth=depth)
    except ValueError as exc:
        raise ConfigError(f"random mask: {exc}") from None


def _one_run(cfg: ExperimentConfig, splits: dict, run_id: int, model: str, seed: int):
    grid = _grid(cfg, model, seed)
    m = build_tiled_map(grid, seed=seed)
    tcfg = TrainConfig(**{**cfg._train_kwargs(), "seed": seed})
    evals = {k: v for k, v in splits.items() if k != "train"}
    try:
        result = train(m, grid, splits["train"], tcfg, evals, run_id=run_id, model=model)
    except NonFiniteActivationError as exc:
        raise RunFailed(run_id, exc) from None
    return {"run_id": run_id, "model": model, "seed": seed, "log": result.log,
            "grid": grid.to_dict(), "map": map_to_dict(result.map),
            "trainable_tiles": grid.n_trainable_tiles,
            "trainable_weights": grid.n_trainable_weights}


def _write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(rows) -> str:
    rows = sorted(rows, key=lambda r: (r["run_id"], r["epoch"], SPLIT_ORDER[r["split"]]))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({**r, "loss": repr(float(r["loss"])),
                         "accuracy": repr(float(r["accuracy"]))})
    return buf.getvalue()


def _final(log, split_name):
    rows = [r for r in log if r["split"] == split_name]
    return rows[-1]["accuracy"] if rows else None


def summarize(runs: list, split_name: str = "test") -> dict:
    """Mean/std of final accuracy per architecture plus the layered-random gaps."""
    by_model = {}
    for run in runs:
        acc = _final(run["log"], split_name)
        by_model.setdefault(run["model"], []).append(acc)
    out = {"split": split_name, "models": {}}
    for model, accs in sorted(by_model.items()):
        a = np.array(accs, dtype=np.float64)
        out["models"][model] = {
            "n": len(accs), "final_accuracy": accs, "mean": float(a.mean()),
            "std": float(a.std(ddof=1)) if len(accs) > 1 else 0.0,
            "min": float(a.min()), "max": float(a.max()),
        }
    if {"layered", "random"} <= set(by_model):
        lay, rnd = by_model["layered"], by_model["random"]
        out["mean_delta"] = abs(out["models"]["layered"]["mean"] - out["models"]["random"]["mean"])
        out["max_abs_delta"] = float(max(abs(a - b) for a in lay for b in rnd))
    return out


def _execute(cfg: ExperimentConfig, jobs: list, out_dir: Path | None) -> list:
    if cfg.long_running:
        logger.info("long-running config: about %.1e multiply-adds per run", cfg.work())
    splits = load_splits(cfg)
    workers = worker_count(len(jobs))
    if workers == 1:
        runs = [_one_run(cfg, splits, *job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_one_run, cfg, splits, *job) for job in jobs]
            runs = [f.result() for f in futures]
    if out_dir is not None:
        for run in runs:
            stem = f"run_{run['run_id']:03d}_{run['model']}"
            _write_atomic(out_dir / "maps" / f"{stem}.map.json", json.dumps(run["map"]))
            _write_atomic(out_dir / "maps" / f"{stem}.grid.json", json.dumps(run["grid"]))
        _write_atomic(out_dir / "config.json", json.dumps(cfg.to_dict(), indent=2) + "\n")
        seeds = [{"run_id": r["run_id"], "model": r["model"], "seed": r["seed"],
                  "trainable_tiles": r["trainable_tiles"],
                  "trainable_weights": r["trainable_weights"]} for r in runs]
        _write_atomic(out_dir / "seeds.json", json.dumps(seeds, indent=2) + "\n")
        _write_atomic(out_dir / "log.csv", _csv_text([row for r in runs for row in r["log"]]))
    return runs


def _out_dir(cfg, output_dir):
    return cfg.resolve(output_dir if output_dir is not None else cfg.output_dir)


def run_train(cfg: ExperimentConfig, output_dir=None) -> list:
    """``n_runs`` runs of ``cfg.architecture`` with seeds ``seed, seed+1, ...``."""
    jobs = [(k, cfg.architecture, cfg.seed + k) for k in range(cfg.n_runs)]
    return _execute(cfg, jobs, _out_dir(cfg, output_dir))


def run_compare(cfg: ExperimentConfig, output_dir=None):
    """``n_runs`` layered and ``n_random_runs`` random runs; returns ``(runs, summary)``.

    Run ids are numbered layered first; seeds restart at ``cfg.seed`` for each
    architecture.
    """
    jobs = [(k, "layered", cfg.seed + k) for k in range(cfg.n_runs)]
    jobs += [(cfg.n_runs + k, "random", cfg.seed + k) for k in range(cfg.random_runs)]
    out = _out_dir(cfg, output_dir)
    runs = _execute(cfg, jobs, out)
    summary = summarize(runs, "test" if cfg.split.test else "val")
    summary["trainable"] = {r["model"]: {"tiles": r["trainable_tiles"],
                                         "weights": r["trainable_weights"]}
                            for r in runs if r["model"] == "layered"}
    summary["trainable"]["random"] = [{"tiles": r["trainable_tiles"],
                                       "weights": r["trainable_weights"]}
                                      for r in runs if r["model"] == "random"]
    _write_atomic(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    return runs, summary
