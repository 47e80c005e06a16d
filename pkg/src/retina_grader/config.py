"""Run configuration files: flat ``namespace.key = value`` lines.

Blank lines and lines starting with ``#`` are ignored. Keys are unique.
Relative paths are resolved against the directory holding the file. List
values are comma-separated.

Recognised keys (defaults in brackets)::

    data.manifest            manifest CSV (required)
    data.splits              split sidecar CSV; absent = split on the fly
    data.exclusions          exclusion list, one id per line
    output.dir               where artifacts go [<config dir>/run]
    split.train_fraction     [0.8]
    split.test_fraction      [0.0]
    split.seed               [0]
    preproc.width / .height  [128 / 128]
    preproc.threshold        [0.5]
    preproc.se               [square:3]
    preproc.order            [resize,normalize,erode,dilate]
    net.layers               layer tokens separated by spaces; absent = default
    net.hidden               dense width of the default network [128]
    train.learning_rate      [0.01]
    train.batch_size         [16]
    train.max_epochs         [60]
    train.dropout_rate       [0.25]
    train.early_stop_patience [10]
    train.seed               [0]
    search.learning_rates    list [train.learning_rate]
    search.batch_sizes       list [train.batch_size]
    search.max_epochs        list [train.max_epochs]
    search.dropout_rates     list [train.dropout_rate]
    search.budget            [size of the grid]
    search.strategy          grid | random [grid]
    search.workers           concurrent candidates, 0 = RETINA_GRADER_THREADS [1]
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .data import SplitConfig
from .errors import ConfigError, RetinaGraderError
from .morph import PreprocSpec
from .nn import NetworkSpec, default_network_spec
from .train import SearchSpace, TrainConfig

_KEYS = {
    "data.manifest": str, "data.splits": str, "data.exclusions": str, "output.dir": str,
    "split.train_fraction": float, "split.test_fraction": float, "split.seed": int,
    "preproc.width": int, "preproc.height": int, "preproc.threshold": float,
    "preproc.se": str, "preproc.order": list,
    "net.layers": str, "net.hidden": int,
    "train.learning_rate": float, "train.batch_size": int, "train.max_epochs": int,
    "train.dropout_rate": float, "train.early_stop_patience": int, "train.seed": int,
    "search.learning_rates": list, "search.batch_sizes": list, "search.max_epochs": list,
    "search.dropout_rates": list, "search.budget": int, "search.strategy": str,
    "search.workers": int,
}
_PATH_KEYS = ("data.manifest", "data.splits", "data.exclusions", "output.dir")
_LIST_TYPES = {"search.learning_rates": float, "search.batch_sizes": int,
               "search.max_epochs": int, "search.dropout_rates": float, "preproc.order": str}


def _convert(key, raw, where):
    kind = _KEYS[key]
    try:
        if kind is list:
            items = [v.strip() for v in raw.split(",")]
            if not all(items):
                raise ValueError("empty list item")
            return [_LIST_TYPES[key](v) for v in items]
        if kind is int:
            return int(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: {key} expects {_LIST_TYPES.get(key, kind).__name__}"
                          f"{' list' if kind is list else ''}, got {raw!r}") from None


def parse_config_text(text, base_dir=".", source="<config>"):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        if not raw:
            raise ConfigError(f"{where}: {key} has no value")
        value = _convert(key, raw, where)
        if key in _PATH_KEYS:
            value = os.path.normpath(os.path.join(base_dir, value))
        values[key] = value
    return values


@dataclass
class RunConfig:
    manifest: str
    splits: str | None
    exclusions: str | None
    output_dir: str
    split: SplitConfig
    preproc: PreprocSpec
    net: NetworkSpec
    train: TrainConfig
    search: SearchSpace
    workers: int

    @classmethod
    def from_values(cls, v, base_dir="."):
        if "data.manifest" not in v:
            raise ConfigError("data.manifest is required")
        try:
            preproc = PreprocSpec.from_values(
                v.get("preproc.width", 128), v.get("preproc.height", 128),
                v.get("preproc.threshold", 0.5), v.get("preproc.se", "square:3"),
                v.get("preproc.order"),
            )
            w, h = preproc.target_size
            if "net.layers" in v:
                net = NetworkSpec.from_tokens((3, h, w), v["net.layers"].split())
            else:
                net = default_network_spec((3, h, w), hidden=v.get("net.hidden", 128))
            net.shapes()
            train = TrainConfig(
                learning_rate=v.get("train.learning_rate", 0.01),
                batch_size=v.get("train.batch_size", 16),
                max_epochs=v.get("train.max_epochs", 60),
                dropout_rate=v.get("train.dropout_rate", 0.25),
                early_stop_patience=v.get("train.early_stop_patience", 10),
                seed=v.get("train.seed", 0),
            )
            space_lists = dict(
                learning_rates=tuple(v.get("search.learning_rates", [train.learning_rate])),
                batch_sizes=tuple(v.get("search.batch_sizes", [train.batch_size])),
                max_epochs_options=tuple(v.get("search.max_epochs", [train.max_epochs])),
                dropout_rates=tuple(v.get("search.dropout_rates", [train.dropout_rate])),
            )
            size = 1
            for items in space_lists.values():
                size *= len(items)
            search = SearchSpace(**space_lists, budget=v.get("search.budget", size),
                                 strategy=v.get("search.strategy", "grid"))
            split = SplitConfig(v.get("split.train_fraction", 0.8), v.get("split.seed", 0),
                                v.get("split.test_fraction", 0.0))
        except ConfigError:
            raise
        except (RetinaGraderError, ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        workers = v.get("search.workers", 1)
        if workers < 0:
            raise ConfigError("search.workers must be >= 0")
        return cls(
            manifest=v["data.manifest"], splits=v.get("data.splits"),
            exclusions=v.get("data.exclusions"),
            output_dir=v.get("output.dir", os.path.join(base_dir, "run")),
            split=split, preproc=preproc, net=net, train=train, search=search, workers=workers,
        )

    def preflight(self):
        """Fail fast on missing inputs or an unusable output directory."""
        for label, path in (("data.manifest", self.manifest), ("data.splits", self.splits),
                            ("data.exclusions", self.exclusions)):
            if path is not None and not os.path.isfile(path):
                raise ConfigError(f"{label}: no such file {path}")
        out = self.output_dir
        if os.path.exists(out) and not os.path.isdir(out):
            raise ConfigError(f"output.dir {out} exists and is not a directory")
        parent = out
        while not os.path.exists(parent):
            parent = os.path.dirname(parent) or "."
        if not os.access(parent, os.W_OK):
            raise ConfigError(f"output.dir {out} is not writable")


def load_config(path) -> RunConfig:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    base = os.path.dirname(os.path.abspath(path))
    return RunConfig.from_values(parse_config_text(text, base, path), base)
