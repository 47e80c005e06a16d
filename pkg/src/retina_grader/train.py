"""Epoch loop, early stopping, evaluation metrics and hyperparameter search."""

from __future__ import annotations

import csv
import io
import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import DatasetManifest, FundusSample, Severity
from .errors import ConfigError, DataError, NumericError
from .imageio import read_image
from .morph import PreprocSpec, preprocess
from .nn import Network, NetworkSpec
from .optim import SGDConfig, cross_entropy, train_step
from .tensor import Rng, derive_seed

MIN_IMPROVEMENT = 1e-6
CURVE_HEADER = ["epochs", "training_loss", "training_accuracy", "validation_loss", "validation_accuracy"]


def thread_count():
    """``RETINA_GRADER_THREADS`` (0 or unset = one per CPU)."""
    raw = os.environ.get("RETINA_GRADER_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RETINA_GRADER_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("RETINA_GRADER_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 16
    max_epochs: int = 60
    dropout_rate: float = 0.25
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ConfigError(f"learning rate must be finite and >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max epochs must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout rate must be in [0, 1)")
        if self.early_stop_patience < 0:
            raise ConfigError("early-stop patience must be >= 0 (0 disables)")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    training_loss: float
    training_accuracy: float
    validation_loss: float
    validation_accuracy: float


@dataclass
class Metrics:
    accuracy: float
    sensitivity: float
    specificity: float
    confusion: np.ndarray  # [true grade, predicted grade]

    @classmethod
    def from_predictions(cls, truth, predicted, classes=len(Severity)):
        truth = np.asarray(truth, dtype=np.int64)
        predicted = np.asarray(predicted, dtype=np.int64)
        confusion = np.zeros((classes, classes), dtype=np.int64)
        np.add.at(confusion, (truth, predicted), 1)
        total = confusion.sum()
        accuracy = float(np.trace(confusion) / total) if total else math.nan
        pos = truth >= 1
        tp = int(np.sum(pos & (predicted >= 1)))
        fn = int(np.sum(pos & (predicted == 0)))
        tn = int(np.sum(~pos & (predicted == 0)))
        fp = int(np.sum(~pos & (predicted >= 1)))
        sensitivity = tp / (tp + fn) if tp + fn else math.nan
        specificity = tn / (tn + fp) if tn + fp else math.nan
        return cls(accuracy, sensitivity, specificity, confusion)

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "confusion": self.confusion.tolist(),
        }


@dataclass
class RunReport:
    records: list
    stopped_early: bool
    best_epoch: int
    final_metrics: Metrics
    config: TrainConfig
    net_spec: NetworkSpec = None
    state: dict = field(default=None, repr=False)

    def best_record(self) -> EpochRecord:
        return next(r for r in self.records if r.epoch == self.best_epoch)

    def network(self) -> Network:
        """Network holding the best-epoch parameters."""
        net = Network(self.net_spec)
        net.load_state_dict(self.state)
        return net

    def summary(self):
        return {
            "config": asdict(self.config),
            "epochs_run": len(self.records),
            "stopped_early": self.stopped_early,
            "best_epoch": self.best_epoch,
            "best_record": asdict(self.best_record()),
            "final_metrics": self.final_metrics.to_dict(),
        }


class EarlyStopping:
    """Tracks the best validation loss and decides when to stop.

    ``best_epoch`` is the earliest epoch with the minimal loss. The patience
    counter only resets on an improvement of more than ``min_delta`` over the
    best loss seen so far; ``patience=0`` never stops.
    """

    def __init__(self, patience, min_delta=MIN_IMPROVEMENT):
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = math.inf
        self.best_epoch = None
        self.wait = 0

    def update(self, epoch, loss):
        """Record one epoch. Returns True when the loss is a new minimum."""
        if not math.isfinite(loss):
            raise NumericError(f"validation loss became {loss} at epoch {epoch}")
        if loss < self.best_loss - self.min_delta:
            self.wait = 0
        else:
            self.wait += 1
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            return True
        return False

    @property
    def should_stop(self):
        return self.patience > 0 and self.wait >= self.patience


# ---------------------------------------------------------------- evaluation


def load_arrays(samples, preproc: PreprocSpec, root="."):
    """Preprocess samples into an [n, c, h, w] array and their grade labels."""
    if not samples:
        raise DataError("no samples to load")
    xs = []
    for s in samples:
        path = s.image_path if os.path.isabs(s.image_path) else os.path.join(root, s.image_path)
        xs.append(preprocess(read_image(path), preproc).data)
    return np.stack(xs), np.array([int(s.grade) for s in samples], dtype=np.int64)


def evaluate_arrays(net: Network, x, y, batch_size=32):
    """Inference-mode mean cross-entropy and metrics."""
    probs = net.predict_proba(x, batch_size)
    loss, _ = cross_entropy(probs, y)
    return loss.value, Metrics.from_predictions(y, probs.argmax(axis=1), net.spec.class_count)


def evaluate(net: Network, samples, preproc: PreprocSpec, root=".") -> Metrics:
    x, y = load_arrays(list(samples), preproc, root)
    return evaluate_arrays(net, x, y)[1]


# ------------------------------------------------------------------ training


@dataclass
class SplitArrays:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, preproc: PreprocSpec):
        tr = manifest.split_samples("train")
        va = manifest.split_samples("val")
        if not tr or not va:
            raise ConfigError(
                f"training needs non-empty train and val splits (have {len(tr)} train, {len(va)} val)"
            )
        return cls(*load_arrays(tr, preproc, manifest.root), *load_arrays(va, preproc, manifest.root))


def run_training(net_spec: NetworkSpec, manifest: DatasetManifest | None, preproc: PreprocSpec | None,
                 cfg: TrainConfig, arrays: SplitArrays | None = None, progress=None) -> RunReport:
    """Train from scratch and return the report with best-epoch parameters.

    ``arrays`` short-circuits loading and preprocessing (the search reuses
    them across candidates). ``progress`` is called with each EpochRecord.
    """
    if arrays is None:
        arrays = SplitArrays.from_manifest(manifest, preproc)
    spec = net_spec.with_dropout(cfg.dropout_rate)
    root = Rng(cfg.seed)
    net = Network(spec, root.spawn())
    shuffle_rng = root.spawn()
    dropout_rng = root.spawn()
    sgd = SGDConfig(cfg.learning_rate)
    stopper = EarlyStopping(cfg.early_stop_patience)
    records = []
    best_state = net.state_dict()
    n = len(arrays.train_y)
    for epoch in range(cfg.max_epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            train_step(net, arrays.train_x[idx], arrays.train_y[idx], sgd, dropout_rng)
        tr_loss, tr_m = evaluate_arrays(net, arrays.train_x, arrays.train_y)
        va_loss, va_m = evaluate_arrays(net, arrays.val_x, arrays.val_y)
        rec = EpochRecord(epoch, tr_loss, tr_m.accuracy, va_loss, va_m.accuracy)
        records.append(rec)
        if progress is not None:
            progress(rec)
        if stopper.update(epoch, va_loss):
            best_state = net.state_dict()
        if stopper.should_stop:
            break
    net.load_state_dict(best_state)
    _, final = evaluate_arrays(net, arrays.val_x, arrays.val_y)
    return RunReport(
        records=records,
        stopped_early=len(records) < cfg.max_epochs,
        best_epoch=stopper.best_epoch,
        final_metrics=final,
        config=cfg,
        net_spec=spec,
        state=best_state,
    )


# ------------------------------------------------------------------- search


@dataclass(frozen=True)
class SearchSpace:
    learning_rates: tuple = (0.01,)
    batch_sizes: tuple = (16,)
    max_epochs_options: tuple = (60,)
    dropout_rates: tuple = (0.25,)
    budget: int = 1
    strategy: str = "grid"

    def __post_init__(self):
        for name in ("learning_rates", "batch_sizes", "max_epochs_options", "dropout_rates"):
            value = tuple(getattr(self, name))
            object.__setattr__(self, name, value)
            if not value:
                raise ConfigError(f"search space {name} is empty")
        if self.budget < 1:
            raise ConfigError(f"search budget must be >= 1, got {self.budget}")
        if self.strategy not in ("grid", "random"):
            raise ConfigError(f"search strategy must be 'grid' or 'random', not {self.strategy!r}")
        if self.budget > self.size:
            raise ConfigError(f"budget {self.budget} exceeds the {self.size} candidates in the space")

    @property
    def size(self):
        return (len(self.learning_rates) * len(self.batch_sizes)
                * len(self.max_epochs_options) * len(self.dropout_rates))

    def grid(self):
        return list(itertools.product(self.learning_rates, self.batch_sizes,
                                      self.max_epochs_options, self.dropout_rates))


@dataclass
class SearchEntry:
    index: int  # position in the grid
    config: TrainConfig
    report: RunReport

    @property
    def key(self):
        best = self.report.best_record()
        return (-best.validation_accuracy, best.validation_loss, self.index)


def select_candidates(space: SearchSpace, seed: int):
    """Grid indices to evaluate: grid order, or a seeded draw without replacement."""
    if space.strategy == "grid":
        return list(range(space.budget))
    return sorted(Rng(seed).permutation(space.size)[: space.budget].tolist())


def hyperparameter_search(space: SearchSpace, net_spec: NetworkSpec, arrays: SplitArrays,
                          base: TrainConfig, workers: int = 1, progress=None):
    """Train each selected candidate and rank them.

    Candidate i trains with seed ``base.seed XOR i``. Ranking: higher
    validation accuracy at the best epoch, then lower validation loss, then
    grid order. Returns (best config, leaderboard of SearchEntry).
    """
    grid = space.grid()
    chosen = select_candidates(space, base.seed)

    def run(i):
        lr, bs, ep, dr = grid[i]
        cfg = replace(base, learning_rate=lr, batch_size=bs, max_epochs=ep, dropout_rate=dr,
                      seed=derive_seed(base.seed, i))
        report = run_training(net_spec, None, None, cfg, arrays=arrays)
        if progress is not None:
            progress(i, cfg, report)
        return SearchEntry(i, cfg, report)

    if workers > 1 and len(chosen) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(run, chosen))
    else:
        entries = [run(i) for i in chosen]
    leaderboard = sorted(entries, key=lambda e: e.key)
    return leaderboard[0].config, leaderboard


LEADERBOARD_HEADER = [
    "rank", "candidate", "learning_rate", "batch_size", "max_epochs", "dropout_rate",
    "seed", "best_epoch", "epochs_run", "validation_accuracy", "validation_loss",
]


def write_leaderboard(entries, path):
    rows = [",".join(LEADERBOARD_HEADER)]
    for rank, e in enumerate(entries):
        best = e.report.best_record()
        c = e.config
        rows.append(",".join(str(v) for v in (
            rank, e.index, repr(c.learning_rate), c.batch_size, c.max_epochs, repr(c.dropout_rate),
            c.seed, e.report.best_epoch, len(e.report.records),
            repr(best.validation_accuracy), repr(best.validation_loss),
        )))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")


# ------------------------------------------------------------------- curves


def _fmt(value):
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def curves_csv(records) -> str:
    lines = [",".join(CURVE_HEADER)]
    for r in records:
        lines.append(",".join(_fmt(v) for v in (
            r.epoch, r.training_loss, r.training_accuracy, r.validation_loss, r.validation_accuracy,
        )))
    return "\n".join(lines) + "\n"


def read_curves(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CURVE_HEADER:
            raise DataError(f"{path}: unexpected curve header {header}")
        return [EpochRecord(int(row[0]), *(float(v) for v in row[1:])) for row in reader]


def _polyline(points, color, dash=None):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline fill="none" stroke="{color}" stroke-width="2"{extra} points="{pts}"/>'


def curves_svg(records, width=900, height=360) -> str:
    epochs = [r.epoch for r in records]
    panels = [
        ("Accuracy", [r.training_accuracy for r in records], [r.validation_accuracy for r in records]),
        ("Loss", [r.training_loss for r in records], [r.validation_loss for r in records]),
    ]
    pw = width / 2
    margin = 55
    out = io.StringIO()
    out.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
              f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">\n')
    out.write(f'<rect width="{width}" height="{height}" fill="white"/>\n')
    x_lo, x_hi = min(epochs), max(epochs)
    x_span = (x_hi - x_lo) or 1
    for k, (title, train, val) in enumerate(panels):
        ox = k * pw
        left, right = ox + margin, ox + pw - 20
        top, bottom = 30, height - 45
        y_lo = 0.0
        y_hi = max(max(train), max(val), 1e-12)
        if title == "Accuracy":
            y_hi = max(y_hi, 1.0)

        def sx(e):
            return left + (e - x_lo) / x_span * (right - left)

        def sy(v):
            return bottom - (v - y_lo) / (y_hi - y_lo) * (bottom - top)

        out.write(f'<text x="{(left + right) / 2:.1f}" y="18" text-anchor="middle" '
                  f'font-weight="bold">{title}</text>\n')
        out.write(f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>\n')
        out.write(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>\n')
        for t in range(5):
            v = y_lo + (y_hi - y_lo) * t / 4
            out.write(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.2f}</text>\n')
        for e in sorted({x_lo, x_hi, (x_lo + x_hi) // 2}):
            out.write(f'<text x="{sx(e):.1f}" y="{bottom + 16}" text-anchor="middle">{e}</text>\n')
        out.write(f'<text x="{(left + right) / 2:.1f}" y="{height - 8}" text-anchor="middle">epoch</text>\n')
        out.write(f'<text x="{ox + 14}" y="{(top + bottom) / 2:.1f}" text-anchor="middle" '
                  f'transform="rotate(-90 {ox + 14} {(top + bottom) / 2:.1f})">{title.lower()}</text>\n')
        out.write(_polyline([(sx(e), sy(v)) for e, v in zip(epochs, train)], "#1f77b4") + "\n")
        out.write(_polyline([(sx(e), sy(v)) for e, v in zip(epochs, val)], "#d62728", "6,4") + "\n")
        out.write(f'<text x="{right - 110}" y="{top + 12}" fill="#1f77b4">training</text>\n')
        out.write(f'<text x="{right - 110}" y="{top + 28}" fill="#d62728">validation</text>\n')
    out.write("</svg>\n")
    return out.getvalue()


def emit_curves(report_or_records, path, svg_path=None):
    """Write the curve CSV to ``path`` and the SVG chart beside it.

    Returns (csv_path, svg_path).
    """
    records = getattr(report_or_records, "records", report_or_records)
    records = list(records)
    if not records:
        raise DataError("no epoch records to emit")
    path = os.fspath(path)
    if svg_path is None:
        svg_path = os.path.splitext(path)[0] + ".svg"
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(curves_csv(records))
        with open(svg_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(curves_svg(records))
    except OSError as exc:
        raise DataError(f"cannot write curves: {exc}") from None
    return path, svg_path
