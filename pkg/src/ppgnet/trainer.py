"""SGD training, cross-validation plans, and the four transfer-learning conditions."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .dataio import DataError, WindowedDataset, atomic_write_bytes, model_from_weights, save_weights
from .metrics import EvalReport
from .model import TRANSFER_BLOCKS, ModelConfig, PPGNetModel, build_model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.02
    batch_size: int = 128
    epochs: int = 750
    seed: int = 0
    shuffle: bool = True
    freeze: tuple[str, ...] | None = None  # blocks left trainable; None trains everything
    sparse_fraction: float | None = None

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.sparse_fraction is not None and not 0.0 < self.sparse_fraction <= 1.0:
            raise ValueError("sparse_fraction must lie in (0, 1]")


def train_arrays(
    model: PPGNetModel,
    X: np.ndarray,
    y: np.ndarray,
    config: TrainConfig | None = None,
    callback=None,
) -> list[float]:
    """Minibatch SGD on the MAE loss; returns the per-epoch mean training loss.

    Epochs reshuffle with the seeded generator, which also draws dropout
    masks, so a fixed seed gives a bitwise-repeatable trajectory. The last
    short batch is kept. Parameters of frozen blocks never change.
    """
    cfg = config or TrainConfig()
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if cfg.freeze is not None:
        model.freeze_except(cfg.freeze)
    rng = np.random.default_rng(cfg.seed)
    params = model.trainable_parameters()
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            model.zero_grad()
            pred = model.forward(X[idx], training=True, rng=rng)
            loss = ag.mae_loss(pred, y[idx])
            if loss.requires_grad:
                loss.backward()
                ag.sgd_step(params, cfg.learning_rate)
            total += loss.item() * idx.size
        history.append(total / n)
        if callback is not None:
            callback(epoch, history[-1])
    model.zero_grad()
    return history


def train(
    model: PPGNetModel, dataset: WindowedDataset, config: TrainConfig | None = None, callback=None
) -> tuple[PPGNetModel, list[float]]:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    history = train_arrays(model, dataset.samples, dataset.labels, config, callback)
    return model, history


def history_csv(history: list[float]) -> str:
    return "epoch,mean_loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(history))


# fold plans ------------------------------------------------------------------

@dataclass
class Fold:
    train_subjects: tuple[str, ...]
    test_subjects: tuple[str, ...]
    # only window-level splits pin explicit indices
    train_index: np.ndarray | None = None
    test_index: np.ndarray | None = None

    def split(self, dataset: WindowedDataset) -> tuple[WindowedDataset, WindowedDataset]:
        if self.train_index is not None:
            return dataset.select(self.train_index), dataset.select(self.test_index)
        return dataset.for_subjects(self.train_subjects), dataset.for_subjects(self.test_subjects)


@dataclass
class FoldPlan:
    scheme: str
    folds: list[Fold] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


def loso_folds(dataset: WindowedDataset) -> FoldPlan:
    subjects = dataset.subjects
    if len(subjects) < 2:
        raise ValueError("leave-one-subject-out needs at least 2 subjects")
    folds = [Fold(tuple(s for s in subjects if s != held), (held,)) for held in subjects]
    return FoldPlan("LOSO", folds)


def kfold_folds(dataset: WindowedDataset, k: int = 5, seed: int = 0, by: str = "subject") -> FoldPlan:
    """Seeded k-fold plan.

    ``by="subject"`` shuffles subjects and deals them into ``k`` near-equal
    groups, so no subject straddles train and test. ``by="window"`` splits
    individual windows instead, for comparison only.
    """
    rng = np.random.default_rng(seed)
    if by == "subject":
        subjects = dataset.subjects
        if len(subjects) < k or k < 2:
            raise ValueError(f"{len(subjects)} subjects cannot form {k} subject-disjoint folds")
        groups = np.array_split(rng.permutation(len(subjects)), k)
        folds = []
        for g in groups:
            test = tuple(subjects[i] for i in sorted(g))
            folds.append(Fold(tuple(s for s in subjects if s not in test), test))
        return FoldPlan(f"KFOLD({k})", folds)
    if by == "window":
        n = len(dataset)
        if n < k or k < 2:
            raise ValueError(f"{n} windows cannot form {k} folds")
        folds = []
        all_idx = np.arange(n)
        for g in np.array_split(rng.permutation(n), k):
            test = np.sort(g)
            train = np.setdiff1d(all_idx, test)
            folds.append(Fold(
                tuple(sorted(set(dataset.subject_ids[train]))),
                tuple(sorted(set(dataset.subject_ids[test]))),
                train, test,
            ))
        return FoldPlan(f"KFOLD({k})-window", folds)
    raise ValueError(f"unknown split unit {by!r}")


def holdout_plan(train_subjects, test_subjects) -> FoldPlan:
    return FoldPlan("HOLDOUT", [Fold(tuple(train_subjects), tuple(test_subjects))])


def parse_scheme(text: str) -> tuple[str, int | None]:
    """``"loso"`` -> ("loso", None); ``"kfold:5"`` -> ("kfold", 5)."""
    text = text.strip().lower()
    if text == "loso":
        return "loso", None
    if text.startswith("kfold"):
        _, _, k = text.partition(":")
        return "kfold", int(k) if k else 5
    raise ValueError(f"unknown scheme {text!r} (expected 'loso' or 'kfold:K')")


def make_plan(dataset: WindowedDataset, scheme: str, seed: int = 0, by: str = "subject") -> FoldPlan:
    name, k = parse_scheme(scheme)
    return loso_folds(dataset) if name == "loso" else kfold_folds(dataset, k, seed, by)


def sparse_subset(
    dataset: WindowedDataset, fraction: float = 0.15, seed: int = 0
) -> tuple[WindowedDataset, WindowedDataset]:
    """Per-subject stratified sample of ``round(fraction * n_subject)`` windows, and its complement."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    chosen = np.zeros(len(dataset), dtype=bool)
    for subject in dataset.subjects:
        idx = np.flatnonzero(dataset.subject_ids == subject)
        take = int(round(fraction * idx.size))
        if take == 0:
            log.warning("sparse subset: subject %s contributes no windows at fraction %g", subject, fraction)
            continue
        chosen[rng.choice(idx, size=take, replace=False)] = True
    return dataset.select(chosen), dataset.select(~chosen)


# cross-validation ------------------------------------------------------------

@dataclass
class RunResult:
    report: EvalReport
    models: list[PPGNetModel]
    histories: list[list[float]]


def _fold_job(args):
    model, train_ds, test_ds, cfg, fold = args
    history: list[float] = []
    if cfg.epochs > 0 and len(train_ds):
        _, history = train(model, train_ds, cfg)
    pred = model.predict(test_ds.samples) if len(test_ds) else np.empty(0)
    return fold, model, history, pred


def _run_folds(jobs_args, jobs: int):
    if jobs <= 1 or len(jobs_args) <= 1:
        return [_fold_job(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_fold_job, jobs_args))


def _meta(condition, scheme, initial, model: PPGNetModel, cfg: TrainConfig, steps: int, **extra) -> dict:
    counts = model.count_parameters()
    return {
        "condition": condition,
        "scheme": scheme,
        "initial_weights": initial,
        "total_params": counts["total"],
        "trainable_params": counts["trainable"],
        "parameter_counts": counts,
        "epochs": cfg.epochs if steps else 0,
        "optimizer_steps": steps,
        "train_config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        **extra,
    }


def _steps(n_train: int, cfg: TrainConfig) -> int:
    return cfg.epochs * math.ceil(n_train / cfg.batch_size) if n_train else 0


def cross_validate(
    dataset: WindowedDataset,
    plan: FoldPlan,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    init_model: PPGNetModel | None = None,
    trainable: tuple[str, ...] | None = None,
    jobs: int = 1,
    condition: int | None = None,
) -> RunResult:
    """Train and evaluate one model per fold.

    Fold ``i`` uses seed ``base + i`` for both initialization and training.
    With ``init_model`` every fold starts from a copy of it instead of a
    fresh random draw.
    """
    mcfg = model_config or ModelConfig()
    tcfg = train_config or TrainConfig()
    args = []
    for i, fold in enumerate(plan):
        train_ds, test_ds = fold.split(dataset)
        if init_model is not None:
            model = init_model.copy()
        else:
            model = build_model(replace(mcfg, seed=mcfg.seed + i))
        if trainable is not None:
            model.freeze_except(trainable)
        args.append((model, train_ds, test_ds, replace(tcfg, seed=tcfg.seed + i, freeze=trainable), i))
    results = sorted(_run_folds(args, jobs), key=lambda r: r[0])

    report = EvalReport()
    steps = 0
    for (fold, model, history, pred), (_, train_ds, test_ds, cfg, _) in zip(results, args):
        report.add(test_ds.subject_ids, test_ds.window_index, test_ds.labels, pred, fold)
        steps += _steps(len(train_ds), cfg) if history else 0
    ref_model = results[0][1] if results else build_model(mcfg)
    report.meta = _meta(
        condition, plan.scheme, "pretrained" if init_model is not None else "random",
        ref_model, tcfg, steps, n_folds=len(plan),
        folds=[{"train": list(f.train_subjects), "test": list(f.test_subjects)} for f in plan],
    )
    return RunResult(report, [r[1] for r in results], [r[2] for r in results])


def evaluate(model: PPGNetModel, dataset: WindowedDataset, meta: dict | None = None) -> EvalReport:
    report = EvalReport(meta=dict(meta or {}))
    if len(dataset):
        report.add(dataset.subject_ids, dataset.window_index, dataset.labels, model.predict(dataset.samples), 0)
    return report


# transfer conditions ---------------------------------------------------------

CONDITION_EPOCHS = {1: 750, 3: 65, 4: 90}


def pretrain(source: WindowedDataset, model_config: ModelConfig, train_config: TrainConfig) -> PPGNetModel:
    model = build_model(model_config)
    train(model, source, replace(train_config, freeze=None))
    return model


def run_condition(
    condition: int,
    target: WindowedDataset,
    *,
    source: WindowedDataset | None = None,
    source_weights: str | os.PathLike | None = None,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    source_train_config: TrainConfig | None = None,
    k: int = 5,
    sparse_fraction: float = 0.15,
    split_seed: int = 0,
    jobs: int = 1,
) -> RunResult:
    """Evaluate on ``target`` under one of the four initialization/retraining conditions.

    1. random init, k-fold CV on target;
    2. source-trained model applied to all target windows, no retraining;
    3. source-trained init, only LSTM2 + Linear trainable, k-fold CV on target;
    4. as 3 but retrained on a stratified ``sparse_fraction`` subset and
       evaluated on the remainder.

    Conditions 2-4 take the source model from ``source_weights`` or train it
    on ``source`` with ``source_train_config``.
    """
    if condition not in (1, 2, 3, 4):
        raise ValueError(f"condition must be 1-4, got {condition}")
    mcfg = model_config or ModelConfig()
    tcfg = train_config or TrainConfig(epochs=CONDITION_EPOCHS.get(condition, 0))

    if condition == 1:
        plan = kfold_folds(target, k, split_seed)
        return cross_validate(target, plan, mcfg, tcfg, jobs=jobs, condition=1)

    if source_weights is not None:
        pretrained, _ = model_from_weights(source_weights)
    elif source is not None:
        pretrained = pretrain(source, mcfg, source_train_config or TrainConfig(seed=mcfg.seed))
    else:
        raise DataError(f"condition {condition} needs source weights or a source dataset")
    if pretrained.config.window_samples != target.samples.shape[1]:
        raise DataError("pretrained model and target windows disagree on window length")

    if condition == 2:
        report = evaluate(pretrained, target)
        report.meta = _meta(2, "HOLDOUT", "source", pretrained, replace(tcfg, epochs=0), 0)
        return RunResult(report, [pretrained], [[]])

    if condition == 3:
        plan = kfold_folds(target, k, split_seed)
        return cross_validate(
            target, plan, mcfg, tcfg, init_model=pretrained,
            trainable=tuple(sorted(TRANSFER_BLOCKS)), jobs=jobs, condition=3,
        )

    # condition 4: the training subset exists before any evaluation data is touched
    subset, remainder = sparse_subset(target, sparse_fraction, split_seed)
    model = pretrained.copy()
    trainable = tuple(sorted(TRANSFER_BLOCKS))
    cfg = replace(tcfg, freeze=trainable, sparse_fraction=sparse_fraction)
    model.freeze_except(trainable)
    _, history = train(model, subset, cfg)
    report = evaluate(model, remainder)
    report.meta = _meta(
        4, "SPARSE", "source", model, cfg, _steps(len(subset), cfg),
        n_train_windows=len(subset), n_eval_windows=len(remainder),
        train_windows=[[s, int(i)] for s, i in zip(subset.subject_ids.tolist(), subset.window_index.tolist())],
    )
    return RunResult(report, [model], [history])


def save_history(path, history: list[float]) -> None:
    atomic_write_bytes(path, history_csv(history).encode())


def save_fold_weights(result: RunResult, out_dir, stem: str = "fold") -> list[str]:
    paths = []
    for i, model in enumerate(result.models):
        p = os.path.join(out_dir, f"{stem}{i}.weights")
        save_weights(model, p)
        paths.append(p)
    return paths
