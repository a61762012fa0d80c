"""Adam training loop, evaluation, and run-directory artifacts.

A run is fully determined by (configuration, seed): the validation split,
batch order, augmentation draws, and initialization are all keyed streams,
so two runs with the same inputs produce byte-identical logs, checkpoints,
and metrics.  Training state checkpoints carry exact float64 parameters and
optimizer moments, so a resumed run reproduces the uninterrupted loss
trajectory bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentationConfig, augment_sample, sample_rng
from .config import RunConfig
from .datasets import (
    DatasetManifest,
    class_counts,
    infer_class_names,
    read_manifest,
    stratified_split,
)
from .ensemble import (
    EnsembleConfig,
    build_ensemble,
    forward_scaled,
    load_checkpoint,
    prepare_inputs,
    save_checkpoint,
)
from .image import RasterImage, decode_image
from .losses import LossConfig, attach_loss, make_loss
from .metrics import MetricsReport, confusion_accumulate, matrix_to_csv, overall_metrics, report_emit

__all__ = [
    "TrainingError",
    "TrainingDivergedError",
    "AdamParams",
    "AdamState",
    "adam_step",
    "TrainResult",
    "train",
    "fit_arrays",
    "evaluate",
    "evaluate_checkpoint",
    "run_root",
]

_SHUFFLE_TAG = 771717
_STATE_FILE = "train_state.ckpt"


class TrainingError(RuntimeError):
    pass


class TrainingDivergedError(TrainingError):
    """Non-finite loss; carries (epoch, step, loss kind) context."""

    def __init__(self, epoch: int, step: int, loss_kind: str):
        super().__init__(
            f"non-finite loss at epoch {epoch}, step {step} (loss kind {loss_kind!r})"
        )
        self.epoch = epoch
        self.step = step
        self.loss_kind = loss_kind


@dataclass(frozen=True)
class AdamParams:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainingError("learning rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise TrainingError("Adam betas must lie in [0, 1)")


@dataclass
class AdamState:
    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, ad.Tensor]) -> "AdamState":
        return cls(
            t=0,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, ad.Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    hp: AdamParams,
) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise TrainingError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {p.data.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= hp.beta1
        m += (1.0 - hp.beta1) * g
        v *= hp.beta2
        v += (1.0 - hp.beta2) * (g * g)
        m_hat = m / (1.0 - hp.beta1**t)
        v_hat = v / (1.0 - hp.beta2**t)
        p.data -= hp.learning_rate * m_hat / (np.sqrt(v_hat) + hp.epsilon)


# ---------------------------------------------------------------------------
# Core fitting loop over in-memory images
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict[str, ad.Tensor]
    config: EnsembleConfig
    history: list[dict]
    best_epoch: int
    best_macro_f1: float
    best_params: dict[str, np.ndarray] = field(default_factory=dict)


def _predict_batch(params, config, images) -> np.ndarray:
    xs, xd = prepare_inputs(images, config)
    logits = forward_scaled(params, config, ad.Tensor(xs), ad.Tensor(xd)).data
    return np.argmax(logits, axis=1)


def _evaluate_images(params, config, images, labels, class_names, batch_size=64):
    preds = np.empty(len(images), dtype=np.int64)
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        preds[start : start + len(chunk)] = _predict_batch(params, config, chunk)
    matrix = confusion_accumulate(preds, labels, config.class_count, class_names)
    return overall_metrics(matrix)


def fit_arrays(
    images: list[RasterImage],
    labels: np.ndarray,
    image_ids: list[str],
    model_config: EnsembleConfig,
    loss_config: LossConfig,
    adam: AdamParams,
    epochs: int,
    batch_size: int,
    seed: int,
    augment: AugmentationConfig | None = None,
    val_images: list[RasterImage] | None = None,
    val_labels: np.ndarray | None = None,
    counts: np.ndarray | None = None,
    on_epoch=None,
    start_epoch: int = 1,
    params: dict[str, ad.Tensor] | None = None,
    state: AdamState | None = None,
    best: tuple[int, float] | None = None,
) -> TrainResult:
    """Train the ensemble on in-memory images; the engine under both the
    CLI ``train`` command and the estimator wrapper.

    ``on_epoch`` receives a dict per epoch (losses, validation metrics).
    ``start_epoch``, ``params``, ``state``, and ``best`` support exact
    resumption from a saved training state.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if counts is None:
        counts = np.bincount(labels, minlength=model_config.class_count)
    loss_fn = make_loss(loss_config, class_counts=counts)
    if params is None:
        params = build_ensemble(model_config, init_seed=seed)
    if state is None:
        state = AdamState.zeros_like(params)

    history: list[dict] = []
    best_epoch, best_f1 = best if best is not None else (0, float("-inf"))
    best_params: dict[str, np.ndarray] = {}
    n = len(images)
    target = augment.target_size if augment is not None else None

    for epoch in range(start_epoch, epochs + 1):
        order = np.random.default_rng([seed, _SHUFFLE_TAG, epoch]).permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            batch_idx = order[start : start + batch_size]
            batch_images = []
            for i in batch_idx:
                img = images[i]
                if augment is not None:
                    rng = sample_rng(seed, image_ids[i], epoch)
                    img = augment_sample(img, augment, rng)
                batch_images.append(img)
            xs, xd = prepare_inputs(batch_images, model_config)
            with ad.Tape() as tape:
                logits = forward_scaled(params, model_config, ad.Tensor(xs), ad.Tensor(xd))
                loss_t, loss_out = attach_loss(logits, loss_fn, labels[batch_idx])
                tape.backward(loss_t)
            if not np.isfinite(loss_out.loss):
                raise TrainingDivergedError(epoch, state.t + 1, loss_config.kind)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            adam_step(params, grads, state, adam)
            for p in params.values():
                p.zero_grad()
            epoch_loss += loss_out.loss * len(batch_idx)
        epoch_loss /= n

        entry = {"epoch": epoch, "step": state.t, "train_loss": epoch_loss}
        if val_images is not None and len(val_images):
            report = _evaluate_images(
                params, model_config, val_images, val_labels,
                model_config.class_names,
            )
            entry["val_accuracy"] = report.overall_accuracy
            entry["val_macro_f1"] = report.macro_f1
            if report.macro_f1 > best_f1:
                best_f1 = report.macro_f1
                best_epoch = epoch
                best_params = {k: p.data.copy() for k, p in params.items()}
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry, params, state, (best_epoch, best_f1))

    return TrainResult(
        params=params,
        config=model_config,
        history=history,
        best_epoch=best_epoch,
        best_macro_f1=best_f1,
        best_params=best_params,
    )


# ---------------------------------------------------------------------------
# Manifest-driven runs with artifacts
# ---------------------------------------------------------------------------


def run_root(override: str | None = None) -> Path:
    """Run directory root: CLI flag, else SONOCLASS_RUN_ROOT, else ./runs."""
    if override:
        return Path(override)
    env = os.environ.get("SONOCLASS_RUN_ROOT")
    return Path(env) if env else Path("runs")


def _load_images(manifest: DatasetManifest) -> list[RasterImage]:
    return [decode_image(e.path) for e in manifest.entries]


def _format_log_entry(entry: dict) -> str:
    parts = [f"epoch={entry['epoch']}", f"step={entry['step']}"]
    parts.append(f"train_loss={entry['train_loss']!r}")
    if "val_accuracy" in entry:
        parts.append(f"val_accuracy={entry['val_accuracy']!r}")
        parts.append(f"val_macro_f1={entry['val_macro_f1']!r}")
    return " ".join(parts) + "\n"


def _save_train_state(
    path: Path,
    params: dict[str, ad.Tensor],
    state: AdamState,
    epoch: int,
    best_epoch: int,
    best_f1: float,
    config_echo: dict,
) -> None:
    extras: dict[str, np.ndarray] = {}
    for name, p in params.items():
        extras[f"param/{name}"] = p.data
        extras[f"m/{name}"] = state.m[name]
        extras[f"v/{name}"] = state.v[name]
    extras["counters"] = np.array(
        [float(epoch), float(state.t), float(best_epoch), best_f1]
    )
    save_checkpoint(params, path, config=config_echo, extras=extras)


def load_train_state(path: Path):
    """Restore exact float64 parameters, moments, and counters."""
    data = load_checkpoint(path)
    params: dict[str, ad.Tensor] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for name, f32 in data.params.items():
        shape = f32.shape
        params[name] = ad.Tensor(
            data.extras[f"param/{name}"].reshape(shape), requires_grad=True, name=name
        )
        m[name] = data.extras[f"m/{name}"].reshape(shape).copy()
        v[name] = data.extras[f"v/{name}"].reshape(shape).copy()
    epoch, t, best_epoch, best_f1 = data.extras["counters"]
    state = AdamState(t=int(t), m=m, v=v)
    return params, state, int(epoch), int(best_epoch), float(best_f1), data.config


def train(config: RunConfig, run_dir: str | Path, resume: bool = False) -> TrainResult:
    """Manifest-driven training with the full artifact trail.

    Writes ``config.echo``, ``train.log``, per-epoch training state, and the
    best-by-validation-macro-F1 plus final checkpoints into ``run_dir``.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    manifest_path = config["data.manifest"]
    if not manifest_path:
        raise TrainingError("data.manifest is required for training")
    if not Path(manifest_path).exists():
        raise TrainingError(f"manifest not found: {manifest_path}")
    manifest = read_manifest(manifest_path)
    names = infer_class_names(manifest)

    declared = config["model.classes"]
    if declared and declared != len(names):
        raise TrainingError(
            f"model.classes={declared} does not match {len(names)} classes "
            "in the manifest"
        )

    val_frac = config["data.val_fraction"]
    test_frac = config["data.test_fraction"]
    if val_frac + test_frac >= 1.0:
        raise TrainingError("data.val_fraction + data.test_fraction must be < 1")
    train_split, val_split, _ = stratified_split(
        manifest,
        (1.0 - val_frac - test_frac, val_frac, test_frac),
        config["data.split_seed"],
    )

    train_images = _load_images(train_split)
    val_images = _load_images(val_split)
    source_size = (train_images[0].height, train_images[0].width)
    model_config = config.ensemble_config(
        class_count=len(names), class_names=names, source_size=source_size
    )
    augment = config.augmentation(target_size=model_config.detailed_input)
    adam = AdamParams(
        learning_rate=config["optim.learning_rate"],
        beta1=config["optim.beta1"],
        beta2=config["optim.beta2"],
        epsilon=config["optim.epsilon"],
    )
    seed = config["optim.seed"]
    loss_config = config.loss_config()
    counts = class_counts(train_split)

    (run_dir / "config.echo").write_text(config.echo())
    config_echo = {
        "model": model_config.to_dict(),
        "loss_kind": loss_config.kind,
        "seed": seed,
    }

    start_epoch = 1
    params = state = None
    best = None
    log_mode = "w"
    if resume:
        state_path = run_dir / _STATE_FILE
        if not state_path.exists():
            raise TrainingError(f"cannot resume: {state_path} does not exist")
        params, state, done_epoch, best_epoch, best_f1, _ = load_train_state(state_path)
        start_epoch = done_epoch + 1
        best = (best_epoch, best_f1)
        log_mode = "a"

    log_fh = open(run_dir / "train.log", log_mode)
    try:

        def on_epoch(entry, live_params, live_state, best_pair):
            log_fh.write(_format_log_entry(entry))
            log_fh.flush()
            _save_train_state(
                run_dir / _STATE_FILE,
                live_params,
                live_state,
                entry["epoch"],
                best_pair[0],
                best_pair[1],
                config_echo,
            )
            if best_pair[0] == entry["epoch"]:
                save_checkpoint(live_params, run_dir / "best.ckpt", config=config_echo)

        result = fit_arrays(
            images=train_images,
            labels=train_split.labels,
            image_ids=[e.image_id for e in train_split.entries],
            model_config=model_config,
            loss_config=loss_config,
            adam=adam,
            epochs=config["optim.epochs"],
            batch_size=config["optim.batch_size"],
            seed=seed,
            augment=augment,
            val_images=val_images,
            val_labels=val_split.labels,
            counts=counts,
            on_epoch=on_epoch,
            start_epoch=start_epoch,
            params=params,
            state=state,
            best=best,
        )
    finally:
        log_fh.close()

    save_checkpoint(result.params, run_dir / "final.ckpt", config=config_echo)
    if not (run_dir / "best.ckpt").exists():
        save_checkpoint(result.params, run_dir / "best.ckpt", config=config_echo)
    return result


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(
    params: dict[str, ad.Tensor],
    model_config: EnsembleConfig,
    manifest: DatasetManifest,
    loss_name: str = "",
    focus_class: str = "",
) -> MetricsReport:
    """Resize-only evaluation over every manifest entry.

    Augmentation randomness is never consumed here, so reports depend only
    on the checkpoint and the manifest.
    """
    labels = manifest.labels
    if labels.size and labels.max() >= model_config.class_count:
        raise TrainingError(
            f"manifest labels go up to {labels.max()} but the checkpoint "
            f"has {model_config.class_count} classes"
        )
    names = model_config.class_names or infer_class_names(manifest)
    images = _load_images(manifest)
    report = _evaluate_images(params, model_config, images, labels, names)
    return MetricsReport(
        overall_accuracy=report.overall_accuracy,
        macro_f1=report.macro_f1,
        weighted_f1=report.weighted_f1,
        per_class=report.per_class,
        matrix=report.matrix,
        architecture=model_config.architecture_label(),
        loss_name=loss_name,
        focus_class=focus_class or (names[-1] if names else ""),
    )


def evaluate_checkpoint(
    checkpoint_path: str | Path,
    manifest_path: str | Path,
    out_dir: str | Path | None = None,
    formats: tuple[str, ...] = ("json", "csv", "markdown"),
    focus_class: str = "",
) -> MetricsReport:
    """Load a checkpoint, evaluate a manifest, and write report artifacts."""
    data = load_checkpoint(checkpoint_path)
    if data.config is None or "model" not in data.config:
        raise TrainingError(
            f"checkpoint {checkpoint_path} carries no model configuration"
        )
    model_config = EnsembleConfig.from_dict(data.config["model"])
    params = {
        name: ad.Tensor(arr, requires_grad=False, name=name)
        for name, arr in data.params.items()
    }
    manifest = read_manifest(manifest_path)
    report = evaluate(
        params,
        model_config,
        manifest,
        loss_name=str(data.config.get("loss_kind", "")),
        focus_class=focus_class,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if "json" in formats:
            (out_dir / "metrics.json").write_text(report_emit(report, "json"))
        if "csv" in formats:
            (out_dir / "metrics.csv").write_text(report_emit(report, "csv"))
            (out_dir / "matrix.csv").write_text(matrix_to_csv(report.matrix))
        if "markdown" in formats:
            (out_dir / "report.md").write_text(report_emit(report, "markdown"))
    return report
