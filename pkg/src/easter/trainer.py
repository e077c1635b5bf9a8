"""Training orchestration against (weighted) CTC.

Everything random in a step (batch composition, augmentation, dropout) is
derived from ``(seed, step)``, so a run restored from its state file
continues exactly as the uninterrupted run would.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import augment as aug
from . import tensor as tn
from .ctc import Vocabulary, ctc_loss, is_feasible, weighted_ctc_loss
from .datagen import read_manifest
from .errors import ConfigurationError, DataError, TrainingDivergedError
from .images import INPUT_HEIGHT, normalize, pad_batch, read_image, resize_to_height, to_grayscale
from .metrics import evaluate
from .model import EasterModel, ModelConfig, _encode, build, save_checkpoint, transcribe

log = logging.getLogger(__name__)

METRICS_FIELDS = ("step", "train_loss", "val_cer", "val_wer", "wall_time")
STATE_NAME = "state.npz"
BEST_NAME = "best.estr"
LAST_NAME = "last.estr"
METRICS_NAME = "metrics.csv"


@dataclass
class TrainingConfig:
    train_manifest: str
    val_manifest: str | None = None
    vocab: str = "printed"
    model: dict = field(default_factory=lambda: {"preset": "3x3"})
    batch_size: int = 16
    max_steps: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 1.0
    decay_steps: int = 1000
    weighted_ctc_alpha: float | None = None
    augment: dict | str | None = None
    eval_interval: int = 100
    max_val_samples: int | None = None
    target_cer: float | None = None
    checkpoint_dir: str = "runs/default"
    grad_clip: float = 5.0
    seed: int = 0

    def validate(self) -> "TrainingConfig":
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be > 0")
        if self.max_steps < 0 or self.eval_interval < 1:
            raise ConfigurationError("max_steps must be >= 0 and eval_interval >= 1")
        if self.weighted_ctc_alpha is not None and not 0.0 < self.weighted_ctc_alpha < 1.0:
            raise ConfigurationError("weighted_ctc_alpha must be in (0, 1) or null")
        self.pipeline()
        return self

    def pipeline(self) -> aug.AugmentPipeline:
        if self.augment == "default":
            return aug.default_pipeline()
        if isinstance(self.augment, str):
            raise ConfigurationError(f"unknown augmentation preset {self.augment!r}")
        return aug.AugmentPipeline.from_dict(self.augment)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model, Vocabulary.named(self.vocab))

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "TrainingConfig":
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigurationError(f"unknown training config keys {sorted(extra)}")
        if "train_manifest" not in d:
            raise ConfigurationError("train_manifest is required")
        d = dict(d)
        if base_dir is not None:
            for key in ("train_manifest", "val_manifest", "checkpoint_dir"):
                if d.get(key) is not None:
                    d[key] = str(Path(base_dir) / d[key])
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "TrainingConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read training config {path}: {exc}") from None
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray
    text: str


@dataclass
class Batch:
    images: np.ndarray
    widths: list
    lengths: list
    labels: list
    texts: list
    ids: list


def load_samples(manifest) -> list[Sample]:
    return [Sample(r.sample_id, read_image(r.path), r.text) for r in read_manifest(manifest)]


def make_batch(samples, vocab: Vocabulary, stride: int = 2, height: int = INPUT_HEIGHT) -> Batch:
    """Grayscale, rescale to ``height`` (aspect kept), pad to the widest sample with background."""
    if not samples:
        raise DataError("empty batch")
    images, labels = [], []
    for s in samples:
        missing = vocab.missing(s.text)
        if missing:
            raise DataError(f"sample {s.sample_id}: characters {sorted(missing)} are not in the vocabulary")
        labels.append(vocab.encode(s.text))
        images.append(normalize(resize_to_height(to_grayscale(s.image), height)))
    x, widths = pad_batch(images)
    return Batch(x, widths, [-(-w // stride) for w in widths], labels, [s.text for s in samples],
                 [s.sample_id for s in samples])


class Adam:
    """First-order adaptive moment estimation with bias correction."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= scale
    return norm


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    used: int
    skipped: int


@dataclass
class TrainState:
    model: EasterModel
    optimizer: Adam
    seed: int = 0
    step: int = 0
    best_cer: float = math.inf
    skipped: int = 0
    loss_sum: float = 0.0
    loss_count: int = 0
    wall_time: float = 0.0
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, config: TrainingConfig) -> "TrainState":
        model = build(config.model_config(), np.random.default_rng([config.seed, 0]))
        opt = Adam(model.params, config.lr, config.beta1, config.beta2, config.adam_eps)
        return cls(model, opt, config.seed)

    def save(self, path) -> None:
        path = Path(path)
        meta = {
            "seed": self.seed,
            "step": self.step,
            "best_cer": None if math.isinf(self.best_cer) else self.best_cer,
            "skipped": self.skipped,
            "loss_sum": self.loss_sum,
            "loss_count": self.loss_count,
            "wall_time": self.wall_time,
            "adam_t": self.optimizer.t,
            "history": self.history,
        }
        arrays = {"meta": np.array(json.dumps(meta)), "checkpoint": np.frombuffer(_encode(self.model), dtype=np.uint8)}
        for k in self.model.params:
            arrays["m/" + k] = self.optimizer.m[k]
            arrays["v/" + k] = self.optimizer.v[k]
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(buf.getvalue())
        tmp.replace(path)

    @classmethod
    def load(cls, path, config: TrainingConfig) -> "TrainState":
        from .model import load_checkpoint_bytes

        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            model = load_checkpoint_bytes(z["checkpoint"].tobytes(), source=str(path))
            opt = Adam(model.params, config.lr, config.beta1, config.beta2, config.adam_eps)
            for k in model.params:
                opt.m[k][...] = z["m/" + k]
                opt.v[k][...] = z["v/" + k]
        opt.t = meta["adam_t"]
        best = meta["best_cer"]
        return cls(
            model, opt, meta["seed"], meta["step"], math.inf if best is None else best, meta["skipped"],
            meta["loss_sum"], meta["loss_count"], meta["wall_time"], meta["history"],
        )


def _losses(lattices, batch: Batch, alpha):
    kept, skipped = [], []
    for lat, label, sid in zip(lattices, batch.labels, batch.ids):
        if not is_feasible(label, lat.valid_length):
            skipped.append(sid)
            continue
        kept.append(ctc_loss(lat, label) if alpha is None else weighted_ctc_loss(lat, label, alpha))
    return kept, skipped


def train_step(state: TrainState, batch: Batch, config: TrainingConfig, rng: np.random.Generator | None = None,
               diagnostics_dir=None) -> StepResult:
    """One optimizer update on the mean per-sample loss of ``batch``."""
    model = state.model.train()
    rng = rng if rng is not None else np.random.default_rng([config.seed, state.step, 2])
    for p in model.parameters():
        p.grad = np.zeros_like(p.data)
    lattices = model.forward_padded(batch.images, batch.widths, rng)
    kept, skipped = _losses(lattices, batch, config.weighted_ctc_alpha)
    for sid in skipped:
        log.warning("skipping %s: label does not fit the lattice", sid)
    state.skipped += len(skipped)
    state.step += 1
    if not kept:
        return StepResult(float("nan"), 0.0, 0, len(skipped))
    total = kept[0]
    for term in kept[1:]:
        total = total + term
    loss = total * (1.0 / len(kept))
    value = loss.item()
    if not math.isfinite(value):
        _dump_diagnostics(diagnostics_dir, state, batch, [k.item() for k in kept])
        raise TrainingDivergedError(f"non-finite loss {value} at step {state.step}")
    tn.backward(loss)
    norm = clip_grad_norm(model.parameters(), config.grad_clip)
    if not math.isfinite(norm):
        _dump_diagnostics(diagnostics_dir, state, batch, [k.item() for k in kept])
        raise TrainingDivergedError(f"non-finite gradient norm at step {state.step}")
    lr = config.lr * config.lr_decay ** (state.step / max(1, config.decay_steps))
    state.optimizer.step(lr)
    return StepResult(value, norm, len(kept), len(skipped))


def _dump_diagnostics(directory, state, batch, losses) -> None:
    if directory is None:
        return
    path = Path(directory) / f"diverged_step{state.step}.json"
    info = {
        "step": state.step,
        "sample_ids": batch.ids,
        "texts": batch.texts,
        "widths": batch.widths,
        "losses": losses,
        "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in state.model.params.items()},
    }
    path.write_text(json.dumps(info, indent=2), encoding="utf-8")
    log.error("wrote diagnostics to %s", path)


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> list[int]:
    """Sample indices for ``step``: a fresh seeded permutation per epoch, read sequentially."""
    out = []
    perms = {}
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch, i = divmod(pos, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch, 1]).permutation(n)
        out.append(int(perms[epoch][i]))
    return out


def step_batch(samples, step: int, config: TrainingConfig, vocab: Vocabulary, pipeline, stride: int) -> Batch:
    idx = batch_indices(step, len(samples), config.batch_size, config.seed)
    chosen = []
    for j, i in enumerate(idx):
        s = samples[i]
        image = s.image
        if pipeline.ops:
            image = aug.apply(pipeline, to_grayscale(image), [config.seed, step, j, 3])
        chosen.append(Sample(s.sample_id, image, s.text))
    return make_batch(chosen, vocab, stride)


def evaluate_model(model: EasterModel, samples, batch_size: int = 32, fold_case: bool = False):
    hyps = transcribe(model, [s.image for s in samples], batch_size)
    return evaluate([s.text for s in samples], hyps, [s.sample_id for s in samples], fold_case)


def check_disjoint(train_manifest, val_manifest) -> None:
    if val_manifest is None:
        return
    if Path(train_manifest).resolve() == Path(val_manifest).resolve():
        raise DataError("train and validation manifests are the same file")
    train = {r.path for r in read_manifest(train_manifest)}
    shared = train & {r.path for r in read_manifest(val_manifest)}
    if shared:
        raise DataError(f"{len(shared)} validation images also appear in training, e.g. {sorted(shared)[0]}")


def _write_metrics(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


@dataclass
class FitResult:
    best_checkpoint: Path
    last_checkpoint: Path
    metrics_path: Path
    history: list
    state: TrainState


def fit(config: TrainingConfig, resume: bool = False, on_eval=None) -> FitResult:
    """Train until ``max_steps`` (or ``target_cer``); validate every ``eval_interval`` steps.

    ``on_eval(state, row)`` is called after each validation; returning True stops training.
    A KeyboardInterrupt saves the state file before propagating.
    """
    config.validate()
    out = Path(config.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    check_disjoint(config.train_manifest, config.val_manifest)
    vocab = Vocabulary.named(config.vocab)
    train = load_samples(config.train_manifest)
    if not train:
        raise DataError("training manifest is empty")
    for s in train:
        if vocab.missing(s.text):
            raise DataError(f"sample {s.sample_id}: characters {sorted(vocab.missing(s.text))} are not in the vocabulary")
    val = load_samples(config.val_manifest) if config.val_manifest else []
    if config.max_val_samples is not None:
        val = val[: config.max_val_samples]
    pipeline = config.pipeline()

    state_path = out / STATE_NAME
    if resume and state_path.exists():
        state = TrainState.load(state_path, config)
        log.info("resumed from %s at step %d", state_path, state.step)
    else:
        state = TrainState.fresh(config)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
    metrics_path = out / METRICS_NAME
    _write_metrics(metrics_path, state.history)
    stride = state.model.config.total_stride
    best_path, last_path = out / BEST_NAME, out / LAST_NAME

    try:
        while state.step < config.max_steps:
            t0 = time.perf_counter()
            batch = step_batch(train, state.step, config, vocab, pipeline, stride)
            result = train_step(state, batch, config, diagnostics_dir=out)
            if result.used:
                state.loss_sum += result.loss
                state.loss_count += 1
            state.wall_time += time.perf_counter() - t0
            if state.step % config.eval_interval == 0 or state.step == config.max_steps:
                row = _validate(state, val, metrics_path)
                cer = row["val_cer"]
                score = float(cer) if cer != "" else float(row["train_loss"] or "inf")
                if score < state.best_cer or not best_path.exists():
                    state.best_cer = min(score, state.best_cer)
                    save_checkpoint(state.model, best_path)
                save_checkpoint(state.model, last_path)
                state.save(state_path)
                log.info("step %d loss %s val_cer %s", state.step, row["train_loss"], row["val_cer"])
                stop = on_eval is not None and on_eval(state, row)
                if stop or (config.target_cer is not None and cer != "" and float(cer) <= config.target_cer):
                    break
    except KeyboardInterrupt:
        state.save(state_path)
        log.warning("interrupted at step %d; state saved to %s", state.step, state_path)
        raise
    if not best_path.exists():
        save_checkpoint(state.model, best_path)
    if not last_path.exists():
        save_checkpoint(state.model, last_path)
    return FitResult(best_path, last_path, metrics_path, state.history, state)


def _validate(state: TrainState, val, metrics_path: Path) -> dict:
    train_loss = state.loss_sum / state.loss_count if state.loss_count else None
    state.loss_sum, state.loss_count = 0.0, 0
    if val:
        report = evaluate_model(state.model, val)
        val_cer, val_wer = report.cer, report.wer
    else:
        val_cer = val_wer = None
    row = {
        "step": state.step,
        "train_loss": _fmt(train_loss),
        "val_cer": _fmt(val_cer),
        "val_wer": _fmt(val_wer),
        "wall_time": f"{state.wall_time:.3f}",
    }
    state.history.append(row)
    with open(metrics_path, "a", newline="", encoding="utf-8") as fh:
        csv.DictWriter(fh, fieldnames=METRICS_FIELDS, lineterminator="\n").writerow(row)
    return row
