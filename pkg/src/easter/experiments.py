"""Desk-scale experiments shared by the acceptance suite and ``scripts/``."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import ALNUM_TEMPLATES, GeneratorConfig, generate_dataset
from .model import load_checkpoint
from .trainer import TrainingConfig, evaluate_model, fit, load_samples


@dataclass
class RunSummary:
    steps: int
    seconds: float
    cer: float
    exact_match: float
    history: list = field(default_factory=list)


def make_alnum_data(root, size: int, seed: int, name: str) -> Path:
    config = GeneratorConfig(templates=ALNUM_TEMPLATES, size=size, seed=seed, output_dir=str(Path(root) / name),
                             vocab="alnum")
    return generate_dataset(config, workers=1)


def overfit_smoke(root, size: int = 100, max_steps: int = 2000, target: float = 0.05, check_every: int = 100,
                  seed: int = 0, preset: str = "3x3", log=None) -> RunSummary:
    """Train on ``size`` samples until the training-set CER drops below ``target``."""
    manifest = make_alnum_data(root, size, seed + 1, "smoke")
    samples = load_samples(manifest)
    config = TrainingConfig(train_manifest=str(manifest), vocab="alnum", model={"preset": preset}, batch_size=16,
                            max_steps=max_steps, eval_interval=check_every, checkpoint_dir=str(Path(root) / "smoke_run"),
                            seed=seed)
    t0 = time.perf_counter()
    last = {}

    def on_eval(state, row):
        report = evaluate_model(state.model, samples)
        last.update(step=state.step, cer=report.cer, exact=report.exact_match)
        if log:
            log(f"step {state.step}: loss {row['train_loss']} train CER {report.cer:.4f}")
        return report.cer < target

    result = fit(config, on_eval=on_eval)
    return RunSummary(last["step"], time.perf_counter() - t0, last["cer"], last["exact"], result.history)


def desk_generalization(root, train_size: int = 2000, test_size: int = 200, max_steps: int = 6000,
                        eval_interval: int = 500, seed: int = 0, augment="default", alpha=None,
                        preset: str = "3x3", log=None) -> RunSummary:
    """Train on generated alphanumeric strings with augmentation; score the best checkpoint on held-out samples.

    Model selection uses a separate validation split, so the held-out test set is only read once.
    """
    train = make_alnum_data(root, train_size, 1000 + seed, "train")
    val = make_alnum_data(root, test_size, 2000 + seed, "val")
    test = make_alnum_data(root, test_size, 3000 + seed, "test")
    config = TrainingConfig(train_manifest=str(train), val_manifest=str(val), vocab="alnum", model={"preset": preset},
                            batch_size=16, max_steps=max_steps, augment=augment, weighted_ctc_alpha=alpha,
                            eval_interval=eval_interval, checkpoint_dir=str(Path(root) / "run"), seed=seed)
    t0 = time.perf_counter()

    def on_eval(state, row):
        if log:
            log(f"step {state.step}: loss {row['train_loss']} val CER {row['val_cer']} WER {row['val_wer']}")
        return False

    result = fit(config, on_eval=on_eval)
    report = evaluate_model(load_checkpoint(result.best_checkpoint), load_samples(test))
    return RunSummary(result.state.step, time.perf_counter() - t0, report.cer, report.exact_match, result.history)


def steps_to_threshold(root, alpha, seed: int, size: int = 200, threshold: float = 0.1, max_steps: int = 3000,
                       check_every: int = 100, preset: str = "3x3") -> int | None:
    """Training steps until the training-set CER reaches ``threshold`` (None if never)."""
    manifest = make_alnum_data(root, size, 7, f"wctc_{size}")
    samples = load_samples(manifest)
    tag = "plain" if alpha is None else f"a{alpha}"
    config = TrainingConfig(train_manifest=str(manifest), vocab="alnum", model={"preset": preset}, batch_size=16,
                            max_steps=max_steps, weighted_ctc_alpha=alpha, eval_interval=check_every,
                            checkpoint_dir=str(Path(root) / f"wctc_{tag}_s{seed}"), seed=seed)
    hit = {}

    def on_eval(state, row):
        if evaluate_model(state.model, samples).cer <= threshold:
            hit["step"] = state.step
            return True
        return False

    fit(config, on_eval=on_eval)
    return hit.get("step")
