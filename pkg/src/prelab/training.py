"""Training loop: batch assembly, the regularized training step, and the
per-step CSV log."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset, pad_answers
from .model import (MllmConfig, MllmParams, check_finite_losses, encode_image,
                    llm_forward, total_loss)
from .numerics import RngStream
from .optim import AdamW, WarmupCosine, grad_norm

LOG_HEADER = "step,lm_loss,pre_loss,total_loss,grad_norm,wall_time"


@dataclass
class Batch:
    z: np.ndarray        # [B, N_p, d_v]
    prompts: np.ndarray  # [B, prompt_len]
    answers: np.ndarray  # [B, K]


@dataclass
class StepReport:
    step: int
    lm: float
    pre: float  # nan when the auxiliary loss is disabled
    total: float
    grad_norm: float
    wall_time: float

    def csv_row(self) -> str:
        return (f"{self.step},{self.lm!r},{self.pre!r},{self.total!r},"
                f"{self.grad_norm!r},{self.wall_time:.6f}")


def make_batch(params: MllmParams, cfg: MllmConfig, examples) -> Batch:
    images = np.stack([ex.image for ex in examples])
    z = encode_image(params, images)
    prompts = np.stack([ex.prompt for ex in examples])
    answers = pad_answers([ex.answer for ex in examples], cfg.max_answer)
    return Batch(z=z, prompts=prompts, answers=answers)


def train_step(params: MllmParams, opt: AdamW, batch: Batch) -> StepReport:
    """One optimization step: forward, both losses, backward, AdamW update.

    Aborts with a diagnostic naming the offending loss component if any
    value goes non-finite.
    """
    if batch.z.shape[0] == 0:
        raise ValueError("empty batch")
    t0 = time.perf_counter()
    trace = llm_forward(params, batch.z, batch.prompts, batch.answers)
    total, lm, pre = total_loss(trace, batch.answers, params)
    check_finite_losses(lm, pre, total)
    opt.zero_grad()
    ad.backward(total)
    gnorm = grad_norm(opt.params)
    opt.step()
    wall = time.perf_counter() - t0
    return StepReport(step=opt.step_count, lm=float(lm.value),
                      pre=float(pre.value) if pre is not None else float("nan"),
                      total=float(total.value), grad_norm=gnorm, wall_time=wall)


class Trainer:
    """Deterministic single-threaded trainer over a generated dataset.

    Batch sampling draws uniformly (with replacement) from the train split
    using a stream keyed only by the run seed, so two configs with the same
    seed see identical batches.
    """

    def __init__(self, cfg: MllmConfig, dataset: Dataset, steps: int,
                 batch_size: int = 8, lr: float = 3e-4, weight_decay: float = 0.0,
                 warmup_frac: float = 0.03, use_schedule: bool = True):
        cfg.validate()
        if dataset.vocab_size != cfg.vocab:
            raise ValueError(f"dataset vocab {dataset.vocab_size} != model vocab {cfg.vocab}")
        if dataset.spec.grid != cfg.grid or dataset.spec.patch != cfg.patch:
            raise ValueError("dataset patch grid does not match the model configuration")
        self.cfg = cfg
        self.dataset = dataset
        self.steps = steps
        self.batch_size = batch_size
        self.params = MllmParams(cfg)
        schedule = WarmupCosine(lr, steps, warmup_frac) if use_schedule else None
        self.opt = AdamW(self.params.trainable(), lr=lr, weight_decay=weight_decay,
                         schedule=schedule)
        self.batch_rng = RngStream(cfg.seed).split("batches")
        self.train_examples = dataset.splits["train"]
        if not self.train_examples:
            raise ValueError("train split is empty")

    def sample_batch(self) -> Batch:
        idx = self.batch_rng.integers(0, len(self.train_examples), size=self.batch_size)
        return make_batch(self.params, self.cfg, [self.train_examples[i] for i in idx])

    def run(self, log_path=None, fixed_batch: Batch = None, on_step=None) -> list:
        """Run self.steps optimization steps; returns the list of StepReports
        and optionally streams them to a CSV log."""
        reports = []
        log_file = None
        if log_path is not None:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            log_file = open(log_path, "w")
            log_file.write(LOG_HEADER + "\n")
        try:
            for _ in range(self.steps):
                batch = fixed_batch if fixed_batch is not None else self.sample_batch()
                report = train_step(self.params, self.opt, batch)
                reports.append(report)
                if log_file is not None:
                    log_file.write(report.csv_row() + "\n")
                if on_step is not None:
                    on_step(report)
        finally:
            if log_file is not None:
                log_file.close()
        return reports
