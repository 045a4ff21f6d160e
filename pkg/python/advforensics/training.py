"""Training engine: balanced sampling, the GRL-coupled step, schedule and early stopping.

The generator, the classifier and both discriminators share one Adam
optimizer. Opposing objectives live inside the gradient: each discriminator
minimises its own loss, and the gradient reversal nodes in front of them send
the negated, lambda-scaled gradient into the generator.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .autodiff import (
    RampState,
    forgery_adversarial_loss,
    identity_hard_label_loss,
    identity_similarity_loss,
    ramp_lambda,
    total_loss,
)
from .core import (
    AdversarialConfig,
    FeatureBatch,
    ForgeryMode,
    IdentityMode,
    SampleRecord,
    Split,
    component_rng,
    is_finite,
    seed_everything,
)
from .data import FrameStore, Manifest, PreprocessSpec
from .errors import ConfigError, DataError, NumericalError
from .evaluation import accuracy, roc_auc, run_inference
from .identity import (
    derive_pseudo_identity_labels,
    embed_records,
    supervision_from_embeddings,
    with_identity_labels,
)
from .networks import AdversarialDetector, build_model, link_checkpoint, load_checkpoint, save_checkpoint
from .runs import RunDirectory

logger = logging.getLogger(__name__)

LR_FLOOR = 1e-3


@dataclass(frozen=True)
class TrainState:
    iteration: int
    ramp: RampState
    best_val_metric: float = float("-inf")
    checks_since_improvement: int = 0
    n_checks: int = 0
    best_iteration: Optional[int] = None

    @classmethod
    def initial(cls, cfg: AdversarialConfig) -> "TrainState":
        return cls(0, RampState(0, cfg.total_iters, cfg.gamma))

    def replace(self, **changes) -> "TrainState":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "iteration": self.iteration,
            "ramp": dataclasses.asdict(self.ramp),
            "best_val_metric": self.best_val_metric,
            "checks_since_improvement": self.checks_since_improvement,
            "n_checks": self.n_checks,
            "best_iteration": self.best_iteration,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainState":
        data = dict(data)
        data["ramp"] = RampState(**data["ramp"])
        return cls(**data)


@dataclass(frozen=True)
class StepMetrics:
    iteration: int
    l_cls: float
    l_f: float
    l_id: float
    l_tol: float
    lam: float
    lr: float

    def to_json(self) -> str:
        return json.dumps({
            "iteration": self.iteration,
            "l_cls": self.l_cls,
            "l_f": self.l_f,
            "l_id": self.l_id,
            "l_tol": self.l_tol,
            "lambda": self.lam,
            "lr": self.lr,
        })


@dataclass(frozen=True)
class ValMetrics:
    iteration: int
    check: int
    val_auc: float
    val_acc: float
    improved: bool

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def sample_balanced_batch(records: Sequence[SampleRecord], batch_size: int,
                          rng: np.random.Generator) -> List[SampleRecord]:
    """Half REAL, half FAKE, each drawn uniformly without replacement, then shuffled."""
    if batch_size <= 0 or batch_size % 2:
        raise ConfigError(f"batch_size must be a positive even number, got {batch_size}")
    half = batch_size // 2
    reals = [r for r in records if not r.is_fake]
    fakes = [r for r in records if r.is_fake]
    if len(reals) < half or len(fakes) < half:
        raise DataError(
            f"balanced batch of {batch_size} needs {half} real and {half} fake records; "
            f"have {len(reals)} real and {len(fakes)} fake"
        )
    chosen = [reals[i] for i in rng.choice(len(reals), size=half, replace=False)]
    chosen += [fakes[i] for i in rng.choice(len(fakes), size=half, replace=False)]
    order = rng.permutation(batch_size)
    return [chosen[i] for i in order]


def learning_rate(iteration: int, total_iters: int, base_lr: float) -> float:
    """Linear decay to zero, floored at ``base_lr * 1e-3``."""
    frac = 1.0 - min(iteration, total_iters) / total_iters
    return max(base_lr * frac, base_lr * LR_FLOOR)


def epoch_length(n_train: int, batch_size: int) -> int:
    return max(1, math.ceil(n_train / batch_size))


def check_interval(n_train: int, cfg: AdversarialConfig) -> int:
    return max(1, epoch_length(n_train, cfg.batch_size) // cfg.val_checks_per_epoch)


def update_early_stopping(state: TrainState, val_acc: float, cfg: AdversarialConfig) -> Tuple[TrainState, bool, bool]:
    """Apply one validation result; returns ``(state, improved, should_stop)``.

    Flat checks before ``stop_warmup * total_iters`` do not count towards
    patience, so the reversal ramp gets going before training can stop.
    """
    improved = val_acc > state.best_val_metric + cfg.min_improvement
    counting = state.iteration >= cfg.stop_warmup * cfg.total_iters
    if improved:
        state = state.replace(best_val_metric=val_acc, checks_since_improvement=0,
                              best_iteration=state.iteration, n_checks=state.n_checks + 1)
    elif counting:
        state = state.replace(checks_since_improvement=state.checks_since_improvement + 1,
                              n_checks=state.n_checks + 1)
    else:
        state = state.replace(n_checks=state.n_checks + 1)
    should_stop = state.checks_since_improvement >= cfg.patience or state.iteration >= cfg.total_iters
    return state, improved, should_stop


class Trainer:
    """Owns the model, optimizer, RNG streams and run directory of one run."""

    def __init__(self, cfg: AdversarialConfig, manifest: Manifest, run_dir: Optional[RunDirectory] = None,
                 oracle=None, train_records: Optional[Sequence[SampleRecord]] = None,
                 val_records: Optional[Sequence[SampleRecord]] = None, quiet: bool = False):
        self.cfg = cfg.require_valid()
        self.manifest = manifest
        self.run_dir = run_dir
        self.oracle = oracle
        self.quiet = quiet
        seed_everything(cfg.seed)

        train = list(train_records) if train_records is not None else manifest.split(Split.TRAIN)
        val = list(val_records) if val_records is not None else manifest.split(Split.VAL)
        train = [r for r in train if r.split is Split.TRAIN]
        if not train:
            raise DataError("no TRAIN records")
        self._check_labels(train)
        if cfg.identity_mode is IdentityMode.SIMILARITY and oracle is None:
            raise ConfigError("identity_mode=similarity needs an embedding oracle")
        if cfg.identity_mode is IdentityMode.PSEUDO_LABEL:
            if oracle is None:
                raise ConfigError("identity_mode=pseudo_label needs an embedding oracle")
            labels = derive_pseudo_identity_labels(train, oracle, cfg.n_identities, cfg.seed)
            train = with_identity_labels(train, labels)
            logger.info("Assigned %d pseudo identity labels over %d TRAIN records", cfg.n_identities, len(train))
        self.train_records = train
        self.val_records = val

        preprocess = PreprocessSpec(output_size=cfg.image_size)
        self.store = FrameStore(manifest, preprocess)
        self.model: AdversarialDetector = build_model(cfg)
        self.model.train()
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.base_lr)
        self.sampler_rng = component_rng(cfg.seed, "sampler")
        self.state = TrainState.initial(cfg)
        self.interval = check_interval(len(train), cfg)
        self._embeddings: Dict[str, np.ndarray] = {}

    def _check_labels(self, train: Sequence[SampleRecord]) -> None:
        cfg = self.cfg
        for r in train:
            if r.method_label is not None and r.method_label >= cfg.n_methods:
                raise DataError(f"sample {r.image_path!r} method {r.method_label} >= n_methods={cfg.n_methods}")
            if cfg.identity_mode is IdentityMode.HARD_LABEL:
                if r.identity_label is None:
                    raise DataError(f"sample {r.image_path!r} has no identity label in hard-label mode")
                if r.identity_label >= cfg.n_identities:
                    raise DataError(
                        f"sample {r.image_path!r} identity {r.identity_label} >= n_identities={cfg.n_identities}"
                    )

    # -- identity supervision ------------------------------------------------

    def _batch_embeddings(self, records: Sequence[SampleRecord]) -> np.ndarray:
        missing = [r for r in records if r.image_path not in self._embeddings]
        if missing:
            for r, vec in zip(missing, embed_records(self.oracle, missing)):
                self._embeddings[r.image_path] = vec
        return np.stack([self._embeddings[r.image_path] for r in records])

    # -- one optimisation step -------------------------------------------------

    def train_step(self, batch: Sequence[SampleRecord]) -> StepMetrics:
        cfg = self.cfg
        model = self.model
        device = next(model.parameters()).device
        lam = ramp_lambda(self.state.ramp)
        lr = learning_rate(self.state.iteration, cfg.total_iters, cfg.base_lr)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        model.set_lambda(lam)

        images = self.store.batch(batch).to(device)
        binary = torch.tensor([r.binary_label.as_int for r in batch], dtype=torch.long, device=device)
        fb = FeatureBatch(
            features=model.encode(images),
            binary_labels=binary,
            method_labels=tuple(r.method_label for r in batch),
            identity_labels=tuple(r.identity_label for r in batch),
            sample_ids=tuple(r.image_path for r in batch),
        )
        z = fb.features
        l_cls = F.cross_entropy(model.classify(z), fb.binary_labels)

        zero = z.sum() * 0.0
        l_f = zero
        if cfg.forgery_mode is ForgeryMode.ON:
            methods = torch.tensor([m for m in fb.method_labels if m is not None], dtype=torch.long, device=device)
            logits = model.discriminate_forgery(z[fb.fake_mask])
            l_f = forgery_adversarial_loss(logits, methods)

        l_id = zero
        if cfg.identity_mode is IdentityMode.SIMILARITY:
            sup = supervision_from_embeddings(self._batch_embeddings(batch), cfg.tau)
            preds = model.discriminate_identity(z)
            l_id = identity_similarity_loss(preds, sup.label_tensor(device), cfg.alpha, cfg.beta,
                                            normalize=cfg.normalize_pair_loss)
        elif cfg.identity_mode in (IdentityMode.HARD_LABEL, IdentityMode.PSEUDO_LABEL):
            logits = model.discriminate_identity(z)
            l_id = identity_hard_label_loss(logits, list(fb.identity_labels), list(fb.sample_ids))

        l_tol = total_loss(l_cls, l_f, l_id, cfg)
        values = {"l_cls": l_cls.item(), "l_f": l_f.item(), "l_id": l_id.item(), "l_tol": l_tol.item()}
        for term, value in values.items():
            if not is_finite(value):
                raise NumericalError(term, value)

        self.optimizer.zero_grad(set_to_none=True)
        l_tol.backward()
        self.optimizer.step()

        step = self.state.iteration
        self.state = self.state.replace(iteration=step + 1, ramp=self.state.ramp.advance())
        metrics = StepMetrics(step, values["l_cls"], values["l_f"], values["l_id"],
                              values["l_tol"], lam, lr)
        if self.run_dir is not None:
            with open(self.run_dir.metrics_path, "a", encoding="utf-8") as f:
                f.write(metrics.to_json() + "\n")
        return metrics

    # -- validation ------------------------------------------------------------

    def validation_check(self) -> Tuple[TrainState, bool, ValMetrics]:
        if not self.val_records:
            raise ConfigError("validation split is empty")
        scores = run_inference(self.model, self.store, self.val_records)
        labels = [r.binary_label.as_int for r in self.val_records]
        val_acc = accuracy(scores, labels)
        val_auc = roc_auc(scores, labels)
        self.state, improved, should_stop = update_early_stopping(self.state, val_acc, self.cfg)
        metrics = ValMetrics(self.state.iteration, self.state.n_checks, val_auc, val_acc, improved)
        if self.run_dir is not None:
            with open(self.run_dir.val_log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps({
                    **metrics.to_dict(),
                    "best_val_acc": self.state.best_val_metric,
                    "checks_since_improvement": self.state.checks_since_improvement,
                }) + "\n")
            path = self.save()
            if improved:
                link_checkpoint(path, self.run_dir.best_checkpoint)
        logger.info("check %d @ iter %d: val acc %.4f auc %.4f%s", metrics.check, metrics.iteration,
                    val_acc, val_auc, " (best)" if improved else "")
        return self.state, should_stop, metrics

    # -- checkpoints -----------------------------------------------------------

    def save(self) -> Path:
        if self.run_dir is None:
            raise ConfigError("no run directory to save into")
        path = self.run_dir.checkpoint_dir / f"ckpt-{self.state.iteration:06d}.pt"
        save_checkpoint(path, self.model, self.optimizer, {
            "train_state": self.state.to_dict(),
            "sampler_rng": self.sampler_rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "config_sha256": self.cfg.digest(),
        })
        link_checkpoint(path, self.run_dir.latest_checkpoint)
        self.run_dir.prune_checkpoints(self.cfg.keep_checkpoints)
        return path

    def restore(self, path: Path) -> None:
        payload = load_checkpoint(path)
        if payload.get("config_sha256") not in (None, self.cfg.digest()):
            raise ConfigError(f"checkpoint {path} belongs to a different config")
        self.model.load_state_dict(payload["model"])
        if payload.get("optimizer") is not None:
            self.optimizer.load_state_dict(payload["optimizer"])
        self.state = TrainState.from_dict(payload["train_state"])
        self.sampler_rng.bit_generator.state = payload["sampler_rng"]
        torch.set_rng_state(payload["torch_rng"])
        if self.run_dir is not None:
            # step lines carry the pre-step index, check lines the post-step one
            _truncate_jsonl(self.run_dir.metrics_path, lambda it: it < self.state.iteration)
            _truncate_jsonl(self.run_dir.val_log_path, lambda it: it <= self.state.iteration)
        logger.info("Resumed from %s at iteration %d", path, self.state.iteration)

    # -- full loop -------------------------------------------------------------

    def fit(self) -> TrainState:
        cfg = self.cfg
        start = self.state.iteration
        logger.info("Training %d iterations from %d (check every %d, forgery=%s, identity=%s)",
                    cfg.total_iters, start, self.interval, cfg.forgery_mode.value, cfg.identity_mode.value)
        should_stop = False
        with tqdm(total=cfg.total_iters, initial=start, desc="train", unit="it",
                  disable=self.quiet or None) as bar:
            while not should_stop and self.state.iteration < cfg.total_iters:
                batch = sample_balanced_batch(self.train_records, cfg.batch_size, self.sampler_rng)
                metrics = self.train_step(batch)
                bar.update(1)
                bar.set_postfix(l_tol=f"{metrics.l_tol:.4f}", lam=f"{metrics.lam:.3f}")
                at_end = self.state.iteration >= cfg.total_iters
                if self.val_records and (self.state.iteration % self.interval == 0 or at_end):
                    _, should_stop, _ = self.validation_check()
        if self.run_dir is not None and not self.val_records:
            self.save()
        logger.info("Stopped at iteration %d (best val acc %.4f at %s)", self.state.iteration,
                    self.state.best_val_metric, self.state.best_iteration)
        return self.state


def _truncate_jsonl(path: Path, keep) -> None:
    if not path.exists():
        return
    kept = [line for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip() and keep(json.loads(line)["iteration"])]
    path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")


def load_trained_model(run_dir: RunDirectory, which: str = "best") -> Tuple[AdversarialDetector, AdversarialConfig, Path]:
    """Rebuild the model of a finished run from its best (or latest) checkpoint."""
    cfg = run_dir.load_config()
    path = run_dir.best_checkpoint if which == "best" else run_dir.latest_checkpoint
    if not path.exists():
        path = run_dir.latest_checkpoint
    payload = load_checkpoint(path)
    model = build_model(cfg)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, cfg, path


@dataclass(frozen=True)
class TauSweepResult:
    tau: float
    best_val_acc: float
    run_dir: str


def sweep_tau(cfg: AdversarialConfig, manifest: Manifest, grid: Sequence[float], run_root: Path,
              oracle, quiet: bool = True) -> Tuple[float, List[TauSweepResult]]:
    """Train one similarity-mode run per tau and keep the tau with the best validation accuracy."""
    if not grid:
        raise ConfigError("tau grid is empty")
    results: List[TauSweepResult] = []
    for tau in grid:
        run_cfg = cfg.replace(tau=float(tau), identity_mode=IdentityMode.SIMILARITY)
        run_dir = RunDirectory(Path(run_root) / f"tau-{tau:+.4f}")
        run_dir.create(run_cfg)
        state = Trainer(run_cfg, manifest, run_dir, oracle=oracle, quiet=quiet).fit()
        results.append(TauSweepResult(float(tau), state.best_val_metric, str(run_dir.path)))
        logger.info("tau=%.4f: best val acc %.4f", tau, state.best_val_metric)
    best = max(results, key=lambda r: (r.best_val_acc, -abs(r.tau - cfg.tau)))
    return best.tau, results
