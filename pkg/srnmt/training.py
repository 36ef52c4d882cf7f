"""Adam optimisation with the two-stage learning-rate restart keyed on validation perplexity."""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from models import DivergenceEvent, TrainConfig, TrainLogEntry, TrainResult
from srnmt.checkpoint import restore, snapshot
from srnmt.data_toolkit import Batch, prefetch
from srnmt.errors import ContractError, EmptyBatchError, GradientExplosion
from srnmt.seq2seq_model import Seq2SeqModel, perplexity
from srnmt.tensor import Tape, Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float
    beta1: float = Config.ADAM_BETA1
    beta2: float = Config.ADAM_BETA2
    eps: float = Config.ADAM_EPS
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState) -> Dict[str, Tensor]:
    """One bias-corrected Adam update in place. Raises GradientExplosion before touching anything
    when a gradient is non-finite."""
    for name, grad in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if grad.shape != params[name].shape:
            raise ContractError(f"{name}: gradient shape {grad.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise GradientExplosion(f"non-finite gradient for {name}", step=state.t + 1)

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, grad in grads.items():
        param = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.values)
            v = np.zeros_like(param.values)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.values = (param.values - update).astype(param.dtype)
    return params


class AdamOptimizer:
    """Adam over a model's named parameters, with state persistence for exact resumption"""

    def __init__(self, params: Dict[str, Tensor], lr: float,
                 beta1: float = Config.ADAM_BETA1, beta2: float = Config.ADAM_BETA2, eps: float = Config.ADAM_EPS):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float):
        self.state.lr = value

    def gradients(self) -> Dict[str, np.ndarray]:
        return {
            name: p.grad if p.grad is not None else np.zeros_like(p.values)
            for name, p in self.params.items()
        }

    def step(self, grads: Optional[Dict[str, np.ndarray]] = None):
        adam_step(self.params, self.gradients() if grads is None else grads, self.state)

    def reset(self, lr: Optional[float] = None):
        self.state = AdamState(lr=self.state.lr if lr is None else lr,
                               beta1=self.state.beta1, beta2=self.state.beta2, eps=self.state.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {
            "t": np.array(self.state.t, dtype=np.int64),
            "lr": np.array(self.state.lr, dtype=np.float64),
        }
        for name in self.state.m:
            out[f"m/{name}"] = self.state.m[name].copy()
            out[f"v/{name}"] = self.state.v[name].copy()
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        self.state.t = int(state["t"])
        self.state.lr = float(state["lr"])
        self.state.m, self.state.v = {}, {}
        for key, value in state.items():
            kind, _, name = key.partition("/")
            if kind not in ("m", "v"):
                continue
            if name not in self.params or value.shape != self.params[name].shape:
                raise ContractError(f"optimizer state {key} does not match the model parameters")
            getattr(self.state, kind)[name] = np.array(value)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as handle:
            np.savez(handle, **self.state_dict())

    def load(self, path):
        with np.load(path) as data:
            self.load_state_dict({key: data[key] for key in data.files})


def clip_or_flag(grads: Dict[str, np.ndarray], threshold: Optional[float] = None) -> Dict[str, np.ndarray]:
    """Finiteness check, plus global-norm rescaling when a threshold is given"""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise GradientExplosion(f"non-finite gradient for {name}")
    if threshold is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm <= threshold or norm == 0.0:
        return grads
    factor = threshold / norm
    return {name: (g * factor).astype(g.dtype) for name, g in grads.items()}


class PatienceTracker:
    """Counts validations without improvement over the best perplexity seen so far"""

    def __init__(self, patience: int, best: float = math.inf):
        self.patience = patience
        self.best = best
        self.bad = 0

    def update(self, ppl: float) -> bool:
        """Record one validation; True once `patience` consecutive validations failed to improve"""
        if ppl < self.best:
            self.best = ppl
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience


def evaluate_perplexity(model: Seq2SeqModel, batches: Sequence[Batch]) -> float:
    """Token-weighted perplexity, dropout off and no tape"""
    total_nll, total_tokens = 0.0, 0
    for batch in batches:
        loss, n_tokens = model.forward_loss(batch, training=False)
        total_nll += loss.item() * n_tokens
        total_tokens += n_tokens
    if total_tokens == 0:
        raise EmptyBatchError("validation set holds no target tokens")
    return perplexity(total_nll / total_tokens)


class Trainer:
    """Runs the stage loop over one model. Owns the optimizer, the best snapshot and the log file."""

    def __init__(self, model: Seq2SeqModel, config: TrainConfig, log_path=None, prefetch_depth: int = 4):
        self.model = model
        self.config = config
        self.prefetch_depth = prefetch_depth
        self.optimizer = AdamOptimizer(model.named_parameters(), config.lr_stage1)
        self.log_path = Path(log_path) if log_path else None
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
        self.entries: List[TrainLogEntry] = []
        self.events: List[DivergenceEvent] = []
        self.best_values: Optional[Dict[str, np.ndarray]] = None
        self.best_ppl = math.inf
        self.step_count = 0
        self._start = time.perf_counter()

    def _write(self, line: str):
        if self.log_path:
            with open(self.log_path, "a", encoding="utf-8") as handle:
                handle.write(line + "\n")

    def train_step(self, batch: Batch) -> Tuple[float, int]:
        """Forward, backward and update on one batch; raises GradientExplosion without updating"""
        self.model.zero_grad()
        with Tape() as tape:
            loss, n_tokens = self.model.forward_loss(batch, training=True)
            value = loss.item()
            if not math.isfinite(value):
                raise GradientExplosion(f"non-finite loss {value}")
            tape.backward(loss)
        grads = clip_or_flag(self.optimizer.gradients(), self.config.clip_threshold)
        self.optimizer.step(grads)
        return value, n_tokens

    def _batches(self, train) -> Iterator[Tuple[int, Batch]]:
        if hasattr(train, "epoch"):
            source = iter(train)
        else:
            batches = list(train)

            def cycle():
                index = 0
                while True:
                    for batch in batches:
                        yield index, batch
                    index += 1
            source = cycle()
        return prefetch(source, self.prefetch_depth) if self.prefetch_depth > 0 else source

    def train_loop(self, train, valid_batches: Sequence[Batch]) -> TrainResult:
        """Stage 1 at lr_stage1 until patience runs out, reload the best weights, then stage 2 at
        lr_stage2 under the same rule. The model ends holding the best weights seen."""
        if not valid_batches:
            raise EmptyBatchError("validation set is empty")
        cfg = self.config
        tracker = PatienceTracker(cfg.patience)
        stream = self._batches(train)
        status = "converged"
        consecutive_failures = 0
        window_loss, window_steps, window_tokens = 0.0, 0, 0
        window_start = time.perf_counter()
        current_epoch = None

        try:
            for stage in range(1, cfg.stages + 1):
                lr = cfg.lr_stage1 if stage == 1 else cfg.lr_stage2
                if stage > 1:
                    if self.best_values is not None:
                        restore(self.model, self.best_values)
                    if cfg.carry_optimizer_state:
                        self.optimizer.lr = lr
                    else:
                        self.optimizer.reset(lr)
                    tracker.bad = 0
                    logger.info("Stage %d: restarting from best ppl %.4f at lr %g", stage, tracker.best, lr)
                else:
                    self.optimizer.lr = lr

                stage_done = False
                while not stage_done:
                    if self.step_count >= cfg.max_steps:
                        status = "max_steps"
                        break
                    epoch, batch = next(stream)
                    validate = False
                    if current_epoch is not None and epoch != current_epoch and cfg.valid_interval is None:
                        validate = window_steps > 0
                    current_epoch = epoch

                    if validate:
                        stage_done = self._validate(tracker, valid_batches, stage, window_loss, window_steps,
                                                    window_tokens, window_start)
                        window_loss, window_steps, window_tokens = 0.0, 0, 0
                        window_start = time.perf_counter()
                        if stage_done:
                            break

                    self.step_count += 1
                    try:
                        loss, n_tokens = self.train_step(batch)
                    except GradientExplosion as exc:
                        consecutive_failures += 1
                        event = DivergenceEvent(step=self.step_count, reason=str(exc))
                        self.events.append(event)
                        self._write(event.to_line())
                        logger.warning("Step %d diverged: %s", self.step_count, exc)
                        if consecutive_failures >= cfg.divergence_limit:
                            logger.error("Failed to converge after %d divergent steps", consecutive_failures)
                            return self._result("failed_to_converge")
                        continue
                    consecutive_failures = 0
                    window_loss += loss
                    window_steps += 1
                    window_tokens += n_tokens
                    if cfg.log_interval and self.step_count % cfg.log_interval == 0:
                        logger.info("step %d loss %.4f lr %g", self.step_count, loss, self.optimizer.lr)

                    at_interval = cfg.valid_interval is not None and self.step_count % cfg.valid_interval == 0
                    at_limit = self.step_count >= cfg.max_steps
                    if at_interval or at_limit:
                        stage_done = self._validate(tracker, valid_batches, stage, window_loss, window_steps,
                                                    window_tokens, window_start)
                        window_loss, window_steps, window_tokens = 0.0, 0, 0
                        window_start = time.perf_counter()

                if status == "max_steps":
                    break
        finally:
            if hasattr(stream, "close"):
                stream.close()

        return self._result(status)

    def _validate(self, tracker: PatienceTracker, valid_batches, stage: int, window_loss: float,
                  window_steps: int, window_tokens: int, window_start: float) -> bool:
        ppl = evaluate_perplexity(self.model, valid_batches)
        elapsed = max(time.perf_counter() - window_start, 1e-9)
        stop = tracker.update(ppl if math.isfinite(ppl) else math.inf)
        if tracker.bad == 0:
            self.best_values = snapshot(self.model)
        entry = TrainLogEntry(
            step=self.step_count,
            loss=window_loss / max(window_steps, 1),
            ppl=ppl,
            lr=self.optimizer.lr,
            tok_per_s=window_tokens / elapsed,
            stage=stage,
            wall_time=time.perf_counter() - self._start,
        )
        self.entries.append(entry)
        self._write(entry.to_line())
        logger.info("[valid] step %d ppl %.4f best %.4f (%d/%d without improvement)",
                    self.step_count, ppl, tracker.best, tracker.bad, tracker.patience)
        self.best_ppl = tracker.best
        return stop

    def _result(self, status: str) -> TrainResult:
        if self.best_values is not None:
            restore(self.model, self.best_values)
        return TrainResult(
            status=status,
            best_ppl=self.best_ppl,
            steps=self.step_count,
            entries=list(self.entries),
            events=list(self.events),
        )


def train_loop(model: Seq2SeqModel, train, valid_batches: Sequence[Batch], config: TrainConfig,
               log_path=None, prefetch_depth: int = 4) -> TrainResult:
    return Trainer(model, config, log_path, prefetch_depth).train_loop(train, valid_batches)
