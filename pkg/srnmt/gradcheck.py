"""Central-difference verification of every tape gradient, per named parameter."""

import logging
from typing import Optional

import numpy as np

from config import Config
from models import GradCheckReport, GradCheckResult, ModelConfig
from srnmt.data_toolkit import Batch, make_batch
from srnmt.errors import ConfigurationError
from srnmt.seq2seq_model import Seq2SeqModel
from srnmt.tensor import Tape

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return np.abs(analytic - numeric) / scale


def random_batch(config: ModelConfig, T_src: int = 4, T_tgt: int = 4, batch_size: int = 2,
                 seed: int = 0) -> Batch:
    """Random ids with one row shorter than the rest, so padding is exercised"""
    rng = np.random.default_rng(seed)
    first = len(Config.RESERVED_TOKENS)
    pairs = []
    for row in range(batch_size):
        src_len = T_src if row == 0 else max(1, T_src - row)
        tgt_len = max(1, T_tgt - 1) if row == 0 else max(1, T_tgt - 1 - row)
        pairs.append((rng.integers(first, config.src_vocab_size, size=src_len).tolist(),
                      rng.integers(first, config.tgt_vocab_size, size=tgt_len).tolist()))
    return make_batch(pairs)


def _loss(model: Seq2SeqModel, batch: Batch) -> float:
    loss, _ = model.forward_loss(batch, training=False)
    return float(loss.item())


def check_gradients(model: Seq2SeqModel, batch: Batch, tolerance: float = DEFAULT_TOLERANCE,
                    step: float = DEFAULT_STEP, max_entries: Optional[int] = None,
                    seed: int = 0) -> GradCheckReport:
    """Compare tape gradients with central differences entry by entry.

    ``max_entries`` samples that many entries per parameter instead of visiting all of them.
    """
    if model.dtype != np.float64:
        logger.warning("Gradient check on %s parameters; float64 is expected for tight tolerances", model.dtype)
    model.zero_grad()
    with Tape() as tape:
        loss, _ = model.forward_loss(batch, training=False)
        tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
        for name, p in model.named_parameters().items()
    }

    rng = np.random.default_rng(seed)
    results = []
    for name, param in model.named_parameters().items():
        param.values = np.ascontiguousarray(param.values)
        flat = param.values.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(indices))
        for k, i in enumerate(indices):
            original = flat[i]
            flat[i] = original + step
            plus = _loss(model, batch)
            flat[i] = original - step
            minus = _loss(model, batch)
            flat[i] = original
            numeric[k] = (plus - minus) / (2.0 * step)
        errors = relative_error(analytic[name].reshape(-1)[indices], numeric)
        worst = float(errors.max()) if errors.size else 0.0
        results.append(GradCheckResult(parameter=name, max_rel_error=worst, passed=worst <= tolerance))
        logger.debug("%s: max relative error %.3e", name, worst)

    worst_result = max(results, key=lambda r: r.max_rel_error)
    report = GradCheckReport(
        results=results,
        tolerance=tolerance,
        passed=all(r.passed for r in results),
        worst_parameter=worst_result.parameter,
        worst_error=worst_result.max_rel_error,
    )
    logger.info("Gradient check %s; worst %s at %.3e",
                "passed" if report.passed else "FAILED", report.worst_parameter, report.worst_error)
    return report


def perturb_parameters(model: Seq2SeqModel, scale: float = 0.1, seed: int = 0):
    """Add N(0, scale) noise everywhere so zero-initialised vectors do not hide gradient paths"""
    rng = np.random.default_rng([seed, 7])
    for param in model.named_parameters().values():
        param.values = param.values + rng.normal(0.0, scale, size=param.shape).astype(param.dtype)


def run_gradcheck(config: ModelConfig, tolerance: float = DEFAULT_TOLERANCE, T_src: int = 4, T_tgt: int = 4,
                  batch_size: int = 2, max_entries: Optional[int] = None) -> GradCheckReport:
    if config.d > Config.GRADCHECK_MAX_WIDTH or max(T_src, T_tgt) > Config.GRADCHECK_MAX_LEN:
        raise ConfigurationError(
            f"gradient check needs d <= {Config.GRADCHECK_MAX_WIDTH} and T <= {Config.GRADCHECK_MAX_LEN}, "
            f"got d={config.d} T={max(T_src, T_tgt)}"
        )
    model = Seq2SeqModel(config.model_copy(update={"precision": "float64", "dropout_p": 0.0}))
    perturb_parameters(model, seed=config.seed)
    batch = random_batch(config, T_src, T_tgt, batch_size, seed=config.seed)
    return check_gradients(model, batch, tolerance, max_entries=max_entries, seed=config.seed)
