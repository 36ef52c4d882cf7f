import itertools
import logging
from typing import Callable, List, Optional, Sequence

from models import AblationRow, ModelConfig, TrainConfig
from srnmt.data_toolkit import Batch
from srnmt.seq2seq_model import Seq2SeqModel, parameter_count
from srnmt.training import Trainer

logger = logging.getLogger(__name__)

FLAGS = ("use_layer_norm", "multi_attention", "use_highway")


def flag_combinations():
    """All eight on/off settings, full model first"""
    return [dict(zip(FLAGS, values)) for values in itertools.product((True, False), repeat=len(FLAGS))]


class AblationSweep:
    """Trains every component combination for a single stage and collects the final perplexities"""

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig,
                 train_batches_factory: Callable[[], object], valid_batches: Sequence[Batch],
                 log_dir: Optional[str] = None):
        self.model_config = model_config
        self.train_config = train_config.model_copy(update={"stages": 1})
        self.train_batches_factory = train_batches_factory
        self.valid_batches = valid_batches
        self.log_dir = log_dir

    def run_one(self, flags: dict) -> AblationRow:
        config = self.model_config.model_copy(update=flags)
        model = Seq2SeqModel(config)
        label = "-".join(f"{name}={int(value)}" for name, value in flags.items())
        log_path = f"{self.log_dir}/ablation-{label}.log" if self.log_dir else None
        logger.info("Ablation run %s (%d parameters)", label, model.num_parameters())
        result = Trainer(model, self.train_config, log_path).train_loop(
            self.train_batches_factory(), self.valid_batches
        )
        ppl = None if result.status == "failed_to_converge" else result.best_ppl
        return AblationRow(**flags, status=result.status, ppl=ppl, n_params=parameter_count(config))

    def run(self) -> List[AblationRow]:
        rows = []
        for flags in flag_combinations():
            row = self.run_one(flags)
            if row.status == "failed_to_converge":
                logger.warning("Ablation %s failed to converge", flags)
            rows.append(row)
        return rows
