import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from config import Config
from models import AblationRow, BenchReport, GradCheckReport, ModelConfig, RunConfig, TrainResult
from srnmt.ablation import AblationSweep
from srnmt.benchmark import run_bench
from srnmt.checkpoint import load_checkpoint, save_checkpoint
from srnmt.data_toolkit import (
    BatchStream,
    Vocabulary,
    build_vocab,
    generate_task,
    make_batches,
    read_parallel,
    write_parallel,
)
from srnmt.errors import ConfigurationError, SchemaError
from srnmt.gradcheck import run_gradcheck
from srnmt.inference import translate_lines
from srnmt.reporting import perplexity_chart
from srnmt.seq2seq_model import Seq2SeqModel
from srnmt.training import Trainer, evaluate_perplexity

logger = logging.getLogger(__name__)

_NONE_VALUES = {"", "none", "null"}


def parse_assignments(lines: Sequence[str], source: str = "<overrides>") -> Dict[str, Optional[str]]:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped"""
    values = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"{source}:{number}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = None if value.lower() in _NONE_VALUES else value
    return values


def load_run_config(path: Optional[str] = None, overrides: Sequence[str] = (), seed: Optional[int] = None) -> RunConfig:
    """File first, then ``--set`` overrides, then ``--seed``. Unknown keys are reported together."""
    values = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        values.update(parse_assignments(config_path.read_text(encoding="utf-8").splitlines(), str(path)))
    values.update(parse_assignments(overrides))
    if seed is not None:
        values["seed"] = str(seed)

    unknown = sorted(set(values) - set(RunConfig.model_fields))
    if unknown:
        raise SchemaError(f"unknown configuration keys: {', '.join(unknown)}", keys=unknown)
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        bad = sorted({str(err["loc"][0]) for err in exc.errors() if err.get("loc")})
        raise SchemaError(f"invalid configuration values for {', '.join(bad) or 'config'}: {exc}", keys=bad)


class SrnmtToolkit:
    """Wires data, model, training and decoding for every command-line operation"""

    def __init__(self, run_config: RunConfig = None):
        self.run_config = run_config or RunConfig()

    # -- data ---------------------------------------------------------------

    def _require(self, *keys: str):
        missing = [key for key in keys if not getattr(self.run_config, key)]
        if missing:
            raise ConfigurationError(f"missing required configuration: {', '.join(missing)}")

    def task_pairs(self) -> Tuple[List[Tuple[str, str]], List[Tuple[str, str]]]:
        cfg = self.run_config
        permutation = np.random.default_rng([cfg.seed, 3]).permutation(cfg.task_vocab_size)
        lengths = (cfg.task_min_len, cfg.task_max_len)
        train = generate_task(cfg.task, cfg.task_vocab_size, lengths, cfg.task_train_pairs, cfg.seed, permutation)
        valid = generate_task(cfg.task, cfg.task_vocab_size, lengths, cfg.task_valid_pairs, cfg.seed + 1, permutation)
        return train, valid

    def load_pairs(self):
        if self.run_config.task:
            return self.task_pairs()
        self._require("train_src", "train_tgt", "valid_src", "valid_tgt")
        for key in ("train_src", "train_tgt", "valid_src", "valid_tgt"):
            if not Path(getattr(self.run_config, key)).exists():
                raise ConfigurationError(f"{key}: file {getattr(self.run_config, key)} does not exist")
        cfg = self.run_config
        return read_parallel(cfg.train_src, cfg.train_tgt), read_parallel(cfg.valid_src, cfg.valid_tgt)

    def vocab_paths(self) -> Tuple[str, str]:
        cfg = self.run_config
        if cfg.src_vocab and cfg.tgt_vocab:
            return cfg.src_vocab, cfg.tgt_vocab
        self._require("checkpoint")
        return cfg.src_vocab or f"{cfg.checkpoint}.src.vocab", cfg.tgt_vocab or f"{cfg.checkpoint}.tgt.vocab"

    def vocabularies(self, train_pairs=None) -> Tuple[Vocabulary, Vocabulary]:
        src_path, tgt_path = self.vocab_paths()
        if Path(src_path).exists() and Path(tgt_path).exists():
            return Vocabulary.load(src_path), Vocabulary.load(tgt_path)
        if train_pairs is None:
            raise ConfigurationError(f"vocabulary files {src_path} / {tgt_path} do not exist")
        vocab_src = build_vocab((s for s, _ in train_pairs), self.run_config.src_vocab_size)
        vocab_tgt = build_vocab((t for _, t in train_pairs), self.run_config.tgt_vocab_size)
        vocab_src.save(src_path)
        vocab_tgt.save(tgt_path)
        logger.info("Built vocabularies: %d source / %d target types", len(vocab_src), len(vocab_tgt))
        return vocab_src, vocab_tgt

    def generate(self, out_dir: str) -> Dict[str, str]:
        if not self.run_config.task:
            raise ConfigurationError("task: set copy, reverse or toy-translation to generate a corpus")
        train, valid = self.task_pairs()
        out = Path(out_dir)
        paths = {key: str(out / name) for key, name in (
            ("train_src", "train.src"), ("train_tgt", "train.tgt"), ("valid_src", "valid.src"), ("valid_tgt", "valid.tgt"))}
        write_parallel(train, paths["train_src"], paths["train_tgt"])
        write_parallel(valid, paths["valid_src"], paths["valid_tgt"])
        logger.info("Wrote %d train / %d valid %s pairs to %s", len(train), len(valid), self.run_config.task, out)
        return paths

    # -- commands -----------------------------------------------------------

    def train(self) -> TrainResult:
        cfg = self.run_config
        self._require("checkpoint")
        train_pairs, valid_pairs = self.load_pairs()
        vocab_src, vocab_tgt = self.vocabularies(train_pairs)
        model = Seq2SeqModel(cfg.to_model_config(len(vocab_src), len(vocab_tgt)))
        logger.info("Model %s %dL d=%d: %d parameters", cfg.cell_kind, cfg.n_layers, cfg.d, model.num_parameters())

        stream = BatchStream(train_pairs, vocab_src, vocab_tgt, cfg.batch_size, cfg.max_len, cfg.seed)
        valid = make_batches(valid_pairs, vocab_src, vocab_tgt, cfg.batch_size, cfg.max_len, cfg.seed)
        result = Trainer(model, cfg.to_train_config(), cfg.log).train_loop(stream, valid)

        if result.status != "failed_to_converge":
            save_checkpoint(cfg.checkpoint, model)
        if cfg.plot:
            perplexity_chart(result.entries, cfg.plot)
        return result

    def load_model(self) -> Tuple[Seq2SeqModel, Vocabulary, Vocabulary]:
        self._require("checkpoint")
        model = load_checkpoint(self.run_config.checkpoint)
        vocab_src, vocab_tgt = self.vocabularies()
        if (len(vocab_src), len(vocab_tgt)) != (model.config.src_vocab_size, model.config.tgt_vocab_size):
            raise ConfigurationError("vocabulary files do not match the checkpoint's vocabulary sizes")
        return model, vocab_src, vocab_tgt

    def translate(self, input_path: str, output_path: str, beam: int = None, max_len: int = None) -> int:
        cfg = self.run_config
        model, vocab_src, vocab_tgt = self.load_model()
        lines = Path(input_path).read_text(encoding="utf-8").splitlines()
        outputs = translate_lines(model, vocab_src, vocab_tgt, lines, cfg.beam if beam is None else beam,
                                  cfg.decode_max_len if max_len is None else max_len, cfg.length_penalty)
        out = Path(output_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("".join(line + "\n" for line in outputs), encoding="utf-8")
        logger.info("Translated %d lines into %s", len(outputs), out)
        return len(outputs)

    def eval_ppl(self, src_path: str = None, tgt_path: str = None) -> float:
        cfg = self.run_config
        src_path, tgt_path = src_path or cfg.valid_src, tgt_path or cfg.valid_tgt
        if not src_path or not tgt_path:
            raise ConfigurationError("missing required configuration: valid_src, valid_tgt")
        model, vocab_src, vocab_tgt = self.load_model()
        batches = make_batches(read_parallel(src_path, tgt_path), vocab_src, vocab_tgt,
                               cfg.batch_size, cfg.max_len, cfg.seed)
        return evaluate_perplexity(model, batches)

    def gradcheck(self, tolerance: float = 1e-4, vocab: int = 11, T: int = 4, batch_size: int = 2,
                  d: int = 8, n_layers: int = 2) -> GradCheckReport:
        """Finite-difference check on a tiny model; width and depth come from the arguments, not the run"""
        cfg = self.run_config
        config = ModelConfig(
            d=d, n_layers=n_layers, src_vocab_size=vocab, tgt_vocab_size=vocab, dropout_p=0.0,
            cell_kind=cfg.cell_kind, use_layer_norm=cfg.use_layer_norm, multi_attention=cfg.multi_attention,
            use_highway=cfg.use_highway, input_feed=cfg.input_feed, precision="float64", seed=cfg.seed,
        )
        return run_gradcheck(config, tolerance, T_src=T, T_tgt=T, batch_size=batch_size)

    def bench(self, widths=(256,), layer_counts=(1, 2, 3, 4), seq_lens=(64,), kinds=("sr", "lstm"),
              batch_size: int = 32, warmup: int = Config.BENCH_WARMUP,
              repeats: int = Config.BENCH_REPEATS) -> BenchReport:
        return run_bench(widths, layer_counts, seq_lens, kinds, batch_size, warmup, repeats,
                         input_feed=self.run_config.input_feed, seed=self.run_config.seed)

    def ablate(self) -> List[AblationRow]:
        cfg = self.run_config
        train_pairs, valid_pairs = self.load_pairs()
        vocab_src = build_vocab((s for s, _ in train_pairs), cfg.src_vocab_size)
        vocab_tgt = build_vocab((t for _, t in train_pairs), cfg.tgt_vocab_size)
        valid = make_batches(valid_pairs, vocab_src, vocab_tgt, cfg.batch_size, cfg.max_len, cfg.seed)
        sweep = AblationSweep(
            cfg.to_model_config(len(vocab_src), len(vocab_tgt)),
            cfg.to_train_config(),
            lambda: BatchStream(train_pairs, vocab_src, vocab_tgt, cfg.batch_size, cfg.max_len, cfg.seed),
            valid,
            log_dir=str(Path(cfg.log).parent) if cfg.log else None,
        )
        return sweep.run()
