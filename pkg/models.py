from pydantic import BaseModel, ConfigDict, model_validator
from typing import List, Literal, Optional

from config import Config
from srnmt.errors import ConfigurationError


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d: int = Config.DEFAULT_WIDTH
    n_layers: int = 1
    src_vocab_size: int
    tgt_vocab_size: int
    dropout_p: float = Config.DROPOUT
    cell_kind: Literal["sr", "lstm"] = "sr"
    use_layer_norm: bool = True
    multi_attention: bool = True
    use_highway: bool = True
    input_feed: bool = False  # LSTM baseline only
    precision: Literal["float32", "float64"] = "float32"
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.d < 2 or self.d % 2:
            raise ConfigurationError(f"d must be even and >= 2, got {self.d}")
        if self.n_layers < 1:
            raise ConfigurationError(f"n_layers must be >= 1, got {self.n_layers}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        for name in ("src_vocab_size", "tgt_vocab_size"):
            if getattr(self, name) <= len(Config.RESERVED_TOKENS):
                raise ConfigurationError(f"{name} must exceed the {len(Config.RESERVED_TOKENS)} reserved ids")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr_stage1: float = Config.LR_STAGE1
    lr_stage2: float = Config.LR_STAGE2
    batch_size: int = Config.BATCH_SIZE
    dropout: float = Config.DROPOUT
    patience: int = 3
    valid_interval: Optional[int] = None  # None: once per epoch
    max_steps: int = 100000
    stages: Literal[1, 2] = 2
    carry_optimizer_state: bool = False
    clip_threshold: Optional[float] = None
    max_len: int = Config.MAX_SENTENCE_LEN
    log_interval: int = 100
    divergence_limit: int = Config.DIVERGENCE_LIMIT
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.stages == 2 and not self.lr_stage2 < self.lr_stage1:
            raise ConfigurationError(
                f"lr_stage2 ({self.lr_stage2}) must be below lr_stage1 ({self.lr_stage1})"
            )
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ConfigurationError("batch_size and max_steps must be positive")
        if self.valid_interval is not None and self.valid_interval < 1:
            raise ConfigurationError("valid_interval must be positive when set")
        return self


class RunConfig(BaseModel):
    """Flat view of model, training and path settings loaded from a key = value file"""

    model_config = ConfigDict(extra="forbid")

    # model
    d: int = Config.DEFAULT_WIDTH
    n_layers: int = 1
    dropout: float = Config.DROPOUT
    cell_kind: Literal["sr", "lstm"] = "sr"
    use_layer_norm: bool = True
    multi_attention: bool = True
    use_highway: bool = True
    input_feed: bool = False
    precision: Literal["float32", "float64"] = "float32"
    seed: int = 0
    src_vocab_size: int = 30000
    tgt_vocab_size: int = 30000

    # training
    lr_stage1: float = Config.LR_STAGE1
    lr_stage2: float = Config.LR_STAGE2
    batch_size: int = Config.BATCH_SIZE
    patience: int = 3
    valid_interval: Optional[int] = None
    max_steps: int = 100000
    stages: Literal[1, 2] = 2
    carry_optimizer_state: bool = False
    clip_threshold: Optional[float] = None
    max_len: int = Config.MAX_SENTENCE_LEN
    log_interval: int = 100

    # synthetic task source (used instead of corpus files when set)
    task: Optional[Literal["copy", "reverse", "toy-translation"]] = None
    task_vocab_size: int = 20
    task_min_len: int = 1
    task_max_len: int = 12
    task_train_pairs: int = 10000
    task_valid_pairs: int = 1000

    # paths
    train_src: Optional[str] = None
    train_tgt: Optional[str] = None
    valid_src: Optional[str] = None
    valid_tgt: Optional[str] = None
    src_vocab: Optional[str] = None
    tgt_vocab: Optional[str] = None
    checkpoint: Optional[str] = None
    log: Optional[str] = None
    plot: Optional[str] = None

    # decoding
    beam: int = 1
    decode_max_len: int = 100
    length_penalty: float = 0.0

    def to_model_config(self, src_vocab_size: int, tgt_vocab_size: int) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            n_layers=self.n_layers,
            src_vocab_size=src_vocab_size,
            tgt_vocab_size=tgt_vocab_size,
            dropout_p=self.dropout,
            cell_kind=self.cell_kind,
            use_layer_norm=self.use_layer_norm,
            multi_attention=self.multi_attention,
            use_highway=self.use_highway,
            input_feed=self.input_feed,
            precision=self.precision,
            seed=self.seed,
        )

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            lr_stage1=self.lr_stage1,
            lr_stage2=self.lr_stage2,
            batch_size=self.batch_size,
            dropout=self.dropout,
            patience=self.patience,
            valid_interval=self.valid_interval,
            max_steps=self.max_steps,
            stages=self.stages,
            carry_optimizer_state=self.carry_optimizer_state,
            clip_threshold=self.clip_threshold,
            max_len=self.max_len,
            log_interval=self.log_interval,
            seed=self.seed,
        )


class TrainLogEntry(BaseModel):
    step: int
    loss: float
    ppl: float
    lr: float
    tok_per_s: float
    stage: int
    wall_time: float = 0.0

    def to_line(self) -> str:
        return (
            f"step={self.step} loss={self.loss:.6f} ppl={self.ppl:.6f} "
            f"lr={self.lr:.8f} tok_per_s={self.tok_per_s:.1f} stage={self.stage}"
        )


class DivergenceEvent(BaseModel):
    step: int
    reason: str = ""

    def to_line(self) -> str:
        return f"event=diverged step={self.step}"


class TrainResult(BaseModel):
    status: Literal["converged", "max_steps", "failed_to_converge"]
    best_ppl: float
    steps: int
    entries: List[TrainLogEntry] = []
    events: List[DivergenceEvent] = []


class BenchRow(BaseModel):
    kind: Literal["sr", "lstm"]
    layers: int
    d: int
    T: int
    B: int
    fwd_tok_s: float
    train_tok_s: float
    peak_bytes: int


class BenchReport(BaseModel):
    rows: List[BenchRow]
    threads: str
    warmup: int
    repeats: int
    input_feed: bool = False


class AblationRow(BaseModel):
    use_layer_norm: bool
    multi_attention: bool
    use_highway: bool
    status: Literal["converged", "max_steps", "failed_to_converge"]
    ppl: Optional[float] = None
    n_params: int


class GradCheckResult(BaseModel):
    parameter: str
    max_rel_error: float
    passed: bool


class GradCheckReport(BaseModel):
    results: List[GradCheckResult]
    tolerance: float
    passed: bool
    worst_parameter: str
    worst_error: float
