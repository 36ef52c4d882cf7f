import os


class Config:
    LOG_LEVEL = os.getenv("SRNMT_LOG_LEVEL", "INFO")
    DEFAULT_PRECISION = os.getenv("SRNMT_PRECISION", "float32")
    RUN_SLOW_TESTS = os.getenv("SRNMT_RUN_SLOW", "0") == "1"
    BENCH_THREADS = os.getenv("OMP_NUM_THREADS") or str(os.cpu_count() or 1)

    # Reserved vocabulary ids
    PAD_ID = 0
    UNK_ID = 1
    BOS_ID = 2
    EOS_ID = 3
    RESERVED_TOKENS = ["<pad>", "<unk>", "<s>", "</s>"]

    # Numerics
    LN_EPS = 1e-5
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPS = 1e-8
    PRECISIONS = {"float32": "<f4", "float64": "<f8"}

    # Training recipe
    DEFAULT_WIDTH = 500
    LR_STAGE1 = 0.0003
    LR_STAGE2 = 0.00015
    BATCH_SIZE = 64
    DROPOUT = 0.1
    MAX_SENTENCE_LEN = 50
    DIVERGENCE_LIMIT = 3

    CHECKPOINT_MAGIC = b"SRNMT1\n"

    # Benchmark protocol
    BENCH_WARMUP = 2
    BENCH_REPEATS = 5

    # Gradient check size limits
    GRADCHECK_MAX_WIDTH = 16
    GRADCHECK_MAX_LEN = 5

    # Exit codes
    EXIT_OK = 0
    EXIT_CONFIG = 1
    EXIT_NUMERICAL = 2
