"""Configuration constants and logging setup."""

from pathlib import Path
from datetime import datetime
import logging
import os

# Default logging - reconfigured by setup_logging() once the CLI knows its flags
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler()
    ]
)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
LOG_DIR = Path("logs")

# Optional override of every command's output directory
OUTPUT_DIR_ENV = "TODLAB_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "results"

# SGD defaults (image-classification settings, also used at desk scale)
DEFAULT_LR = 0.1
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 5e-4
DEFAULT_BATCH_SIZE = 128
DEFAULT_EPOCHS = 200
DEFAULT_LR_DROP_FACTOR = 0.1
DEFAULT_LR_DROP_AT_FRAC = 0.8

# Active learning schedule: 10%, 15%, ..., 40% labeled
DEFAULT_START_FRAC = 0.10
DEFAULT_BUDGET_FRAC = 0.05
DEFAULT_CYCLES = 7
DEFAULT_LAMBDA = 0.05
DEFAULT_ALPHA = 0.999

# Bound-verification harness
DEFAULT_SLACK = 0.05
DEFAULT_ETA_GRID = (1e-2, 1e-3, 1e-4)
DEFAULT_T_GRID = (1, 10, 50)
ACCEPTANCE_MAX_ETA = 1e-3
POWER_ITERATION_TOL = 1e-9
POWER_ITERATION_MAX_ITER = 10_000

# Loss-estimation quality
RECALL_PERCENTS = (5, 10, 20, 30, 40, 50)
N_DECILES = 10

# Model selection
DEFAULT_POOL_SIZE = 10
DEFAULT_GAP_EPOCHS = 1
DEFAULT_TOPK = (1, 3)
RATIO_FLOOR = 1e-12

# Checkpoint format
CKPT_MAGIC = "TODLAB-CKPT"
CKPT_VERSION = "v1"

# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_ACCEPTANCE = 3


def resolve_output_dir(configured: str | None, flag: str | None = None) -> Path:
    """Precedence, last wins: config file, then the environment override, then the CLI flag."""
    if flag:
        return Path(flag)
    env_dir = os.getenv(OUTPUT_DIR_ENV)
    if env_dir:
        return Path(env_dir)
    return Path(configured or DEFAULT_OUTPUT_DIR)


def setup_logging(command: str, verbose: bool = False) -> Path:
    """
    Route logging to the console and a timestamped file under logs/.

    Log files live outside the output directory so result files stay
    byte-reproducible across reruns.
    """
    LOG_DIR.mkdir(exist_ok=True)
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    log_file = LOG_DIR / f"todlab_{command}_{timestamp}.log"

    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    formatter = logging.Formatter(LOG_FORMAT)
    for handler in (logging.FileHandler(log_file), logging.StreamHandler()):
        handler.setFormatter(formatter)
        root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    return log_file
