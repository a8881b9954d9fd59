# --- Numerics ---
DEAD_MASK_EPS = 1e-12  # below this l2 norm a mask is treated as dead
NORM_EPS_DEFAULT = 1e-5
GRAD_ZERO_GUARD = 0.0  # l2-norm gradient is zero when the norm equals this value

# --- Quantization ---
DEFAULT_BIT_LADDER = (1, 2, 4, 8, 16)
FLOAT_PARAM_BITS = 16  # bit width used to account for non-quantized weights
BIT_MASK_THRESHOLD = 0.5

# --- Optimizer defaults ---
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# --- Latency tables ---
TABLE_MAGIC = "latency-table"
TABLE_VERSION = "v1"
PROVENANCE_MEASURED = "m"
PROVENANCE_INTERPOLATED = "i"
DEFAULT_MIDPOINT_ITERATIONS = 6
MIN_TIMED_SECONDS = 2e-4  # shorter measurements are repeated in a batched inner loop

# --- Run catalog ---
CATALOG_DIR_NAME = ".prunetape"
CATALOG_DB_NAME = "history.db"
CATALOG_SCHEMA_VERSION = 1  # bump when the catalog tables change
RECORDER_BATCH_SIZE = 300

# --- Output files ---
HISTORY_CSV_NAME = "history.csv"
CHECKPOINT_NAME = "checkpoint.json"
EXTRACTED_NAME = "extracted.json"
TABLE_CSV_NAME = "latency_table.csv"
