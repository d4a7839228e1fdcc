"""sleepnet protocol constants.

Single source of truth for window geometry, the interval head, the
follow rule, and on-disk layouts. Keep this file stable: checkpoints,
diary CSVs and recommendation exports written by one version must read
back under the next.
"""

# Behaviour window: 10 diary entries, index WINDOW_STEPS - 1 is the
# anchor (last) day, index 0 is the oldest.
WINDOW_STEPS = 10

# Reported quality scale
QUALITY_MIN = -2.0
QUALITY_MAX = 2.0
QUALITY_LEVELS = (-2, -1, 0, 1, 2)

# Interval head: nine nested intervals with nominal probabilities 0.1 .. 0.9
N_INTERVALS = 9
NOMINAL_P = tuple(round(0.1 * i, 1) for i in range(1, N_INTERVALS + 1))

# Soft counting step (sigmoid with its input multiplied by 10)
SOFT_STEP_GAIN = 10.0

# Network defaults
LSTM_SIZES = (50, 10)
LEARNING_RATE = 0.01
BATCH_SIZE = 256
DEFAULT_EPOCHS = 30
EARLY_STOP_PATIENCE = 15
VALIDATION_FRACTION = 0.1

# Adam
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Recommendations
FOLLOW_THRESHOLD_MINUTES = 30.0   # numeric advice ignored iff |actual - rec| > 30
MINUTES_MAX = 720.0               # numeric recommendations clamped to [0, 720]
BINARY_THRESHOLD = 0.5            # relaxed binary -> {0, 1}
Z_BOX = 4.0                       # gradient ascent clamp box in z-space
NEIGHBOURHOOD_CANDIDATES = 1000
NEIGHBOURHOOD_SIZE = 100

# Second derivatives: central differences of autodiff gradients
HESSIAN_STEP = 1e-3

# Diary CSV
CSV_ID_COLUMNS = ("user_id", "date")
CSV_QUALITY_COLUMN = "quality"

# Checkpoint layout: <dir>/manifest.json, <dir>/tensors/<name>.f64, <dir>/model.json
CHECKPOINT_FORMAT = "sleepnet-ckpt@1"
TENSOR_DTYPE = "<f8"              # little-endian float64
TENSOR_SUFFIX = ".f64"
MANIFEST_NAME = "manifest.json"
SIDECAR_NAME = "model.json"
