import os
from dotenv import load_dotenv

load_dotenv()

# Output Configuration
OUTPUT_DIR_ENV = "KEM_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "./runs"
LOG_LEVEL = os.getenv("KEM_LOG_LEVEL", "INFO")

# Attention Configuration
DEFAULT_SEED = 0
DEFAULT_TOP_K = 3  # best value of the top-k grid search
DEFAULT_MEMORY_SLOTS = 20  # best value of the slot-count grid search
RESIDUAL_WEIGHT = 1.0

# ETF Configuration
ETF_SCALE_CONVENTION = "sqrt"  # "sqrt" -> unit-norm vertices, "linear" -> K/(K-1)

# Optimizer Configuration
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.0001
POLY_POWER = 0.9
DENSE_LEARNING_RATE = 0.00005  # full-scale vision runs; toys override

# Loss weights of the full-scale benchmarks (segmentation-style task orders)
PASCAL_LOSS_WEIGHTS = {"semseg": 1.0, "human_parts": 2.0, "saliency": 30.0}
NYUD_LOSS_WEIGHTS = {"semseg": 1.0, "depth": 1.0}

# Noise Toy Configuration
NOISE_TOY_DEFAULTS = {
    "n_tasks": 3,
    "m": 8,
    "d": 16,
    "L": 4,
    "top_k": DEFAULT_TOP_K,
    "layers": 2,
    "lr": 0.005,
    "steps": 400,
    "steps_per_epoch": 50,
    "batch_size": 64,
    "eval_size": 512,
}
NOISE_LATENT_DIM = 8
NOISE_CLASSES = 4
NOISE_TOKEN_STD = 0.1

# Sort-of-CLEVR Configuration
CLEVR_IMAGE_SIZE = 64
CLEVR_OBJECT_SIZE = 3  # square half-side / circle radius in pixels
CLEVR_MIN_CENTER_DISTANCE = 10
CLEVR_PATCH_SIZE = 8
IMBALANCE_EXPONENT = 2.0
IMBALANCE_DEFAULTS = {
    "n_tasks": 2,
    "m": (CLEVR_IMAGE_SIZE // CLEVR_PATCH_SIZE) ** 2,
    "d": 32,
    "L": DEFAULT_MEMORY_SLOTS,
    "top_k": DEFAULT_TOP_K,
    "layers": 1,
    "lr": 0.002,
    "steps": 1500,
    "steps_per_epoch": 150,
    "batch_size": 32,
    "eval_size": 2000,
}
CLEVR_TRAIN_COUNT = 9600
CLEVR_PREVIEW_COUNT = 8

# Grid Search Configuration
GRID_L_VALUES = [5, 10, 15, 20, 25, 30]
GRID_K_VALUES = [1, 2, 3, 4, 5]

# Cost Sweep Configuration
SWEEP_N_S = [8, 64, 256, 1024]
SWEEP_D = [4, 16, 64]
SWEEP_L = [2, 8, 16]

# Seed Robustness Configuration
ROBUSTNESS_SEEDS = list(range(10))

# Gradient Check Configuration
GRADCHECK_SEEDS = [0, 1, 2]
GRADCHECK_STEP = 1e-5
GRADCHECK_RTOL = 1e-4
GRADCHECK_ATOL = 1e-10
