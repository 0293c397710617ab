import os

from dotenv import load_dotenv

load_dotenv()


class Config:
    # Toolkit identity, printed by --version
    TOOLKIT_VERSION = "1.0.0"
    CONFIG_SCHEMA_VERSION = 1

    # Global seed used when a subcommand is not given --seed
    SEED = int(os.environ.get("MATSEG_SEED", "0"))

    # Reserved mask value for unlabeled pixels
    IGNORE_LABEL = int(os.environ.get("MATSEG_IGNORE_LABEL", "255"))

    # Material classes in the reference dataset
    NUM_CLASSES = int(os.environ.get("MATSEG_NUM_CLASSES", "46"))

    LOG_LEVEL = os.environ.get("MATSEG_LOG_LEVEL", "INFO")

    # --- Dataset recovery (fetch) ---
    MAX_PARALLEL = int(os.environ.get("MATSEG_MAX_PARALLEL", "8"))
    MAX_ATTEMPTS = int(os.environ.get("MATSEG_MAX_ATTEMPTS", "4"))
    BASE_BACKOFF = float(os.environ.get("MATSEG_BASE_BACKOFF", "1.0"))
    REQUEST_TIMEOUT = float(os.environ.get("MATSEG_REQUEST_TIMEOUT", "30"))
    MAX_REDIRECTS = 5

    # --- Split verification and metrics ---
    JSD_THRESHOLD = float(os.environ.get("MATSEG_JSD_THRESHOLD", "0.02"))
    BOUNDARY_DFRAC = float(os.environ.get("MATSEG_BOUNDARY_DFRAC", "0.02"))

    # Report templates rendered next to report.json
    TEMPLATE_DIR = os.environ.get("MATSEG_TEMPLATE_DIR", os.path.join(os.path.dirname(__file__), "template"))
