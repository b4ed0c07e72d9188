import os

try:
    from dotenv import load_dotenv

    load_dotenv()
except Exception:
    pass

TRUTHY = {"1", "true", "yes", "y", "on"}

LOG_LEVEL = os.getenv("FUSION_LOG_LEVEL", "INFO").strip().upper()

# 32 for regular runs, 64 for the tight-tolerance gradient build
PRECISION = int(os.getenv("FUSION_PRECISION", "32"))

DEFAULT_HEIGHT = int(os.getenv("FUSION_HEIGHT", "512"))
DEFAULT_WIDTH = int(os.getenv("FUSION_WIDTH", "640"))

PREFETCH = os.getenv("FUSION_PREFETCH", "true").strip().lower() in TRUTHY
