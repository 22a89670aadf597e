import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Logging level for the launcher
LOG_LEVEL = os.getenv("MSIDEBIAS_LOG_LEVEL", "INFO").upper()

# Largest sample count a single distance-correlation call may hold in memory
DC_MAX_SAMPLES = int(os.getenv("MSIDEBIAS_DC_MAX_SAMPLES", "8192"))

# Default parent directory for command outputs
OUTPUT_DIR = os.getenv("MSIDEBIAS_OUTPUT_DIR", "runs")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
