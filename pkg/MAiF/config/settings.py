import os
from dotenv import load_dotenv

load_dotenv()

LOG_DIR = os.getenv("MAIF_LOG_DIR", "logs")
LOG_FILE = os.getenv("MAIF_LOG_FILE", os.path.join(LOG_DIR, "maif.log"))
LOG_LEVEL = os.getenv("MAIF_LOG_LEVEL", "INFO")

# (t, agent, leader?, mode, action) per protocol step
TRANSCRIPT = os.getenv("MAIF_TRANSCRIPT", "0") == "1"
TRANSCRIPT_FILE = os.getenv("MAIF_TRANSCRIPT_FILE", os.path.join(LOG_DIR, "transcript.log"))

SEED = int(os.getenv("MAIF_SEED", 0))
TIME_LIMIT = float(os.getenv("MAIF_TIME_LIMIT", 300.0))
OUTPUT_DIR = os.getenv("MAIF_OUTPUT_DIR", "runs")

# Value-function backend: "tabular" or "mlp"
BACKEND = os.getenv("MAIF_BACKEND", "tabular")
DEVICE = os.getenv("MAIF_DEVICE", "cpu")

# Simulator constants
FOV = 9
EPISODE_LENGTH_FACTOR = 3
KEEP_FORMATION_EPS = 1e-6
