# src/moeprune/config/config.py
import os
from dotenv import load_dotenv

# load .env next to repo root when process starts
load_dotenv()

class Config:
    PARAMS_FILE = os.getenv("MOEPRUNE_PARAMS_FILE")
    LOG_DIR = os.getenv("MOEPRUNE_LOG_DIR", "logs")

    @staticmethod
    def validate():
        # nothing is required; only reject a params override that points nowhere
        if Config.PARAMS_FILE and not os.path.exists(Config.PARAMS_FILE):
            raise RuntimeError(f"MOEPRUNE_PARAMS_FILE does not exist: {Config.PARAMS_FILE}")

Config.validate()
