"""
Configuration settings for the inverse-control simulator
"""
import os
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # Artifacts
    OUTPUT_DIR: str = os.getenv("OUTPUT_DIR", "runs")

    # Parallel sweeps (joblib n_jobs semantics, -1 = all cores)
    SWEEP_WORKERS: int = 1

    # Sup sampling used when a config leaves it unset
    SUP_SAMPLES: int = 4000

    # Environment
    ENVIRONMENT: str = os.getenv("ENVIRONMENT", "development")

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")


settings = Settings()
