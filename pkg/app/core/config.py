"""
Solver configuration management using Pydantic Settings.
All settings can be overridden via environment variables prefixed with ``BSDE_``.
"""

from pathlib import Path

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="BSDE_",
        case_sensitive=True,
        extra="ignore",
    )

    # Application
    PROJECT_NAME: str = "Backward Deep BSDE"
    VERSION: str = "0.1.0"
    DEBUG: bool = False

    # Storage
    OUTPUT_DIR: str = "./results"  # BSDE_OUTPUT_DIR
    CONFIG_DIR: str = "./config"  # bundled experiment and benchmark fixtures

    # Parallelism
    DEFAULT_JOBS: int = 1
    EVAL_SHARD_PATHS: int = 8192
    ORACLE_CHUNK_SAMPLES: int = 65536

    # Reports
    REPORT_SCHEMA_VERSION: int = 1

    @field_validator("DEFAULT_JOBS", "EVAL_SHARD_PATHS", "ORACLE_CHUNK_SAMPLES", mode="after")
    @classmethod
    def validate_positive(cls, v: int) -> int:
        """Worker and shard sizes must be positive."""
        if v < 1:
            raise ValueError(f"must be >= 1, got {v}")
        return v

    @property
    def output_path(self) -> Path:
        """Default output directory as a path."""
        return Path(self.OUTPUT_DIR)

    @property
    def benchmarks_path(self) -> Path:
        """Location of the published benchmark fixture."""
        return Path(self.CONFIG_DIR) / "benchmarks.json"


settings = Settings()  # type: ignore
