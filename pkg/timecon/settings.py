import os
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field

# Load environment variables
load_dotenv()


class Settings(BaseModel):
    """Process-wide limits and defaults, read from the environment (or a .env file)."""

    path_cap: int = Field(default=22, ge=1)
    policy_cap: int = Field(default=1_000_000, ge=1)
    log_level: str = "INFO"
    output_dir: str = "runs"
    workers: int = Field(default=1, ge=1)

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            path_cap=int(os.getenv("TIMECON_PATH_CAP", "22")),
            policy_cap=int(float(os.getenv("TIMECON_POLICY_CAP", "1000000"))),
            log_level=os.getenv("TIMECON_LOG_LEVEL", "INFO").upper(),
            output_dir=os.getenv("TIMECON_OUTPUT_DIR", "runs"),
            workers=int(os.getenv("TIMECON_WORKERS", "1")),
        )


_settings: Optional[Settings] = None


def get_settings() -> Settings:
    global _settings
    if _settings is None:
        _settings = Settings.from_env()
    return _settings


def reset_settings() -> None:
    """Drop the cached settings so the next call re-reads the environment."""
    global _settings
    _settings = None
