from pathlib import Path
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # Paths
    PROJECT_ROOT: Path = Path(__file__).parent.parent.parent
    LOGS_DIR: Path = PROJECT_ROOT / "logs"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_TO_FILE: bool = True
    SHOW_PROGRESS: bool = True

    # Training
    LOSS_LOG_EVERY: int = 50

    # Property suite (equidiff check)
    CHECK_ROTATIONS: int = 100
    CHECK_INPUTS: int = 100

    class Config:
        env_file = ".env"
        env_prefix = "EQUIDIFF_"
        extra = "ignore"

settings = Settings()
