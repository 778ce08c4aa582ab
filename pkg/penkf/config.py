import platform
import tempfile
from pathlib import Path

from pydantic import BaseModel, BaseSettings, validator

from penkf.logger import get_logger

logger = get_logger(__name__)


class ActorOpts(BaseModel):
    queue_name: str = "trials"
    max_retries: int = 0
    time_limit: int = 3600000 * 7
    notify_shutdown: bool = True


class _Settings(BaseSettings):
    # default root for experiment outputs, overridden by `--out`
    DATA_DIR: str = str(Path("/tmp" if platform.system() == "Darwin" else tempfile.gettempdir()))

    # trial pool; values <= 1 run trials inline
    WORKER_THREADS: int = 1

    # to override:
    # >>> export PENKF_TRIAL_ACTOR_OPTS='{"time_limit": 600000}'
    TRIAL_ACTOR_OPTS: ActorOpts = ActorOpts()

    # glasso defaults
    GLASSO_TOL: float = 1e-6
    GLASSO_MAX_SWEEPS: int = 200

    # analysis solves fall back to dense Cholesky up to this state dimension
    DENSE_SOLVE_MAX_P: int = 200

    # RMSE above this marks a trial as diverged
    DIVERGENCE_RMSE: float = 1e3

    @validator("GLASSO_TOL", "DIVERGENCE_RMSE")
    def must_be_positive(cls, v):
        assert v > 0, "must be positive"
        return v

    class Config:
        env_prefix = "PENKF_"
        env_file = ".env"
        file_path = Path(env_file)
        if not file_path.is_file():
            logger.debug("`.env` not found in current directory, loading settings from environment")
        else:
            logger.info(f"Loading settings from dotenv @ {file_path.absolute()}")


settings = _Settings()
