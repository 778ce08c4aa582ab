import traceback

import dramatiq
from dramatiq.brokers.stub import StubBroker
from dramatiq.results import Results
from dramatiq.results.backends import StubBackend

from penkf.config import settings
from penkf.core import PenkfError
from penkf.experiment import run_trial
from penkf.logger import get_logger
from penkf.models import ExperimentConfig

logger = get_logger(__name__)

# setup in-process broker, trials never leave this machine
logger.debug("Setting up stub broker")
result_backend = StubBackend()
broker = StubBroker()
broker.add_middleware(Results(backend=result_backend))

# set broker
logger.debug("Attaching broker")
dramatiq.set_broker(broker)


@dramatiq.actor(store_results=True, **settings.TRIAL_ACTOR_OPTS.dict())
def process_trial(config_json: str, trial_index: int, method: str) -> dict:
    """
    Runs a single (trial, method) pair of a resolved experiment config.

    Domain errors are returned as `{"error": ...}` so the caller fails fast instead of waiting on a
    result that will never be stored.
    """
    cfg = ExperimentConfig.parse_raw(config_json)
    try:
        result = run_trial(cfg, trial_index, method)
    except PenkfError as e:
        logger.error(f"trial {trial_index} ({method}) failed: {e}")
        return {"error": str(e)}
    except Exception:
        logger.error("Unexpected unknown exception was raised by actor:")
        logger.error(traceback.format_exc())
        raise

    # result of this function *must be* JSON-encodable
    return {"result": result.json()}
