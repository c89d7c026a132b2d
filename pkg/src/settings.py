import logging
import os
from typing import Optional

import torch
from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)

LOG_LEVEL = os.getenv("CODA_LOG_LEVEL", "INFO").upper()
TORCH_THREADS = int(os.getenv("CODA_TORCH_THREADS", "1"))


def seed_override() -> Optional[int]:
    """Seed forced through CODA_SEED, or None when unset."""
    raw = os.getenv("CODA_SEED")
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        logger.warning("Ignoring non-integer CODA_SEED=%r", raw)
        return None


def configure_torch() -> None:
    # A fixed intra-op thread count keeps float reductions bit-reproducible
    torch.set_num_threads(TORCH_THREADS)
