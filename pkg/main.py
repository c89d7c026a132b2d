import logging
import sys

from src.settings import LOG_LEVEL

logging.basicConfig(
    level=LOG_LEVEL,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)

from src.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
