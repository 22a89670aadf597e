import logging
import sys

from msidebias.core import settings
from msidebias.main import run


# Set up logging
logging.basicConfig(
    level=settings.LOG_LEVEL,
    format=settings.LOG_FORMAT,
)
logger = logging.getLogger(__name__)

if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
