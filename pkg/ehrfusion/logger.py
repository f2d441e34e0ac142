# Copyright 2023-2024 ehrfusion developers
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import sys

from loguru._logger import Logger
from loguru import logger

LOG_FORMAT = (
    "{time:YYYY-MM-DD HH:mm:ss} - {name:<24} - {level:<8} - {message}"
)


def get_logger() -> Logger:
    return logger


def configure_logging(level: str = "INFO") -> None:
    """
    Replace the default loguru sink with a single stderr sink

    Only the command line entry point calls this; library modules
    just log through :py:func:`get_logger`.

    :param level: a loguru level name, e.g. "DEBUG", "INFO", "WARNING"
    """
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT)
