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

"""
Errors
======

Every error raised on purpose by ehrfusion derives from
:py:class:`EhrFusionError`; the ``exit_code`` is what the command line
returns when the error escapes a command.
"""

from typing import Iterable
from typing import Optional
from typing import Tuple


class EhrFusionError(Exception):
    exit_code: int = 1


class UsageError(EhrFusionError):
    exit_code = 1


class DataError(EhrFusionError, ValueError):
    """Malformed input data or a missing upstream artifact"""

    exit_code = 2


class MetricError(DataError):
    """A metric precondition does not hold (empty input, one class, ...)"""


class ProviderError(EhrFusionError):
    """
    An embedding provider failed

    :param message: what went wrong
    :param failed_keys: the keys whose texts could not be embedded
    """

    exit_code = 3

    def __init__(self, message: str, failed_keys: Optional[Iterable[str]] = None):
        self.failed_keys: Tuple[str, ...] = tuple(failed_keys or ())
        if self.failed_keys:
            shown = ", ".join(self.failed_keys[:10])
            more = len(self.failed_keys) - 10
            if more > 0:
                shown += f", ... ({more} more)"
            message = f"{message}; failed keys: {shown}"
        super().__init__(message)


class NumericError(EhrFusionError):
    """Non-finite values during a forward pass, training or a gradient check"""

    exit_code = 4
