"""Compatibility shims for older Python versions."""

import enum
import logging
from typing import Dict

try:
    from enum import StrEnum
except ImportError:  # Python < 3.11: backport of the stdlib class

    class StrEnum(str, enum.Enum):  # type: ignore[no-redef]
        """Enum where members are also (and must be) strings."""

        def __new__(cls, *values):
            if len(values) > 3:
                raise TypeError(f"too many arguments for str(): {values!r}")
            if len(values) == 1 and not isinstance(values[0], str):
                raise TypeError(f"{values[0]!r} is not a string")
            if len(values) >= 2 and not isinstance(values[1], str):
                raise TypeError(f"encoding must be a string, not {values[1]!r}")
            if len(values) == 3 and not isinstance(values[2], str):
                raise TypeError(f"errors must be a string, not {values[2]!r}")
            value = str(*values)
            member = str.__new__(cls, value)
            member._value_ = value
            return member

        __str__ = str.__str__
        __format__ = str.__format__

        @staticmethod
        def _generate_next_value_(name, start, count, last_values):
            return name.lower()


if hasattr(logging, "getLevelNamesMapping"):
    getLevelNamesMapping = logging.getLevelNamesMapping
else:  # Python < 3.11: backport of the stdlib function

    def getLevelNamesMapping() -> Dict[str, int]:
        return logging._nameToLevel.copy()


__all__ = ["StrEnum", "getLevelNamesMapping"]
