import dataclasses
import hashlib
import os
import pprint
import sys
import time
import traceback
from datetime import datetime, timezone
from enum import IntEnum
from math import ceil

import numpy as np
import orjson

datetime_format_1 = "%Y-%m-%dT%H:%M:%S.%fZ"


class LogLevel(IntEnum):
    TRACE = 10
    DEBUG = 20
    FINE = 30
    DETAIL = 40
    INFO = 50
    WARNING = 60
    ERROR = 70
    CRITICAL = 80
    NONE = 90


class ConfigError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class SelectionError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message, *, last_good_checkpoint_path=None):
        super().__init__(message)
        self.last_good_checkpoint_path = last_good_checkpoint_path


class LoggerApi:

    def trace(self, *messages) -> None:
        raise NotImplementedError

    def debug(self, *messages) -> None:
        raise NotImplementedError

    def fine(self, *messages) -> None:
        raise NotImplementedError

    def detail(self, *messages) -> None:
        raise NotImplementedError

    def info(self, *messages) -> None:
        raise NotImplementedError

    def warning(self, *messages) -> None:
        raise NotImplementedError

    def error(self, exception: Exception) -> None:
        raise NotImplementedError

    def critical(self, exception: Exception) -> None:
        raise NotImplementedError


class Logger(LoggerApi):
    def __init__(self, *, level, name, datetime_format=datetime_format_1, sep="\n", end="\n\n", width=160, exit_on_error=False):
        self.level = level
        self.name = name
        self.message_format = "{} {} {{{}:{}:{}}} {}"
        self.datetime_format = datetime_format
        self.sep = sep
        self.end = end
        self.width = width
        self.whitespaces = 10 * " "
        self.exit_on_error = exit_on_error

    def trace(self, *messages) -> None:
        if self.level <= LogLevel.TRACE:
            self.write_record(level_name="TRACE", messages=messages, caller_frame=sys._getframe(1))

    def debug(self, *messages) -> None:
        if self.level <= LogLevel.DEBUG:
            self.write_record(level_name="DEBUG", messages=messages, caller_frame=sys._getframe(1))

    def fine(self, *messages) -> None:
        if self.level <= LogLevel.FINE:
            self.write_record(level_name="FINE", messages=messages, caller_frame=sys._getframe(1))

    def detail(self, *messages) -> None:
        if self.level <= LogLevel.DETAIL:
            self.write_record(level_name="DETAIL", messages=messages, caller_frame=sys._getframe(1))

    def info(self, *messages) -> None:
        if self.level <= LogLevel.INFO:
            self.write_record(level_name="INFO", messages=messages, caller_frame=sys._getframe(1))

    def warning(self, *messages) -> None:
        if self.level <= LogLevel.WARNING:
            self.write_record(level_name="WARNING", messages=messages, caller_frame=sys._getframe(1))

    def error(self, exception: Exception) -> None:
        if self.level <= LogLevel.ERROR:
            self.write_exception(level_name="ERROR", exception=exception, caller_frame=sys._getframe(1))
            if os.getenv("MODAL_TO_TEXT_EXIT_ON_ERROR", "false").lower() == "true" or self.exit_on_error:
                sys.exit("exit")

    def critical(self, exception: Exception) -> None:
        if self.level <= LogLevel.CRITICAL:
            self.write_exception(level_name="CRITICAL", exception=exception, caller_frame=sys._getframe(1))
        sys.exit("exit")

    def write_record(self, *, level_name, messages, caller_frame):
        current_datetime_str = datetime.now(timezone.utc).strftime(self.datetime_format)
        self.write(
            current_datetime_str=current_datetime_str,
            message=self.message_format.format(
                self.name,
                current_datetime_str,
                os.path.basename(caller_frame.f_code.co_filename),
                caller_frame.f_code.co_name,
                caller_frame.f_lineno,
                f"{level_name}{self.whitespaces}{self.sep.join((self.serialize(object=x, width=self.width) for x in messages))}",
            ),
        )

    def write_exception(self, *, level_name, exception, caller_frame):
        current_datetime_str = datetime.now(timezone.utc).strftime(self.datetime_format)
        self.write(
            current_datetime_str=current_datetime_str,
            message=self.message_format.format(
                self.name,
                current_datetime_str,
                os.path.basename(caller_frame.f_code.co_filename),
                caller_frame.f_code.co_name,
                caller_frame.f_lineno,
                level_name,
            ),
        )
        self.write(current_datetime_str=current_datetime_str, message=repr(exception))
        self.write(current_datetime_str=current_datetime_str, message=traceback.format_exc())

    def serialize(self, *, object, width):
        if isinstance(object, (bool, str, int, float, type(None))):
            return str(object)
        elif hasattr(object, "as_readable_dict"):
            return pprint.pformat(object.as_readable_dict(), width=width)
        elif isinstance(object, np.ndarray):
            return np.array2string(object, max_line_width=width, threshold=64)
        elif dataclasses.is_dataclass(object) and not isinstance(object, type):
            return pprint.pformat(dataclasses.asdict(object), width=width)
        else:
            return pprint.pformat(object, width=width)

    def write(self, *, current_datetime_str, message):
        sys.stderr.write(message)
        sys.stderr.write(self.end)


class Writer:
    """Append-only tab-separated record sink; the header line goes in once per new or empty file."""

    def __init__(self, *, write_path, write_header=None, end="\n", write_buffering=-1):
        self.end = end
        self.write_file = None
        self.write_path = write_path
        self.write_header = write_header
        self.write_buffering = write_buffering
        os.makedirs(os.path.dirname(self.write_path) or ".", exist_ok=True)

    def write(self, *, message):
        if not self.write_file:
            self.open()
        self.write_file.write(message)
        self.write_file.write(self.end)

    def write_record(self, *, values):
        self.write(message="\t".join(str(x) for x in values))

    def open(self):
        need_write_header = self.write_header and (not os.path.exists(self.write_path) or os.path.getsize(self.write_path) == 0)
        self.write_file = open(self.write_path, "a", buffering=self.write_buffering)
        if need_write_header:
            self.write_file.write(self.write_header)
            self.write_file.write(self.end)

    def close(self):
        if self.write_file and not self.write_file.closed:
            self.write_file.close()


def create_default_logger(*, name, level=None):
    if level is None:
        level = getattr(LogLevel, os.getenv("MODAL_TO_TEXT_LOG_LEVEL", "warning").upper(), LogLevel.WARNING)
    return Logger(level=level, name=name)


one_billion = 1_000_000_000


def time_point_now():
    return divmod(time.time_ns(), one_billion)


def time_point_subtract(*, time_point_1, time_point_2):
    return (time_point_1[0] - time_point_2[0], time_point_1[1] - time_point_2[1])


def convert_time_point_delta_to_seconds(*, time_point_delta):
    return time_point_delta[0] + time_point_delta[1] / one_billion


def convert_list_to_sublists(*, input, sublist_length):
    if sublist_length:
        return [input[i * sublist_length : (i + 1) * sublist_length] for i in range((len(input) + sublist_length - 1) // sublist_length)]
    else:
        return [input]


def ceil_fraction(*, count, fraction):
    # guard against 0.1 * 30 == 3.0000000000000004 style overshoot
    return min(count, ceil(round(count * fraction, 9)))


def derive_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(x) for x in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def create_rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))


def json_serialize(data, *, indent=False) -> str:
    option = orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY
    if indent:
        option |= orjson.OPT_INDENT_2
    return orjson.dumps(data, option=option).decode()  # pylint: disable=maybe-no-member


def json_deserialize(payload):
    return orjson.loads(payload)  # pylint: disable=maybe-no-member


def sha256_hex(*, payload) -> str:
    if isinstance(payload, str):
        payload = payload.encode()
    return hashlib.sha256(payload).hexdigest()
