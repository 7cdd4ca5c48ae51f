#!/usr/bin/env python3
"""
Exception hierarchy shared by every module.
The CLI maps UsageError to exit code 1 and DataError to exit code 2.

Errors with extra constructor arguments define __reduce__ so they survive
the trip back from a worker process.
"""


class InspectionError(Exception):
    """Base class for all errors raised by the package."""


class UsageError(InspectionError):
    """Bad flags, bad parameter values or a missing required option."""


class DataError(InspectionError):
    """Input data is missing, malformed or inconsistent."""


class EmptyInputError(DataError):
    pass


class MissingLayerError(DataError):
    def __init__(self, layer: str, where: str):
        super().__init__(f"missing layer '{layer}' for {where}")
        self.layer = layer
        self.where = where

    def __reduce__(self):
        return self.__class__, (self.layer, self.where)


class UnreadableRasterError(DataError):
    """A raster file exists but cannot be decoded."""

    def __init__(self, path: str, reason: str, where: str = ""):
        suffix = f" ({where})" if where else ""
        super().__init__(f"cannot read raster {path}{suffix}: {reason}")
        self.path = path
        self.reason = reason
        self.where = where

    def __reduce__(self):
        return self.__class__, (self.path, self.reason, self.where)


class OutputError(DataError):
    """An output file or directory cannot be written."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"cannot write {path}: {reason}")
        self.path = path
        self.reason = reason

    def __reduce__(self):
        return self.__class__, (self.path, self.reason)


class DuplicateIdError(DataError):
    def __init__(self, image_id: str):
        super().__init__(f"duplicate id '{image_id}' in manifest")
        self.image_id = image_id

    def __reduce__(self):
        return self.__class__, (self.image_id,)


class DimensionMismatchError(DataError):
    def __init__(self, what: str, expected, actual):
        super().__init__(f"dimension mismatch for {what}: expected {expected}, got {actual}")
        self.what = what
        self.expected = expected
        self.actual = actual

    def __reduce__(self):
        return self.__class__, (self.what, self.expected, self.actual)


class CodeTableError(DataError):
    """A raster holds a code outside its declared table."""


class UnknownImageError(DataError):
    def __init__(self, image_id: str, where: str = "label store"):
        super().__init__(f"unknown image id '{image_id}' in {where}")
        self.image_id = image_id
        self.where = where

    def __reduce__(self):
        return self.__class__, (self.image_id, self.where)


class NotFittedError(InspectionError):
    pass


class StageError(DataError):
    """A model node failed; downstream stages were not run for the image."""

    def __init__(self, stage: str, image_id: str, cause: BaseException):
        super().__init__(f"[{stage}] image '{image_id}': {cause}")
        self.stage = stage
        self.image_id = image_id
        self.cause = cause

    def __reduce__(self):
        # the cause may not be picklable; its text is already in the message
        return self.__class__, (self.stage, self.image_id, RuntimeError(str(self.cause)))
