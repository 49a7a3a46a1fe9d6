"""Exception hierarchy shared by every layer of the runtime."""

from __future__ import annotations


class ObjprocError(Exception):
    """Base class for all errors raised by this package."""


class EncodeError(ObjprocError):
    pass


class DecodeError(ObjprocError):
    pass


class TransportFailure(ObjprocError):
    pass


class DuplicateClass(ObjprocError):
    pass


class DuplicateAddress(ObjprocError):
    pass


class UnknownAddress(ObjprocError):
    pass


class SimDeadlock(ObjprocError):
    """Every simulated activity is blocked and no message is in flight."""


class RemoteError(ObjprocError):
    """An Error reply, or a local condition that maps onto one.

    ``code`` is the wire-level error code. ``index`` is set when the error
    came out of a batch and names the failing call.
    """

    code = 8

    def __init__(self, detail: str = "", index: int | None = None):
        super().__init__(detail)
        self.detail = detail
        self.index = index

    def __str__(self) -> str:
        prefix = f"[call {self.index}] " if self.index is not None else ""
        return f"{prefix}{type(self).__name__}: {self.detail}"


class UnknownMachine(RemoteError):
    code = 1


class UnknownObject(RemoteError):
    code = 2


class UnknownClass(RemoteError):
    code = 3


class UnknownMethod(RemoteError):
    code = 4


class BadArgs(RemoteError):
    code = 5


class OutOfBounds(RemoteError):
    code = 6


class DeviceError(RemoteError):
    code = 7


class InternalError(RemoteError):
    code = 8


ERROR_CODES: dict[int, type[RemoteError]] = {
    cls.code: cls
    for cls in (
        UnknownMachine,
        UnknownObject,
        UnknownClass,
        UnknownMethod,
        BadArgs,
        OutOfBounds,
        DeviceError,
        InternalError,
    )
}


def error_from_code(code: int, detail: str, index: int | None = None) -> RemoteError:
    return ERROR_CODES.get(code, InternalError)(detail, index)
