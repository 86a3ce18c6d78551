"""Rejection statuses raised by the model.

Every rejected operation raises a ModelError subclass. The class name is the
status string written to traces and matched by scenario ``expect=`` clauses.
"""


class ModelError(Exception):
    @property
    def status(self):
        return type(self).__name__


class DataError(ModelError):
    """A rule table failed to load or cross-validate."""


# core_model
class FieldOverflow(ModelError): pass

# frame_table
class UnmanagedFrame(ModelError): pass
class InvalidNewType(ModelError): pass
class FrameBusy(ModelError): pass
class CallerDomainDenied(ModelError): pass
class PreviousTypeMismatch(ModelError): pass
class TransitionDenied(ModelError): pass

# page_mapper
class FrameTypeNotMappable(ModelError): pass
class InvalidTableType(ModelError): pass
class TableMapDenied(ModelError): pass
class SprrIndexDenied(ModelError): pass

# dispatcher
class DuplicateRegistration(ModelError): pass
class ControlCodeReserved(ModelError): pass
class UnknownIommu(ModelError): pass
class UnroutableDomain(ModelError): pass
class InvalidEvent(ModelError): pass
class InvalidState(ModelError): pass
class ForbiddenTransition(ModelError): pass
class PermissionDenied(ModelError): pass
class NoHandlerRegistered(ModelError): pass
class EndpointUnknown(ModelError): pass

# txm
class ArgCountMismatch(ModelError): pass
class SelectorUnknown(ModelError): pass
class StackInvalid(ModelError): pass

# secure_kernel
class InvalidEndpoint(ModelError): pass

# exclave_resources
class TooManyServices(ModelError): pass
class DuplicateResourceId(ModelError): pass
class NotFound(ModelError): pass
class CallerNotEntitled(ModelError): pass
class TargetNotEntitled(ModelError): pass
class AlreadyAttached(ModelError): pass
class IllegalTransition(ModelError): pass
class PortInvalid(ModelError): pass
class NotEntitled(ModelError): pass
class InvalidArgument(ModelError): pass
class InvalidCapability(ModelError): pass
class NotBooted(ModelError): pass
class ConclaveNotRunning(ModelError): pass
class PreconditionViolated(ModelError): pass
class ManagerOutsideKernel(ModelError): pass


class NotSupported(ModelError):
    """Firmware wrapper not implemented; carries the kernel return code."""
    kr = 0x46


# xnuproxy
class AlreadyAllocated(ModelError): pass
class ProxyFailure(ModelError): pass
class ServiceUnknown(ModelError): pass
class ReentryDenied(ModelError): pass

# tightbeam
class AllocationFailure(ModelError): pass
class UnsupportedTransport(ModelError): pass
class EndpointInvalid(ModelError): pass
class WrappingNotFalse(ModelError): pass
class OversizeWithoutMultipart(ModelError): pass
class BufferOverflow(ModelError): pass
class WrongState(ModelError): pass
class WrongDisposition(ModelError): pass
class ConnectionMismatch(ModelError): pass
class ConnectionClosed(ModelError): pass

# harness
class ParseError(ModelError): pass
class StepMismatch(ModelError): pass
class UnknownTable(ModelError): pass


def all_statuses():
    """Every status name a step can report, including ``ok``."""
    out = {"ok"}
    todo = [ModelError]
    while todo:
        cls = todo.pop()
        out.add(cls.__name__)
        todo.extend(cls.__subclasses__())
    return out
