"""Service error codes shared by the library, HTTP layer and CLI."""

from __future__ import annotations


class ServiceError(Exception):
    """An expected, coded failure of a service operation.

    ``code`` is a stable machine-readable identifier (e.g. ``NOT_REGISTERED``);
    the message is human-oriented detail. The HTTP layer maps codes to status
    codes, the CLI maps them to diagnostics.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"ServiceError({self.code}: {self.message})"


def not_registered(project_id: str) -> ServiceError:
    return ServiceError("NOT_REGISTERED", f"project {project_id!r} is not registered")


def bad_event(detail: str) -> ServiceError:
    return ServiceError("BAD_EVENT", detail)


def source_unavailable(detail: str) -> ServiceError:
    return ServiceError("SOURCE_UNAVAILABLE", detail)


def no_baseline(project_id: str) -> ServiceError:
    return ServiceError(
        "NO_BASELINE", f"project {project_id!r} has no successful build to validate against"
    )


def duplicate(detail: str) -> ServiceError:
    return ServiceError("DUPLICATE", detail)


def too_large(size: int, limit: int) -> ServiceError:
    return ServiceError("TOO_LARGE", f"model blob is {size} bytes, limit is {limit}")


def not_found(detail: str) -> ServiceError:
    return ServiceError("NOT_FOUND", detail)


def bad_doi(detail: str) -> ServiceError:
    return ServiceError("BAD_DOI", detail)


def no_data(detail: str) -> ServiceError:
    return ServiceError("NO_DATA", detail)


def no_run(detail: str) -> ServiceError:
    return ServiceError("NO_RUN", detail)


def missing_artifact(detail: str) -> ServiceError:
    return ServiceError("MISSING_ARTIFACT", detail)


def duplicate_name(name: str) -> ServiceError:
    return ServiceError("DUPLICATE_NAME", f"a project named {name!r} already exists")


def rejected(detail: str) -> ServiceError:
    return ServiceError("REJECTED", detail)
