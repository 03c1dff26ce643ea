"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was invoked outside its documented contract."""


class FormatError(ValueError):
    """A persisted container is malformed or fails its checksum."""


class ManifestError(ValueError):
    """A patch manifest is missing, malformed, or inconsistent."""
