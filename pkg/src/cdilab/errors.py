class CDILabError(Exception):
    pass


class DomainError(CDILabError, ValueError):
    """Argument outside the domain where an operation is defined."""


class UnsupportedMeasureError(CDILabError, ValueError):
    """The measure does not come down from infinity, so v and Psi do not exist."""


class ConsistencyError(CDILabError, RuntimeError):
    """Two independent numerical routes disagree beyond tolerance."""


class ConfigError(CDILabError, ValueError):
    pass
