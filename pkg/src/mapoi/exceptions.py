"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """A parameter vector, system file or run configuration is malformed."""


class DomainError(ValueError):
    """A point lies outside the domain a surrogate map was built on."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class MapBuildError(RuntimeError):
    """The forward solver failed while sampling a map node."""

    def __init__(self, message, variable=None, node=None):
        super().__init__(message)
        self.variable = variable
        self.node = node
