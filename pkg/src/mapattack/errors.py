class MapAttackError(Exception):
    pass


class ShapeError(MapAttackError, ValueError):
    pass


class DomainError(MapAttackError, ValueError):
    pass


class ConfigError(MapAttackError, ValueError):
    pass


class ParseError(MapAttackError, ValueError):
    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class UnsupportedVersionError(MapAttackError, ValueError):
    pass
