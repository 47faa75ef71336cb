from .parser import parse_statement, parse_script  # noqa: F401
from .unparse import unparse  # noqa: F401
