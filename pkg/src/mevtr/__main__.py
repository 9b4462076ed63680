"""Allow ``python -m mevtr``."""

from .cli import main

main()
