import logging

from rich.logging import RichHandler


def setup_logging(verbose: bool = False) -> None:
    """route all cpscal logging through rich"""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=verbose)],
        force=True,
    )
