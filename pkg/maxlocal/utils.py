from pathlib import Path
from typing import List


# Utility function to ensure path is a str
def ensure_path(path: Path | str) -> str:
    return str(path) if isinstance(path, Path) else path


def split_list(value: str) -> List[str]:
    """Comma or whitespace separated values from a config file entry."""
    return [item for item in value.replace(",", " ").split() if item]


def run_name(subcommand: str, fingerprint: str) -> str:
    # Same config, same run folder.
    return f"{subcommand}-{fingerprint[:12]}"
