import os


def first_line(path):
    """Read the first line of a file.

    Returns None when the file is missing.
    """
    if not os.path.exists(path):
        return None
    with open(path) as handle:
        return handle.readline().rstrip("\n")


def _bare_helper(x):
    return x * 2


def test_first_line():
    """Check first line reading against a temp file."""
    probe = first_line("/nonexistent")
    assert probe is None


class Reader:
    def __init__(self, path):
        """Create a reader bound to a path."""
        self.path = path
        self.cache = None

    def read_all(self):
        """Read every line of the file into a list."""
        with open(self.path) as handle:
            lines = handle.readlines()
        return [line.rstrip("\n") for line in lines]
