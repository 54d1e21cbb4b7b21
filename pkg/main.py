import sys

import cli


def start(argv=None):
    """Run one CLI verb (gen, train, decompose, eval, gradcheck, bench)."""
    return cli.main(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(start())
