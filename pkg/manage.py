#!/usr/bin/env python
"""Command-line entry point for the uflow pipeline."""
import sys


def main():
    """Run a pipeline subcommand."""
    try:
        from uflow.cli import main as run_pipeline
    except ImportError as exc:
        raise ImportError(
            "Couldn't import uflow's dependencies. Are numpy, scipy, torch, "
            "pydantic and Pillow installed and available on your PYTHONPATH? "
            "Did you forget to activate a virtual environment?"
        ) from exc
    sys.exit(run_pipeline(sys.argv[1:]))


if __name__ == '__main__':
    main()
