#!/usr/bin/env python3
"""
Generate the synthetic bilingual caption corpus (same as `ehatcap gen-corpus`).
"""
from __future__ import annotations

import sys

from ehat_cli import run_gen_corpus


def main() -> int:
    return run_gen_corpus()


if __name__ == "__main__":
    sys.exit(main())
