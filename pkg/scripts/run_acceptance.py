#!/usr/bin/env python3
"""Run every release acceptance criterion; one PASS/FAIL line each.

Exit status is 0 only when every criterion passes.  The criteria live in
tests/test_acceptance.py so pytest and this script always agree.
"""

import sys
import time
import traceback
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from tests.test_acceptance import CRITERIA  # noqa: E402


def main() -> int:
    failures = 0
    for name, check in CRITERIA:
        start = time.perf_counter()
        try:
            check()
        except Exception:
            failures += 1
            print(f"FAIL {name} ({time.perf_counter() - start:.1f}s)")
            traceback.print_exc()
        else:
            print(f"PASS {name} ({time.perf_counter() - start:.1f}s)")
    total = len(CRITERIA)
    print(f"{total - failures}/{total} criteria passed")
    return 1 if failures else 0


if __name__ == "__main__":
    raise SystemExit(main())
