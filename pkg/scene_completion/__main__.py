"""python -m scene_completion <command> [--config PATH] [--set KEY=VALUE] [--threads N] [--out DIR]"""

import os
import sys

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _preset_threads(argv):
    # BLAS pools read these once, at numpy import
    for i, arg in enumerate(argv):
        value = None
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
        if value and value.isdigit() and int(value) > 0:
            for name in THREAD_VARS:
                os.environ[name] = value


_preset_threads(sys.argv[1:])

from .cli import main  # noqa: E402

if __name__ == "__main__":
    main()
