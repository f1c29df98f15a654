"""``python -m swinvfi``. The thread-count override must be exported before numpy loads BLAS."""
import os
import sys

THREADS_ENV = "SWINVFI_THREADS"


def main() -> int:
    threads = os.environ.get(THREADS_ENV)
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = threads
    from .cli import main as cli_main

    return cli_main()


if __name__ == "__main__":
    sys.exit(main())
