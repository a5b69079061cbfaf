"""Command-line entry point implementing the evaluation subprocess contract:

    python3 -m toyharness <candidate_path> <manifest_path> <metrics_out> <mode>

stdout carries harness logs, stderr carries candidate errors, and metrics
travel only through the metrics file. Exit 0 on clean completion, 1 on a
candidate failure, 2 on manifest or IO problems.
"""

import logging
import os
import sys

# Pin numeric libraries to one thread before numpy loads, for reproducible
# timings and losses in deterministic mode.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TOYHARNESS_LOG_LEVEL", "WARNING"), stream=sys.stdout)
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 4:
        print("usage: python3 -m toyharness <candidate> <manifest> <metrics_out> <fast|full>",
              file=sys.stderr)
        return 2
    from .runner import ManifestFormatError, run_candidate

    candidate_path, manifest_path, metrics_out, mode = argv
    try:
        return run_candidate(candidate_path, manifest_path, metrics_out, mode)
    except (ManifestFormatError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
