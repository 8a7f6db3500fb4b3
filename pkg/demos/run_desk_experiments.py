"""Train every desk-scale run the acceptance suite reads, one after another.

Runs that already finished with the same config are skipped, so the script can be
restarted after an interruption.  Usage::

    python demos/run_desk_experiments.py [--root artifacts] [--only rule-seed0 motor-seed0]
"""

import argparse
import time

from compmeta.experiments import artifacts_root, desk_runs, ensure_run


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", default=None, help="artifact directory (default: $COMPMETA_ARTIFACTS or ./artifacts)")
    p.add_argument("--only", nargs="*", help="subset of run names")
    args = p.parse_args()
    root = artifacts_root(args.root)
    names = args.only or list(desk_runs())
    for name in names:
        t0 = time.time()
        print(f"== {name}", flush=True)
        run = ensure_run(name, root)
        print(f"== {name} done in {time.time() - t0:.0f}s -> {run}", flush=True)


if __name__ == "__main__":
    main()
