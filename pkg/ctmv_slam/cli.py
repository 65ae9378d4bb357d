#
# Copyright 2026 The ctmv-slam authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#

"""ctmv-slam command line

    ctmv-slam run --config run.json [--mode slam|vo] [--seed N] [--out-dir DIR]
    ctmv-slam simulate --scenario square-loop [--seed N] [--out-dir DIR]
    ctmv-slam evaluate --estimate est.tum --groundtruth gt.tum [--out-dir DIR]

Exit codes: 0 completed, 2 aborted, 3 invalid input.
"""

import argparse
import json
import logging
import os
import sys

from ._version import __version__
from .errors import InputError, NoOverlap
from .evaluation import evaluate, read_tum
from .pipeline import EXIT_COMPLETED, EXIT_INVALID_INPUT, PipelineConfig, run
from .simulator import SCENARIOS, SimScenario, generate, write_simulation
from .utils import numpy_to_json

logger = logging.getLogger(__name__)


def _parse_args(argv=None):
    p = argparse.ArgumentParser(prog="ctmv-slam", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the engine over an observation stream")
    r.add_argument("--config", required=True, help="JSON configuration document")
    r.add_argument("--mode", choices=["slam", "vo"], help="vo disables loop closing")
    r.add_argument("--schedule", choices=["sequential", "threaded"])
    r.add_argument("--seed", type=int)
    r.add_argument("--out-dir", help="trajectory, metrics and run log directory")
    r.add_argument(
        "--synchronous", action="store_true", help="synchronous multi-frame baseline"
    )

    s = sub.add_parser("simulate", help="write a synthetic scenario")
    s.add_argument("--scenario", choices=sorted(SCENARIOS), default="straight")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", default=".")
    s.add_argument("--noise-px", type=float, help="keypoint noise sigma at level 0")
    s.add_argument("--outlier-fraction", type=float)
    s.add_argument("--duration", type=float, help="seconds, straight drives only")

    e = sub.add_parser("evaluate", help="ATE / RPE / AUC of a TUM trajectory")
    e.add_argument("--estimate", required=True)
    e.add_argument("--groundtruth", required=True)
    e.add_argument("--out-dir", help="directory of metrics.csv")
    e.add_argument("--aborted", action="store_true", help="count the run as a failure")

    return p.parse_args(argv)


def _setup_logging(verbose):
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)]
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )


def cmd_run(ns):
    cfg = PipelineConfig.load(ns.config).with_overrides(
        mode=ns.mode,
        schedule=ns.schedule,
        seed=ns.seed,
        out_dir=ns.out_dir,
        synchronous=ns.synchronous or None,
    )
    result = run(cfg)
    summary = {"status": result.status, "reason": result.reason, **result.counters}
    if result.report is not None:
        summary.update(result.report.summary())
    print(numpy_to_json(summary, indent=2))
    return result.exit_code


def cmd_simulate(ns):
    overrides = {
        k: v
        for k, v in {
            "seed": ns.seed,
            "noise_px": ns.noise_px,
            "outlier_fraction": ns.outlier_fraction,
            "duration": ns.duration,
        }.items()
        if v is not None
    }
    result = generate(SimScenario.named(ns.scenario, **overrides))
    paths = write_simulation(result, ns.out_dir)
    print(json.dumps(paths, indent=2))
    return EXIT_COMPLETED


def cmd_evaluate(ns):
    report = evaluate(
        read_tum(ns.estimate), read_tum(ns.groundtruth), success=not ns.aborted
    )
    if ns.out_dir is not None:
        os.makedirs(ns.out_dir, exist_ok=True)
        report.write_csv(os.path.join(ns.out_dir, "metrics.csv"))
    print(numpy_to_json(report.summary(), indent=2))
    return EXIT_COMPLETED


COMMANDS = {"run": cmd_run, "simulate": cmd_simulate, "evaluate": cmd_evaluate}


def main(argv=None):
    ns = _parse_args(argv)
    _setup_logging(ns.verbose)
    try:
        return COMMANDS[ns.command](ns)
    except (InputError, NoOverlap, FileNotFoundError) as ex:
        print(f"ctmv-slam: {ex}", file=sys.stderr)
        return EXIT_INVALID_INPUT
