"""Ground-truth data accounting.

Every reference-simulator step lands in exactly one ledger fragment
(one JSON file per command invocation, rewritten deterministically so
reruns stay byte-identical).  The report compares the identification
budget C_PE plus any ground-truth steps spent training the engine-side
policy (C_GT) against the cost of training the policy directly on the
reference simulator (C_RL).
"""

import json
import os

# the published full-scale experiment, for the extrapolated report
FULL_CONFIG = {
    "sixbar": {"c_pe": 10_000, "c_rl": 20 * 40 * 5000},
    "threebar": {"c_pe": 10_000, "c_rl": 20 * 40 * 15000},
}

_PREFIX = "budget-"

# purposes charged to each report bucket
_PE_PURPOSES = ("settle", "hang", "throw", "rest")
_RL_PURPOSES = ("policy-training", "policy-init")


def write_fragment(out_dir, name, step_log):
    """Persist one command's ground-truth step counts."""
    path = os.path.join(out_dir, f"{_PREFIX}{name}.json")
    with open(path, "w") as fh:
        json.dump({k: int(v) for k, v in sorted(step_log.items())}, fh,
                  sort_keys=True, indent=1)
        fh.write("\n")
    return path


def collect(out_dir):
    """Merge all fragments in a directory into purpose -> steps."""
    merged = {}
    for fname in sorted(os.listdir(out_dir)):
        if not (fname.startswith(_PREFIX) and fname.endswith(".json")):
            continue
        with open(os.path.join(out_dir, fname)) as fh:
            for k, v in json.load(fh).items():
                merged[k] = merged.get(k, 0) + int(v)
    return merged


def _bucket(purpose):
    base = purpose.split("/")[-1]
    if base in _RL_PURPOSES:
        return "c_rl"
    if base == "policy-eval" or base.endswith("-test"):
        return "evaluation"
    if base in _PE_PURPOSES or base.startswith("sysid") \
            or base.endswith("-train") or base.endswith("-validation"):
        return "c_pe"
    return "other"


def report(merged, robot="sixbar"):
    """Desk-scale honest ratio plus the published-config extrapolation.

    C_PE counts every step used to build identification data (training,
    validation and the settling prefix); C_GT is ground-truth usage by
    the engine-side policy arm (zero by construction); C_RL is the
    direct-training arm.  Test trajectories are evaluation only and sit
    outside the comparison, mirroring the published accounting.
    """
    buckets = {"c_pe": 0, "c_rl": 0, "evaluation": 0, "other": 0}
    for purpose, steps in merged.items():
        buckets[_bucket(purpose)] += steps
    c_pe, c_rl = buckets["c_pe"], buckets["c_rl"]
    c_gt = 0
    full = FULL_CONFIG[robot]
    return {
        "robot": robot,
        "per_purpose": {k: int(v) for k, v in sorted(merged.items())},
        "c_pe": c_pe,
        "c_gt": c_gt,
        "c_rl": c_rl,
        "evaluation_steps": buckets["evaluation"],
        "other_steps": buckets["other"],
        "ratio": (c_pe + c_gt) / c_rl if c_rl else None,
        "extrapolated": {
            "c_pe": full["c_pe"],
            "c_rl": full["c_rl"],
            "ratio": full["c_pe"] / full["c_rl"],
        },
    }
