"""Experiment driver: generate / train / evaluate / policy / budget.

Every command is reproducible from (config file, seed): all randomness
flows from the seed, and outputs are written deterministically so a
rerun produces byte-identical files.  Exit codes: 0 success, 1 usage
error, 2 numerical fault.
"""

import csv
import functools
import json
import os
import sys

import click
import numpy as np

from . import budget as budget_mod
from . import sysid
from .control import (CostSpec, GroundTruthStepper, IlqgConfig,
                      LearnableStepper, Policy, com_velocity_cost,
                      optimize_policy, transfer_evaluate)
from .dynamics import pack_state
from .errors import (DivergenceFault, FormatError, NumericalFault,
                     TensegError, UsageError)
from .ground_truth import GroundTruthConfig, GroundTruthEngine
from .robot import load_robot
from .trajectory import Trajectory


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (UsageError, FormatError, FileNotFoundError, KeyError,
                json.JSONDecodeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        except (NumericalFault, DivergenceFault) as exc:
            click.echo(f"numerical fault: {exc}", err=True)
            sys.exit(2)
        except TensegError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    return wrapper


def _load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _gt_engine(cfg):
    gtc = cfg.get("ground_truth", {})
    return GroundTruthEngine(GroundTruthConfig(
        robot=cfg.get("robot", "sixbar"),
        control_interval=int(gtc.get("control_interval", 100)),
        gravity_scale=float(gtc.get("gravity_scale", 1.0)),
        substeps=int(gtc.get("substeps", 4)),
    ))


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v
                        for v in row])


def _role(i, n):
    if i == 0:
        return "train"
    if i == 1 and n > 1:
        return "validation"
    return "test"


@click.group()
def main():
    """Differentiable tensegrity physics experiments."""


# ---------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------

@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@_guarded
def generate(config_path, seed, out_dir):
    """Sample ground-truth trajectories and a manifest."""
    cfg = _load_config(config_path)
    scenario = cfg.get("scenario", "hang")
    n = int(cfg.get("trajectories", 12))
    steps = int(cfg.get("steps", 5000))
    os.makedirs(out_dir, exist_ok=True)
    gt = _gt_engine(cfg)
    entries = []
    step_log = {}
    for i in range(n):
        role = _role(i, n)
        mark = gt.total_steps()
        entry = {"index": i, "seed": seed + i, "role": role}
        try:
            traj = gt.sample(scenario, steps, seed=seed + i)
        except DivergenceFault as exc:
            entry["fault"] = {"kind": "divergence", "step": exc.step}
            entries.append(entry)
            continue
        fname = f"{scenario}-{i:02d}.jsonl"
        traj.save(os.path.join(out_dir, fname))
        entry["file"] = fname
        entry["extra"] = traj.extra
        entries.append(entry)
        purpose = f"{scenario}-{role}"
        step_log[purpose] = step_log.get(purpose, 0) \
            + (gt.total_steps() - mark)
    # settling happens once, on the first sample that needs it
    if "settle" in gt.step_log:
        step_log["settle"] = gt.step_log["settle"]
    _write_json(os.path.join(out_dir, "manifest.json"),
                {"robot": cfg.get("robot", "sixbar"),
                 "scenario": scenario, "seed": seed, "steps": steps,
                 "trajectories": entries})
    budget_mod.write_fragment(out_dir, f"generate-{scenario}", step_log)
    click.echo(f"wrote {sum('file' in e for e in entries)} trajectories "
               f"to {out_dir}")


def _manifest_trajectories(data_dir, roles=None):
    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    out = []
    for entry in manifest["trajectories"]:
        if "file" not in entry:
            continue
        if roles and entry["role"] not in roles:
            continue
        out.append(Trajectory.load(os.path.join(data_dir,
                                                entry["file"])))
    return manifest, out


# ---------------------------------------------------------------------
# train
# ---------------------------------------------------------------------

@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True),
              required=True, help="directory with generated trajectories")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(),
              default=None, help="prior-stage checkpoint")
@_guarded
def train(config_path, seed, out_dir, data_dir, checkpoint_path):
    """Run one identification stage."""
    cfg = _load_config(config_path)
    tc = cfg.get("train", {})
    stage = tc.get("stage", "noncontact")
    os.makedirs(out_dir, exist_ok=True)
    model = load_robot(cfg.get("robot", "sixbar"))
    if checkpoint_path is not None:
        if not os.path.exists(checkpoint_path):
            raise UsageError(
                f"prerequisite checkpoint missing: {checkpoint_path}")
        ident = sysid.IdentifiedModel.load(checkpoint_path)
    else:
        ident = sysid.IdentifiedModel(robot=model.name)
    _, train_trajs = _manifest_trajectories(data_dir, roles=("train",))
    _, val_trajs = _manifest_trajectories(data_dir,
                                          roles=("validation",))
    if not train_trajs:
        raise UsageError(f"no training trajectory in {data_dir}")
    needs_ages = stage in ("contact-mlp", "mlp-only")
    ds = sysid.dataset_from_trajectories(train_trajs, model=model,
                                         contact_ages=needs_ages)
    vs = sysid.dataset_from_trajectories(val_trajs, model=model,
                                         contact_ages=needs_ages) \
        if val_trajs else None
    config = sysid.TrainConfig(
        stage=stage,
        epochs=int(tc.get("epochs", 40)),
        batch_size=int(tc.get("batch_size", 256)),
        lr=float(tc.get("lr", 3e-5 if "mlp" in stage else 0.1)),
        halve_every=int(tc.get("halve_every", 10)),
        seed=seed,
        mlp_seed=int(tc.get("mlp_seed", seed)),
    )
    ident, curves = sysid.train_stage(ident, model, ds, config,
                                      validation=vs)
    ident.save(os.path.join(out_dir, f"checkpoint-{stage}.json"))
    _write_csv(os.path.join(out_dir, f"loss-{stage}.csv"),
               ["epoch", "lr", "train_loss", "val_loss"],
               [[c["epoch"], c["lr"], c["train_loss"],
                 c.get("val_loss", "")] for c in curves])
    click.echo(f"stage {stage}: final train loss "
               f"{curves[-1]['train_loss']:.3e}" if curves
               else f"stage {stage}: aborted before first epoch")


# ---------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------

@main.command()
@click.option("--checkpoint", "checkpoint_path",
              type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True),
              required=True)
@click.option("--metric", type=click.Choice(["CoM", "position",
                                             "orientation"]),
              default="CoM", show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@_guarded
def evaluate(checkpoint_path, data_dir, metric, out_dir):
    """Open-loop rollout error curves over the test split."""
    ident = sysid.IdentifiedModel.load(checkpoint_path)
    model = load_robot(ident.robot)
    manifest, tests = _manifest_trajectories(data_dir, roles=("test",))
    if not tests:
        raise UsageError(f"no test trajectories in {data_dir}")
    os.makedirs(out_dir, exist_ok=True)
    curves = []
    for traj in tests:
        curve, diverged = sysid.rollout_error(ident, model, traj,
                                              metric=metric)
        if diverged is not None:
            pad = np.full(traj.n_steps + 1 - curve.shape[0], np.nan)
            curve = np.concatenate([curve, pad])
        curves.append(curve)
    arr = np.stack(curves)
    mean = np.nanmean(arr, axis=0)
    var = np.nanvar(arr, axis=0)
    name = f"error-{manifest['scenario']}-{metric}.csv"
    _write_csv(os.path.join(out_dir, name), ["step", "mean", "variance"],
               [[t, float(mean[t]), float(var[t])]
                for t in range(mean.shape[0])])
    click.echo(f"{metric} error at final step: {mean[-1]:.6g} "
               f"(over {len(tests)} trajectories)")


# ---------------------------------------------------------------------
# policy
# ---------------------------------------------------------------------

def _cost_from_config(cfg, model):
    cc = cfg.get("cost", {})
    spec = CostSpec(
        target=tuple(cc.get("target", (10.0, 0.0, 0.0))),
        weights=tuple(cc.get("weights", (1.0, 0.5, 0.1))),
        control_penalty=float(cc.get("control_penalty", 1e-6)),
        kl_weight=float(cc.get("kl_weight", 0.005)))
    return com_velocity_cost(model, spec)


@main.command("policy")
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--checkpoint", "checkpoint_path",
              type=click.Path(exists=True), required=True)
@click.option("--engine", "engines",
              type=click.Choice(["learnable", "ground-truth", "both"]),
              default="both", show_default=True)
@_guarded
def policy_cmd(config_path, seed, out_dir, checkpoint_path, engines):
    """Train locomotion policies on both engines and compare on the
    reference simulator."""
    cfg = _load_config(config_path)
    pc = cfg.get("policy", {})
    robot = cfg.get("robot", "sixbar")
    os.makedirs(out_dir, exist_ok=True)
    model = load_robot(robot)
    ident = sysid.IdentifiedModel.load(checkpoint_path)
    gravity = float(cfg.get("ground_truth", {}).get("gravity_scale",
                                                    1.0))
    gt = _gt_engine(cfg)
    x0 = pack_state(gt.settled_state())
    cost = _cost_from_config(cfg, model)
    ilqg = IlqgConfig(
        iterations=int(pc.get("iterations", 20)),
        samples=int(pc.get("samples", 40)),
        horizon=int(pc.get("horizon", 50)),
        interval=int(pc.get("interval", 100)),
        sigma0=float(pc.get("sigma0", 5.0)),
        regression_samples=int(pc.get("regression_samples", 0)),
        seed=seed)
    seeds = [int(s) for s in pc.get("seeds", [seed])]
    arms = ["learnable", "ground-truth"] if engines == "both" \
        else [engines]
    results = {arm: [] for arm in arms}
    for s in seeds:
        for arm in arms:
            run = IlqgConfig(**{**ilqg.__dict__, "seed": s})
            if arm == "learnable":
                eng = ident.engine(model, gravity_scale=gravity)
                stepper = LearnableStepper(eng, x0, run.interval)
            else:
                stepper = GroundTruthStepper(gt, x0, run.interval,
                                             purpose="policy-training")
            pol, curve = optimize_policy(stepper, cost, run)
            pol.meta = {"arm": arm, "seed": s, "robot": robot}
            tag = f"{arm}-seed{s}"
            pol.save(os.path.join(out_dir, f"policy-{tag}.json"))
            evaluator = GroundTruthStepper(gt, x0, run.interval,
                                           purpose="policy-eval")
            ev = transfer_evaluate(pol, evaluator, cost, episodes=1)
            rows = []
            for k, c in enumerate(ev["costs"][0]):
                com = ev["com"][0][k + 1]
                rows.append([k, float(c), com[0], com[1], com[2]])
            _write_csv(os.path.join(out_dir, f"transfer-{tag}.csv"),
                       ["step", "cost", "com_x", "com_y", "com_z"],
                       rows)
            results[arm].append({
                "seed": s, "train_curve": curve,
                "eval_cost": ev["mean_cost"],
                "diverged": ev["diverged"][0],
                "com_x_displacement":
                    (ev["com"][0][-1][0] - ev["com"][0][0][0])
                    if ev["com"][0] else None})
    budget_mod.write_fragment(out_dir, f"policy-seed{seed}",
                              gt.step_log)
    summary = {"robot": robot, "seeds": seeds}
    for arm in arms:
        costs = [r["eval_cost"] for r in results[arm]]
        summary[arm] = {"runs": results[arm],
                        "mean_cost": float(np.mean(costs)),
                        "std_cost": float(np.std(costs))}
    if len(arms) == 2:
        summary["cost_ratio"] = (summary["learnable"]["mean_cost"]
                                 / summary["ground-truth"]["mean_cost"])
    merged = budget_mod.collect(out_dir)
    summary["budget"] = budget_mod.report(
        merged, robot if robot in budget_mod.FULL_CONFIG else "sixbar")
    _write_json(os.path.join(out_dir, "policy-summary.json"), summary)
    click.echo(json.dumps({k: summary[k] for k in summary
                           if k not in ("budget",)},
                          default=str)[:400])


# ---------------------------------------------------------------------
# budget
# ---------------------------------------------------------------------

@main.command("budget")
@click.option("--out", "out_dir", type=click.Path(exists=True),
              required=True,
              help="directory whose ledger fragments to merge")
@click.option("--robot", default="sixbar", show_default=True)
@_guarded
def budget_cmd(out_dir, robot):
    """Merge ledger fragments and print the C_PE + C_GT vs C_RL report."""
    merged = budget_mod.collect(out_dir)
    rep = budget_mod.report(merged, robot)
    _write_json(os.path.join(out_dir, "budget-report.json"), rep)
    click.echo(json.dumps(rep, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
