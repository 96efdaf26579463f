"""
Dynamic-beta preference optimization on a toy enumerable policy: generate synthetic preference data,
train, evaluate win rates against the ground-truth reward, and run experiment sweeps
"""

import os
import sys

import runez
from runez.render import PrettyTable
from runez.schema import ValidationException

from betalab.config import apply_tunables, CHOSEN_EMPIRICAL, load_run_config, parsed_settings, SFT
from betalab.core import BetalabException, InvalidInput, read_json, read_jsonl
from betalab.evaluator import dataset_statistics, discrepancy_histogram, empirical_win_rate, exact_win_rate, temperature_sweep
from betalab.evaluator import write_histogram_csv
from betalab.harness import DEFAULT_REPLICATES, load_results, preset, PRESETS, report, run_sweep, SweepSpec
from betalab.policy import load_policy, policy_digest
from betalab.reward import load_ground_truth
from betalab.synth import write_generated
from betalab.trainer import train


def _add_config_options(parser):
    parser.add_argument("--config", "-c", metavar="PATH", help="Flat json run config.")
    parser.add_argument("--set", "-s", action="append", metavar="KEY=VALUE", help="Override a config key (repeatable).")


def _run_config(args):
    overrides, tunables = parsed_settings(args.set)
    apply_tunables(tunables)
    return load_run_config(args.config, overrides=overrides)


def _data_path(folder, name):
    path = os.path.join(folder, name)
    if not os.path.exists(path):
        raise InvalidInput("%s does not exist, generate data with 'betalab gen-data'" % runez.short(path))

    return path


def _run_info(folder):
    path = os.path.join(folder, "run.json")
    if not os.path.exists(path):
        raise InvalidInput("%s is not a training run folder" % runez.short(folder))

    return read_json(path)


def _print_dict(data, border="colon"):
    table = PrettyTable(2, border=border)
    for key, value in data.items():
        table.add_row(key, "%.6g" % value if isinstance(value, float) else value)

    print(table)


def cmd_gen_data():
    """Generate synthetic train/test preference data, with its ground-truth reward"""
    parser = runez.cli.parser()
    _add_config_options(parser)
    parser.add_argument("--out", "-o", required=True, metavar="DIR", help="Folder where to write generated data.")
    args = parser.parse_args()

    cfg = _run_config(args)
    train_ds, test_ds, _ = write_generated(cfg.gen, args.out)
    print("train: %s" % train_ds)
    _print_dict(dataset_statistics(train_ds))
    print("test: %s" % test_ds)


def cmd_train():
    """Train a policy with dynamic-beta DPO, starting from SFT on chosen responses"""
    parser = runez.cli.parser()
    _add_config_options(parser)
    parser.add_argument("--data", "-d", required=True, metavar="DIR", help="Folder produced by 'gen-data'.")
    parser.add_argument("--out", "-o", required=True, metavar="DIR", help="Folder where to write checkpoint, metrics and policy.")
    parser.add_argument("--resume", action="store_true", help="Continue from checkpoint found in --out.")
    parser.add_argument("--max-steps", type=int, help="Stop after this many steps (run can be resumed later).")
    args = parser.parse_args()

    cfg = _run_config(args)
    dataset = read_jsonl(_data_path(args.data, "train.jsonl"))
    resume_from = None
    if args.resume:
        resume_from = _data_path(args.out, "checkpoint.json")

    runez.ensure_folder(args.out)
    info = dict(data=os.path.abspath(args.data), config=cfg.to_flat())
    runez.save_json(info, os.path.join(args.out, "run.json"))
    with runez.log.timeit("Training on %s" % dataset):
        state, reports = train(dataset, cfg.train, folder=args.out, resume_from=resume_from, max_steps=args.max_steps)

    if reports:
        print("step %s, loss %.6g, effective beta %.4g" % (state.step, reports[-1].loss, reports[-1].effective_beta))

    print("reference %s" % policy_digest(state.ref)[:16])


def cmd_eval():
    """Win rate of a trained policy against a baseline, judged by the ground-truth reward"""
    parser = runez.cli.parser()
    parser.add_argument("--run", "-r", required=True, metavar="DIR", help="Folder produced by 'train'.")
    parser.add_argument("--data", "-d", metavar="DIR", help="Data folder (default: the one used for training).")
    parser.add_argument("--baseline", choices=[SFT, CHOSEN_EMPIRICAL], help="Baseline to compare against (default: from run config).")
    parser.add_argument("--ties", choices=["separate", "split"], help="How to count ties (default: from run config).")
    parser.add_argument("--temperatures", metavar="CSV", help="Also report win rate at these sampling temperatures.")
    parser.add_argument("--set", "-s", action="append", metavar="KEY=VALUE", help="Tunable (eg: betalab.mc_samples=1000).")
    args = parser.parse_args()

    info = _run_info(args.run)
    overrides, tunables = parsed_settings(args.set)
    apply_tunables(tunables)
    cfg = load_run_config(None, overrides=dict(info.get("config") or {}, **overrides))
    baseline = args.baseline or cfg.evaluation.baseline
    ties = args.ties or cfg.evaluation.ties
    data = args.data or info.get("data")
    gt = load_ground_truth(_data_path(data, "ground_truth.json"))
    policy = load_policy(_data_path(args.run, "policy.json"))
    if baseline == CHOSEN_EMPIRICAL:
        result = empirical_win_rate(policy, read_jsonl(_data_path(data, "test.jsonl")), gt, ties=ties)

    else:
        result = exact_win_rate(policy, load_policy(_data_path(args.run, "reference.json")), gt, ties=ties)

    summary = dict(result.to_dict(), baseline=baseline, ties=ties)
    if args.temperatures:
        reference = load_policy(_data_path(args.run, "reference.json"))
        temperatures = [float(t) for t in runez.flattened(args.temperatures, split=",")]
        swept = temperature_sweep(policy, reference, gt, temperatures, ties=ties)
        summary["temperatures"] = dict((repr(t), r.win_rate) for t, r in swept)

    runez.save_json(summary, os.path.join(args.run, "eval.json"))
    print("win rate vs %s: %.4f (ties %.4f, %s)" % (baseline, result.win_rate, result.tie_rate, result.method))
    for t, win_rate in summary.get("temperatures", {}).items():
        print("  temperature %s: %.4f" % (t, win_rate))


def cmd_sweep():
    """Run a grid of training runs (from a spec file, or a named preset) and summarize win rates"""
    parser = runez.cli.parser()
    parser.add_argument("--spec", metavar="PATH", help="Sweep spec json file.")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="Named experiment preset.")
    parser.add_argument("--out", "-o", metavar="DIR", help="Outputs folder (default: from spec).")
    parser.add_argument("--replicates", type=int, help="Seeds per cell (default: from spec, or %s)." % DEFAULT_REPLICATES)
    parser.add_argument("--workers", "-w", type=int, help="Cells to run concurrently (default: betalab.workers, or 1).")
    parser.add_argument("--by", help="Report grouping, comma separated row keys (default: cell).")
    parser.add_argument("--set", "-s", action="append", metavar="KEY=VALUE", help="Override a base config key, or a tunable.")
    args = parser.parse_args()

    if bool(args.spec) == bool(args.preset):
        sys.exit("Specify exactly one of --spec or --preset")

    overrides, tunables = parsed_settings(args.set)
    apply_tunables(tunables)
    if args.preset:
        spec = preset(args.preset, args.out or args.preset, replicates=args.replicates or DEFAULT_REPLICATES, base=overrides)

    else:
        spec = SweepSpec.from_file(args.spec, outputs_dir=args.out)
        if overrides or args.replicates:
            data = spec.to_dict()
            data["base"].update(overrides)
            data["replicates"] = args.replicates or spec.replicates
            spec = SweepSpec.from_dict(data)

    rows = run_sweep(spec, workers=args.workers)
    summary = report(rows, grouping=args.by or "cell", comparisons=None if args.by else spec.comparisons)
    runez.write(os.path.join(spec.outputs_dir, "report.txt"), "%s\n" % summary, logger=False)
    print(summary)


def cmd_analyze():
    """Discrepancy histogram of a trained run, or summary of a finished sweep"""
    parser = runez.cli.parser()
    parser.add_argument("--run", "-r", metavar="DIR", help="Folder produced by 'train'.")
    parser.add_argument("--sweep", metavar="DIR", help="Folder produced by 'sweep'.")
    parser.add_argument("--split", choices=["train", "test"], default="train", help="Dataset split to analyze.")
    parser.add_argument("--hist-bins", type=int, help="Number of histogram bins (default: from run config).")
    parser.add_argument("--by", help="Sweep report grouping, comma separated row keys (default: cell).")
    args = parser.parse_args()

    if bool(args.run) == bool(args.sweep):
        sys.exit("Specify exactly one of --run or --sweep")

    if args.sweep:
        spec = SweepSpec.from_file(_data_path(args.sweep, "sweep.json"), outputs_dir=args.sweep)
        rows = load_results(_data_path(args.sweep, "results.csv"))
        print(report(rows, grouping=args.by or "cell", comparisons=None if args.by else spec.comparisons))
        return

    info = _run_info(args.run)
    cfg = load_run_config(None, overrides=info.get("config"))
    dataset = read_jsonl(_data_path(info.get("data"), "%s.jsonl" % args.split))
    theta = load_policy(_data_path(args.run, "policy.json"))
    ref = load_policy(_data_path(args.run, "reference.json"))
    histogram = discrepancy_histogram(theta, ref, dataset, cfg.beta.beta0, bins=args.hist_bins or cfg.evaluation.hist_bins)
    write_histogram_csv(histogram, os.path.join(args.run, "histogram_%s.csv" % args.split))
    print("discrepancy on %s: %s" % (args.split, histogram))
    _print_dict(dict(p05=histogram.p05, p95=histogram.p95))
    _print_dict(dataset_statistics(dataset))


def main():
    try:
        runez.cli.run_cmds()

    except (BetalabException, ValidationException) as e:
        sys.exit(str(e))


if __name__ == "__main__":
    main()
