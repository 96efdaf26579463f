"""
Grid sweeps: run every combination of a few config axes for several seeds, collect one results row per run,
and summarize rows per cell with paired sign tests between named cells.

A sweep spec is a json object:
    {
        "base": {flat run config keys},
        "axes": [["beta0", [0.05, 0.5]], ["method", [{"label": "dpo", "alpha": 0, "strategy": "none"}, ...]]],
        "replicates": 5,
        "outputs_dir": "path/to/outputs",
        "comparisons": [["method=beta_dpo", "method=dpo"]]
    }

Axis values are either plain values for the config key named by the axis, or objects carrying a 'label'
plus the flat settings they stand for.
"""

import csv
import io
import itertools
import logging
import math
import os
import re
import threading
import time
from concurrent.futures import as_completed, ThreadPoolExecutor

import numpy as np
import runez
from runez.render import PrettyTable
from runez.schema import ValidationException

from betalab.config import CHOSEN_EMPIRICAL, key_owners, RunConfig
from betalab.core import BetalabException, canonical_json, InvalidInput, read_json, read_jsonl, StateError
from betalab.evaluator import empirical_win_rate, exact_win_rate
from betalab.reward import load_ground_truth
from betalab.synth import write_generated
from betalab.trainer import train

LOG = logging.getLogger(__name__)
DEFAULT_REPLICATES = 5
METRIC_COLUMNS = ("win_rate", "tie_rate", "final_loss", "mean_beta", "runtime")
ROW_PREFIX = ("cell_id", "cell", "replicate", "seed")


def default_workers():
    return runez.config.get_int("betalab.workers", default=1, minimum=1)


def _label(value):
    if isinstance(value, float):
        return repr(value)

    return str(value).lower() if isinstance(value, bool) else str(value)


class AxisValue(runez.Slotted):
    """One value of a sweep axis: a short label, and the flat settings it stands for"""

    __slots__ = ["label", "overrides"]

    def __repr__(self):
        return self.label

    @classmethod
    def from_spec(cls, axis, value):
        if isinstance(value, dict):
            overrides = dict(value)
            label = overrides.pop("label", None)
            if label is None:
                label = ",".join("%s=%s" % (k, _label(v)) for k, v in sorted(overrides.items())) or "default"

            return cls(label=str(label), overrides=overrides)

        return cls(label=_label(value), overrides={axis: value})


class SweepCell(runez.Slotted):
    """One run of a sweep: a combination of axis values, for a given replicate"""

    __slots__ = ["index", "labels", "overrides", "replicate", "seed"]

    def __repr__(self):
        return self.cell_id

    @property
    def name(self):
        """Name shared by all replicates of this combination, used to refer to it in comparisons"""
        return ",".join("%s=%s" % (k, v) for k, v in self.labels.items()) or "base"

    @property
    def cell_id(self):
        return "%s-r%s" % (re.sub(r"[^\w.=,+-]+", "_", self.name), self.replicate)

    def row(self):
        row = dict(cell_id=self.cell_id, cell=self.name, replicate=self.replicate, seed=self.seed)
        row.update(self.labels)
        return row


class SweepSpec:
    """Base config, axes to sweep, number of seeds per cell, and where outputs go"""

    def __init__(self, base=None, axes=None, replicates=DEFAULT_REPLICATES, outputs_dir="sweep", comparisons=None):
        self.base = dict(base or {})
        self.axes = [(axis, list(values)) for axis, values in axes or ()]
        self.replicates = replicates
        self.outputs_dir = outputs_dir
        self.comparisons = [tuple(pair) for pair in comparisons or ()]

    def __repr__(self):
        return "%s axes, %s replicates -> %s" % (len(self.axes), self.replicates, runez.short(self.outputs_dir))

    @classmethod
    def from_dict(cls, data, outputs_dir=None):
        if not isinstance(data, dict):
            raise InvalidInput("sweep spec must be a json object")

        extras = sorted(set(data) - {"base", "axes", "replicates", "outputs_dir", "comparisons"})
        if extras:
            raise InvalidInput("unknown sweep spec key(s): %s" % ", ".join(extras))

        try:
            return cls(
                base=data.get("base"),
                axes=data.get("axes"),
                replicates=int(data.get("replicates", DEFAULT_REPLICATES)),
                outputs_dir=outputs_dir or data.get("outputs_dir") or "sweep",
                comparisons=data.get("comparisons"),
            ).validated()

        except (TypeError, ValueError) as e:
            if isinstance(e, BetalabException):
                raise

            raise InvalidInput("invalid sweep spec: %s" % e)

    @classmethod
    def from_file(cls, path, outputs_dir=None):
        return cls.from_dict(read_json(path), outputs_dir=outputs_dir)

    def to_dict(self):
        return dict(
            base=self.base,
            axes=[[axis, values] for axis, values in self.axes],
            replicates=self.replicates,
            outputs_dir=str(self.outputs_dir),
            comparisons=[list(pair) for pair in self.comparisons],
        )

    @property
    def axis_names(self):
        return [axis for axis, _ in self.axes]

    @property
    def columns(self):
        return list(ROW_PREFIX) + self.axis_names + list(METRIC_COLUMNS) + ["error"]

    def base_config(self):
        return RunConfig.from_flat(self.base, source="sweep base")

    def validated(self):
        if self.replicates < 1:
            raise InvalidInput("replicates must be >= 1, got %s" % self.replicates)

        names = self.axis_names
        if len(set(names)) != len(names):
            raise InvalidInput("duplicate axis in %s" % names)

        reserved = set(ROW_PREFIX) | set(METRIC_COLUMNS) | {"error"}
        base = self.base_config()
        for axis, values in self.axes:
            if axis in reserved:
                raise InvalidInput("'%s' can't be used as an axis name" % axis)

            if not values:
                raise InvalidInput("axis '%s' has no values" % axis)

            for value in values:
                if not isinstance(value, dict) and not key_owners(axis):
                    raise InvalidInput("axis '%s' is not a config key, its values must be objects with a 'label'" % axis)

                base.with_overrides(AxisValue.from_spec(axis, value).overrides)

        known = set(cell.name for cell in self.cells())
        for pair in self.comparisons:
            if len(pair) != 2 or any(name not in known for name in pair):
                raise InvalidInput("invalid comparison %s, known cells: %s" % (list(pair), ", ".join(sorted(known))))

        return self

    def cells(self):
        """
        Returns:
            (list[SweepCell]): Cartesian product of axes, times replicates (replicate r runs with seed base + r)
        """
        base_seed = self.base_config().gen.seed
        axes = [[(axis, AxisValue.from_spec(axis, v)) for v in values] for axis, values in self.axes]
        result = []
        for combination in itertools.product(*axes):
            labels = dict((axis, value.label) for axis, value in combination)
            overrides = {}
            for _, value in combination:
                overrides.update(value.overrides)

            for replicate in range(self.replicates):
                seed = base_seed + replicate
                cell_overrides = dict(overrides, seed=seed)
                result.append(SweepCell(index=len(result), labels=labels, overrides=cell_overrides, replicate=replicate, seed=seed))

        return result

    def cell_config(self, cell):
        merged = dict(self.base)
        merged.update(cell.overrides)
        return RunConfig.from_flat(merged, source=cell.cell_id)


class DatasetCache:
    """Generated datasets shared between cells, keyed by the digest of their generator config"""

    def __init__(self, folder):
        self.folder = folder
        self._lock = threading.Lock()
        self._locks = {}
        self._loaded = {}

    def __repr__(self):
        return "%s datasets in %s" % (len(self._loaded), runez.short(self.folder))

    def get(self, gen_cfg):
        """
        Returns:
            (PreferenceDataset, PreferenceDataset, GroundTruthReward): Train set, test set and ground truth for 'gen_cfg'
        """
        digest = gen_cfg.digest()
        with self._lock:
            lock = self._locks.setdefault(digest, threading.Lock())

        with lock:
            if digest not in self._loaded:
                self._loaded[digest] = self._load_or_generate(gen_cfg, digest)

            return self._loaded[digest]

    def _load_or_generate(self, gen_cfg, digest):
        folder = os.path.join(self.folder, digest[:16])
        if os.path.exists(os.path.join(folder, "gen_config.json")):
            train_ds = read_jsonl(os.path.join(folder, "train.jsonl"))
            if train_ds.generator_config_digest == digest:
                LOG.debug("Reusing dataset %s", runez.short(folder))
                test_ds = read_jsonl(os.path.join(folder, "test.jsonl"))
                return train_ds, test_ds, load_ground_truth(os.path.join(folder, "ground_truth.json"))

            LOG.warning("Regenerating %s, its digest doesn't match", runez.short(folder))

        return write_generated(gen_cfg, folder, logger=LOG.debug)


def run_cell(spec, cell, cache):
    """
    Args:
        spec (SweepSpec): Sweep the cell belongs to
        cell (SweepCell): Cell to run
        cache (DatasetCache): Where to get (or generate) its dataset

    Returns:
        (dict): Results row, with error text in column 'error' if the cell failed
    """
    row = cell.row()
    started = time.time()
    try:
        cfg = spec.cell_config(cell)
        train_ds, test_ds, gt = cache.get(cfg.gen)
        folder = os.path.join(spec.outputs_dir, "runs", cell.cell_id)
        state, reports = train(train_ds, cfg.train, folder=folder)
        if cfg.evaluation.baseline == CHOSEN_EMPIRICAL:
            result = empirical_win_rate(state.theta, test_ds, gt, ties=cfg.evaluation.ties)

        else:
            result = exact_win_rate(state.theta, state.ref, gt, ties=cfg.evaluation.ties)

        row.update(
            win_rate=result.win_rate,
            tie_rate=result.tie_rate,
            final_loss=reports[-1].loss if reports else float("nan"),
            mean_beta=float(np.mean([r.effective_beta for r in reports])) if reports else float("nan"),
            runtime=round(time.time() - started, 3),
            error="",
        )
        summary = dict(row, config=cfg.to_flat(), per_prompt=result.per_prompt, method=result.method, steps=state.step)
        runez.save_json(summary, os.path.join(folder, "summary.json"), logger=False)

    except (BetalabException, ValidationException, runez.system.AbortException) as e:
        LOG.warning("Cell %s failed: %s", cell.cell_id, e)
        row.update(dict((k, float("nan")) for k in METRIC_COLUMNS))
        row.update(runtime=round(time.time() - started, 3), error=str(e) or e.__class__.__name__)

    return row


def _parsed_row(row):
    """Row as read back from csv, numeric columns converted"""
    result = dict(row)
    for key in ("replicate", "seed"):
        result[key] = int(result[key])

    for key in METRIC_COLUMNS:
        result[key] = float(result[key]) if result.get(key) not in (None, "") else float("nan")

    result["error"] = result.get("error") or ""
    return result


def _csv_value(value):
    return repr(value) if isinstance(value, float) else value


class ResultsWriter:
    """Single appender of 'results.csv', rows are flushed as soon as their cell completes"""

    def __init__(self, path, columns):
        self.path = path
        self.columns = list(columns)

    def __repr__(self):
        return runez.short(self.path)

    def completed_rows(self):
        """
        Returns:
            (dict): Rows of cells that completed without error during a previous run, by cell_id
        """
        if not os.path.exists(self.path):
            return {}

        with io.open(self.path) as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != self.columns:
                raise StateError("%s was produced by a different sweep spec, use another outputs_dir" % runez.short(self.path))

            rows = {}
            for row in reader:
                row = _parsed_row(row)
                rows[row["cell_id"]] = row

        return dict((k, v) for k, v in rows.items() if not v["error"])

    def add(self, row):
        exists = os.path.exists(self.path)
        self._write([] if exists else [self.columns], [row], "a")

    def rewrite(self, rows):
        self._write([self.columns], rows, "w")

    def _write(self, header, rows, mode):
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerows(header)
        writer.writerows([_csv_value(row.get(k, "")) for k in self.columns] for row in rows)
        with io.open(self.path, mode) as fh:
            fh.write(buffer.getvalue())


def _check_same_sweep(spec, path):
    """Rows already in 'outputs_dir' can be reused only if base config and axes are unchanged"""
    if os.path.exists(path):
        previous = read_json(path)
        current = spec.to_dict()
        changed = [key for key in ("base", "axes") if canonical_json(previous.get(key)) != canonical_json(current[key])]
        if changed:
            msg = "%s was produced by a different sweep spec (%s changed), use another outputs_dir"
            raise StateError(msg % (runez.short(spec.outputs_dir), " and ".join(changed)))


def run_sweep(spec, workers=None):
    """
    Args:
        spec (SweepSpec): Sweep to run (or resume, completed cells found in 'outputs_dir/results.csv' are skipped)
        workers (int | None): Number of cells to run concurrently (default: configured 'betalab.workers')

    Returns:
        (list[dict]): One row per cell, in cell order
    """
    spec.validated()
    workers = workers or default_workers()
    sweep_json = os.path.join(spec.outputs_dir, "sweep.json")
    _check_same_sweep(spec, sweep_json)
    results = ResultsWriter(os.path.join(spec.outputs_dir, "results.csv"), spec.columns)
    done = results.completed_rows()
    runez.ensure_folder(spec.outputs_dir, logger=False)
    runez.save_json(spec.to_dict(), sweep_json, logger=False)
    cells = spec.cells()
    pending = [cell for cell in cells if cell.cell_id not in done]
    LOG.debug("Sweep %s: %s cells, %s to run, %s worker(s)", spec, len(cells), len(pending), workers)
    cache = DatasetCache(os.path.join(spec.outputs_dir, "data"))
    with runez.log.timeit("Sweep of %s cells" % len(pending), logger=LOG.debug):
        if workers == 1 or len(pending) < 2:
            for cell in pending:
                _completed(results, done, run_cell(spec, cell, cache))

        else:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                futures = [executor.submit(run_cell, spec, cell, cache) for cell in pending]
                for future in as_completed(futures):
                    _completed(results, done, future.result())

    rows = [done[cell.cell_id] for cell in cells]
    results.rewrite(rows)
    return rows


def _completed(results, done, row):
    row = _parsed_row(dict((k, _csv_value(v)) for k, v in row.items()))
    results.add(row)
    done[row["cell_id"]] = row
    LOG.debug("%s: win_rate=%.4f%s", row["cell_id"], row["win_rate"], row["error"] and " (%s)" % row["error"] or "")


def sign_test(diffs):
    """
    >>> sign_test([1, 1, 1, 1, 1])
    0.0625
    >>> sign_test([0, 0])
    1.0

    Args:
        diffs (Iterable[float]): Paired differences, zeros are dropped

    Returns:
        (float): Two-sided exact binomial p-value of the signs being balanced
    """
    signs = [d > 0 for d in diffs if d != 0]
    n = len(signs)
    if n == 0:
        return 1.0

    k = min(sum(signs), n - sum(signs))
    return min(1.0, 2 * sum(math.comb(n, i) for i in range(k + 1)) / 2**n)


class SweepReport(runez.Slotted):
    """Per-group mean/std of a metric, plus paired comparisons"""

    __slots__ = ["metric", "grouping", "summary", "comparisons"]

    def __str__(self):
        table = PrettyTable(list(self.grouping) + ["n", "mean", "std", "errors"], border="github")
        for row in self.summary:
            table.add_row(*[row[k] for k in self.grouping], row["n"], "%.4f" % row["mean"], "%.4f" % row["std"], row["errors"])

        text = "%s per %s:\n%s" % (self.metric, ", ".join(self.grouping), table)
        if self.comparisons:
            table = PrettyTable(["a", "b", "pairs", "mean diff", "sign", "a wins", "p-value"], border="github")
            for c in self.comparisons:
                table.add_row(c["a"], c["b"], c["pairs"], "%+.4f" % c["mean_diff"], c["sign"], c["a_wins"], "%.4g" % c["p_value"])

            text += "\n\nPaired comparisons:\n%s" % table

        return text


def report(rows, grouping=("cell",), comparisons=None, metric="win_rate"):
    """
    Args:
        rows (list[dict]): Results rows, as returned by run_sweep()
        grouping (str | Sequence[str]): Row keys identifying a group (default: the cell name)
        comparisons (Sequence[tuple] | None): Pairs of group names to compare, paired by replicate
        metric (str): Metric to summarize

    Returns:
        (SweepReport): Mean and std (over replicates) per group, mean difference and sign test per comparison
    """
    if not rows:
        raise InvalidInput("no results to report on")

    grouping = runez.flattened([grouping], split=",")
    for key in grouping + [metric]:
        if key not in rows[0]:
            raise InvalidInput("unknown grouping key '%s', available: %s" % (key, ", ".join(rows[0])))

    groups = {}
    for row in rows:
        name = ",".join(str(row[k]) for k in grouping)
        groups.setdefault(name, []).append(row)

    summary = []
    for name, members in groups.items():
        values = [r[metric] for r in members if not r.get("error")]
        entry = dict((k, members[0][k]) for k in grouping)
        entry.update(
            group=name,
            n=len(values),
            mean=float(np.mean(values)) if values else float("nan"),
            std=float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
            errors=len(members) - len(values),
        )
        summary.append(entry)

    compared = []
    for a, b in comparisons or ():
        if a not in groups or b not in groups:
            raise InvalidInput("can't compare '%s' with '%s', known groups: %s" % (a, b, ", ".join(groups)))

        by_replicate = dict((r["replicate"], r[metric]) for r in groups[b] if not r.get("error"))
        diffs = [r[metric] - by_replicate[r["replicate"]] for r in groups[a] if not r.get("error") and r["replicate"] in by_replicate]
        mean_diff = float(np.mean(diffs)) if diffs else 0.0
        compared.append(
            dict(
                a=a,
                b=b,
                pairs=len(diffs),
                mean_diff=mean_diff,
                sign="+" if mean_diff > 0 else "-" if mean_diff < 0 else "0",
                a_wins=sum(d > 0 for d in diffs),
                p_value=sign_test(diffs),
            )
        )

    return SweepReport(metric=metric, grouping=grouping, summary=summary, comparisons=compared)


def load_results(path):
    """Rows of a 'results.csv' written by run_sweep()"""
    with io.open(path) as fh:
        return [_parsed_row(row) for row in csv.DictReader(fh)]


# Long enough for discrepancies to reach O(1), so that beta factors and filtering move away from plain DPO
PRESET_REGIME = dict(epochs=4, lr=0.05)
MIXED = dict(mixture_ratio=0.3, flip_prob=0.05)
PLAIN_DPO = dict(alpha=0.0, strategy="none")


def _method(label, **overrides):
    return dict(overrides, label=label)


def _preset_beta_by_gap():
    regimes = [_method("low_gap", mixture_ratio=0.0, flip_prob=0.0), _method("high_gap", mixture_ratio=0.9, flip_prob=0.05)]
    return dict(
        base=dict(PLAIN_DPO, mode="population", rho=1.0),
        axes=[["regime", regimes], ["beta0", [0.01, 0.05, 0.1, 0.5]]],
        comparisons=[
            ["regime=low_gap,beta0=0.05", "regime=low_gap,beta0=0.5"],
            ["regime=high_gap,beta0=0.5", "regime=high_gap,beta0=0.05"],
        ],
    )


def _preset_ablation():
    methods = [
        _method("dpo", **PLAIN_DPO),
        _method("dynamic_beta", strategy="none"),
        _method("filtering", alpha=0.0),
        _method("beta_dpo"),
    ]
    return dict(
        base=MIXED,
        axes=[["method", methods]],
        comparisons=[
            ["method=beta_dpo", "method=dpo"],
            ["method=beta_dpo", "method=dynamic_beta"],
            ["method=beta_dpo", "method=filtering"],
            ["method=dynamic_beta", "method=dpo"],
            ["method=filtering", "method=dpo"],
        ],
    )


def _preset_calibration():
    return dict(
        base=dict(flip_prob=0.05),
        axes=[["mixture_ratio", [0.1, 0.2, 0.3, 0.4]], ["mode", ["population", "instance", "batch"]]],
        comparisons=[
            ["mixture_ratio=0.4,mode=batch", "mixture_ratio=0.4,mode=population"],
            ["mixture_ratio=0.4,mode=population", "mixture_ratio=0.4,mode=instance"],
        ],
    )


def _preset_alpha():
    return dict(base=MIXED, axes=[["alpha", [round(0.2 * i, 1) for i in range(11)]]], comparisons=[["alpha=0.6", "alpha=0.0"]])


def _preset_rho():
    return dict(base=MIXED, axes=[["rho", [0.5, 0.6, 0.7, 0.8, 0.9, 1.0]]], comparisons=[["rho=0.8", "rho=1.0"]])


def _preset_fixed_m0():
    centers = [_method("moving_average")] + [_method("fixed_%s" % v, fixed_M0=float(v)) for v in (0, 1, 3)]
    comparisons = [["M0=moving_average", "M0=fixed_%s" % v] for v in (0, 1, 3)]
    return dict(base=MIXED, axes=[["M0", centers]], comparisons=comparisons)


def _preset_filters():
    strategies = ["gaussian", "head", "tail", "tail_head", "none"]
    return dict(base=MIXED, axes=[["strategy", strategies]], comparisons=[["strategy=gaussian", "strategy=%s" % s] for s in strategies[1:]])


def _preset_explicit():
    return dict(base=MIXED, axes=[["source", ["implicit", "oracle"]]], comparisons=[["source=oracle", "source=implicit"]])


PRESETS = dict(
    beta_by_gap=_preset_beta_by_gap,
    ablation=_preset_ablation,
    calibration=_preset_calibration,
    alpha=_preset_alpha,
    rho=_preset_rho,
    fixed_m0=_preset_fixed_m0,
    filters=_preset_filters,
    explicit=_preset_explicit,
)


def preset(name, outputs_dir, replicates=DEFAULT_REPLICATES, base=None):
    """
    Args:
        name (str): One of PRESETS
        outputs_dir (str | pathlib.Path): Where sweep outputs go
        replicates (int): Seeds per cell
        base (dict | None): Extra flat settings applied to the preset's base (handy to shrink runs)

    Returns:
        (SweepSpec): Ready to run sweep
    """
    func = PRESETS.get(name)
    if func is None:
        raise InvalidInput("unknown preset '%s', available: %s" % (name, ", ".join(PRESETS)))

    data = func()
    data["base"] = dict(PRESET_REGIME, **data["base"])
    data["base"].update(base or {})
    data["replicates"] = replicates
    return SweepSpec.from_dict(data, outputs_dir=outputs_dir)
