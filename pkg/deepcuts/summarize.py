#!/usr/bin/env python3

import os
import os.path
from glob import glob

import pandas as pd
import toml
from tqdm import tqdm

from .common import DataError, natural_keys
from .lth import RUNS_COLUMNS, RunReport

METRICS = ["pre_metric", "post_metric", "final_metric"]


def get_report_fnames(config):
    pattern = os.path.join(config["path"], config["pipeline"]["reports"], "seed-*", "*.toml")
    return sorted(glob(pattern), key=natural_keys)


def load_runs(config):
    """runs.csv if present, otherwise rebuilt from the per-run report files."""
    runs_fname = os.path.join(config["path"], "runs.csv")
    if os.path.exists(runs_fname):
        runs = pd.read_csv(runs_fname, float_precision="round_trip")
        missing = set(RUNS_COLUMNS) - set(runs.columns)
        if missing:
            raise DataError("{} is missing columns {}".format(runs_fname, sorted(missing)))
        return runs

    rows = []
    for fname in tqdm(get_report_fnames(config), ncols=70, desc="reports"):
        with open(fname) as f:
            rows.append(RunReport(**toml.load(f)).row())
    if not rows:
        raise DataError("no runs.csv or run reports under {}".format(config["path"]))
    return pd.DataFrame(rows, columns=RUNS_COLUMNS)


def summarize_runs(runs):
    # repeated cells from appended re-runs count once
    runs = runs.drop_duplicates(subset=["task", "strategy", "ratio", "seed"], keep="last")
    stats = runs.groupby(["task", "strategy", "ratio"])[METRICS + ["kept_fraction"]]
    table = stats.agg(["mean", "std", "count"])
    table.columns = ["_".join(c) for c in table.columns]
    table = table.reset_index()

    pivot = runs.pivot_table(
        index=["task", "strategy"], columns="ratio", values="final_metric", aggfunc="mean"
    )
    pivot.columns = ["r{:g}".format(c) for c in pivot.columns]
    return table, pivot.reset_index()


def summarize_all(config):
    runs = load_runs(config)
    table, pivot = summarize_runs(runs)

    outdir = os.path.join(config["path"], config["pipeline"]["summaries"])
    os.makedirs(outdir, exist_ok=True)

    table.to_csv(os.path.join(outdir, "metrics.csv"), index=False)
    pivot.to_csv(os.path.join(outdir, "final_by_ratio.csv"), index=False)
    return table, pivot
