"""Does adapted data train a better detector than raw augmented data?

Runs every arm for one seed (or several, given on the command line) and prints
the AP table with ratios to the detector trained on TARGET itself. Budget about
twenty minutes per seed on one core.
"""
import sys
from pathlib import Path

from attnsplit.config import Config
from attnsplit.pipeline import report_from_runs, run_pipeline

seeds = [int(s) for s in sys.argv[1:]] or [0]
runs = []
for seed in seeds:
    run = run_pipeline(Config(), seed, direct=True)
    print(f"seed {seed}: preservation {run.metrics['preservation']}")
    runs.append(run)

report = report_from_runs(runs)
print(report.table())
report.save(Path("demo_output") / "report")
