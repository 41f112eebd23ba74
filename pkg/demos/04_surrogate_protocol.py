"""All six methods on the glucose-insulin surrogate plant.

Runs the small configs/smoke.toml protocol (4 operating points, short
records) end to end and prints the error table.  For the full 12-point
protocol use ``nlident run --config configs/desk.toml`` (about 16 min).
"""
import sys
import tempfile
from pathlib import Path

from nlident import harness as hz

config = Path(sys.argv[1] if len(sys.argv) > 1 else
              Path(__file__).resolve().parents[1] / "configs" / "smoke.toml")
cfg = hz.ExperimentConfig.load(config)
with tempfile.TemporaryDirectory() as out:
    report = hz.run_experiment(cfg, out)
    print(hz.table_markdown(report.table_rows()))
    print("\nper operating point:")
    for m in report.methods:
        print(f"{m.name:12s}" + " ".join(f"{e:7.2f}" for e in m.e_rel))
print(f"exit code {report.exit_code}")
