"""Trains a smoke run through the CLI and validates its report against the shipped schema."""
import csv
import json
import subprocess
import sys
import tempfile
from pathlib import Path

import jsonschema


def main() -> int:
    cli, source_dir = sys.argv[1], Path(sys.argv[2])
    schema = json.loads((source_dir / "schemas" / "report.schema.json").read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    validator = jsonschema.Draft202012Validator(schema)

    with tempfile.TemporaryDirectory() as tmp:
        runs = {
            "classification": [],
            "regression": ["--ablate", "no_style,no_adversarial"],
        }
        for name, extra in runs.items():
            out = Path(tmp) / name
            cfg = source_dir / "configs" / "smoke.toml"
            if name == "regression":
                cfg = Path(tmp) / "reg.toml"
                cfg.write_text((source_dir / "configs" / "smoke.toml").read_text().replace(
                    "seed = 1\n", 'seed = 1\ntask = "regression"\n', 1))
            subprocess.run([cli, "train", "--config", str(cfg), "--out", str(out), *extra], check=True,
                           stdout=subprocess.DEVNULL)
            report = json.loads((out / "report.json").read_text())
            errors = sorted(validator.iter_errors(report), key=str)
            for e in errors:
                print(f"{name}: {e.message} at {list(e.absolute_path)}")
            if errors:
                return 1
            with open(out / "train_log.csv", newline="") as f:
                header = next(csv.reader(f))
            if header != ["iter", "stage", "task", "align_l2", "align_percpt", "sem", "total"]:
                print(f"{name}: unexpected log header {header}")
                return 1
            print(f"{name}: report valid ({report['metric']}, {len(report['per_domain'])} domains)")

        bad = dict(report, average="high")
        if validator.is_valid(bad):
            print("schema accepted a malformed report")
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
