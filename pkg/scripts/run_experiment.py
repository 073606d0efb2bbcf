"""Pretrain, adapt and analyse one study config end to end.

    python3 scripts/run_experiment.py scripts/configs/main_table.json
    python3 scripts/run_experiment.py scripts/configs/*.json --override pretrain.epochs=2

Checkpoints already present under ``<out_dir>/pretrain`` are reused.
"""

import argparse
import sys
from pathlib import Path

from fata import cli, config, experiment


def run(path: Path, overrides: list[str]) -> int:
    _, cfg = config.load(path, overrides)
    out = Path(cfg.out_dir)
    flags = ["--config", str(path)] + [a for o in overrides for a in ("--override", o)]
    missing = [s for s in cfg.seeds if not experiment.checkpoint_path(out, s).exists()]
    for seed in missing:
        code = cli.main(["pretrain", *flags, "--seed", str(seed)])
        if code:
            return code
    code = cli.main(["adapt", *flags])
    return code or cli.main(["analyze", *flags])


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("configs", nargs="+", type=Path)
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    for path in args.configs:
        print(f"== {path}", flush=True)
        code = run(path, args.override)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
