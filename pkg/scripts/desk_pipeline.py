"""Desk-scale pipeline through the CLI: synth -> train-teacher -> distill -> evaluate.

    python3 scripts/desk_pipeline.py --work runs/desk
"""

import argparse
import json
import sys
from pathlib import Path

from crowdkd.cli import dispatch


def step(*argv):
    argv = [str(a) for a in argv]
    print("$ crowdkd", " ".join(argv), flush=True)
    code = dispatch(argv)
    if code:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/desk")
    ap.add_argument("--teacher-epochs", type=int, default=200)
    ap.add_argument("--distill-epochs", type=int, default=100)
    ap.add_argument("--rounds", type=int, default=2)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    work = Path(args.work)
    data = work / "data"
    if not (data / "manifest.json").exists():
        step("synth", "--n", 50, "--test-n", 20, "--seed", args.seed, "--out", data)
    step("train-teacher", "--data-root", data, "--out", work / "teacher", "--epochs", args.teacher_epochs)
    step("distill", "--data-root", data, "--out", work / "student",
         "--teacher-checkpoint", work / "teacher" / "teacher.pt",
         "--epochs", args.distill_epochs, "--rounds", args.rounds)
    for name, ckpt in (("teacher", work / "teacher" / "teacher.pt"), ("student", work / "student" / "student.pt")):
        step("evaluate", "--checkpoint", ckpt, "--data-root", data, "--out", work / f"eval_{name}",
             "--dump-maps", work / f"maps_{name}")
    results = {n: json.loads((work / f"eval_{n}" / "eval.json").read_text()) for n in ("teacher", "student")}
    print(json.dumps(results, indent=1))


if __name__ == "__main__":
    main()
