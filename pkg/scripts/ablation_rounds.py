"""Review-round ablation: distil one student per p and report test metrics.

Trains (or loads) a toy teacher once, then distils a 1/4 student for each
number of review rounds and prints MAE, MSE and the boosting ratio
(teacher MAE+MSE over student MAE+MSE).

    python3 scripts/ablation_rounds.py --rounds 0 1 2 3 --epochs 100
"""

import argparse
import json

import torch

from crowdkd.arch import build_teacher
from crowdkd.data import synth_scenes
from crowdkd.metrics import boosting_ratio
from crowdkd.train import DistillPlan, evaluate, train_distill, train_teacher


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rounds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--teacher-epochs", type=int, default=200)
    ap.add_argument("--teacher-state", help="load a toy teacher state_dict instead of training")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    train = synth_scenes(50, (64, 64), (5, 30), seed=1)
    test = synth_scenes(20, (64, 64), (5, 30), seed=2, split="test", prefix="test")
    if args.teacher_state:
        teacher = build_teacher("toy")
        teacher.load_state_dict(torch.load(args.teacher_state))
    else:
        teacher, _ = train_teacher("toy", train, epochs=args.teacher_epochs, seed=args.seed)
    t_res, _ = evaluate(teacher, test)
    t_perf = t_res.mae + t_res.mse
    print(json.dumps({"teacher": t_res.to_dict()}))

    for p in args.rounds:
        plan = DistillPlan(epochs=args.epochs, rounds=p, seed=args.seed)
        student, report = train_distill(plan, train, teacher=teacher)
        res, _ = evaluate(student, test, rounds=p)
        print(json.dumps({"rounds": p, "final_loss": report.epochs[-1]["total"], **res.to_dict(),
                          "boosting_ratio": boosting_ratio(t_perf, res.mae + res.mse)}), flush=True)


if __name__ == "__main__":
    main()
