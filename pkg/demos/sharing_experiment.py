"""Train FV once, then VS on the frozen late-split decoder and end to end; compare SS.

    python demos/sharing_experiment.py            # 200 scenes, about 20 min on one core
    python demos/sharing_experiment.py --quick    # 40 scenes, 3 epochs, a couple of minutes
"""
import argparse

from scanshare.experiment import ExperimentConfig, run_sharing_experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--quick", action="store_true")
    args = parser.parse_args()
    cfg = ExperimentConfig(scenes=40, fv_epochs=3, vs_epochs=3) if args.quick else ExperimentConfig()

    result = run_sharing_experiment(cfg, progress=print)
    print()
    print(result.summary())
    print()
    print("measured sharing per split")
    print(result.sharing.to_text(), end="")
    ls, uniform = result.reports["LS"].ss, result.reports["uniform"].ss
    print(f"\nLS beats uniform: {ls > uniform}; LS within 15% of end-to-end: {abs(result.relative_gap()) <= 0.15}")


if __name__ == "__main__":
    main()
