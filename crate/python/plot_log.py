"""Plot the loss curve from one or more frametrans training logs.

Usage: python plot_log.py run/train.log [other/train.log ...] [-o loss.png]
"""

import argparse


def parse_log(path):
    """Return (steps, losses) from `step=N loss=X ...` lines."""
    steps, losses = [], []
    with open(path) as f:
        for line in f:
            fields = dict(kv.split("=", 1) for kv in line.split() if "=" in kv)
            if "step" in fields and "loss" in fields:
                steps.append(int(fields["step"]))
                losses.append(float(fields["loss"]))
    return steps, losses


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("logs", nargs="+")
    parser.add_argument("-o", "--out", default="loss.png")
    args = parser.parse_args()

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for path in args.logs:
        steps, losses = parse_log(path)
        ax.plot(steps, losses, label=path)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
