"""Report rendering: the per-class AP table as aligned text, TSV, and JSON,
plus matplotlib figures (AP bars, training-loss curves) written to files."""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_METRICS = ("ap", "ap50", "ap25")


def _fmt(v):
    return "   n/a" if v is None else f"{v:6.4f}"


def render_table(report, class_names=None):
    """Aligned text table: one row per class plus the class-average row."""
    class_names = class_names or {}
    header = f"{'class':>8}  {'num_gt':>6}  {'AP':>6}  {'AP50':>6}  {'AP25':>6}"
    rows = [header, "-" * len(header)]
    for cls in sorted(report.per_class):
        r = report.per_class[cls]
        name = class_names.get(cls, str(cls))
        rows.append(
            f"{name:>8}  {r['num_gt']:>6d}  {_fmt(r['ap'])}  {_fmt(r['ap50'])}  {_fmt(r['ap25'])}"
        )
    avg = report.average
    rows.append(
        f"{'average':>8}  {'':>6}  {_fmt(avg['ap'])}  {_fmt(avg['ap50'])}  {_fmt(avg['ap25'])}"
    )
    rows.append(f"scenes: {report.scene_count}   note: {report.note}")
    return "\n".join(rows)


def report_to_dict(report):
    return {
        "per_class": {
            str(cls): dict(vals) for cls, vals in sorted(report.per_class.items())
        },
        "average": dict(report.average),
        "scene_count": report.scene_count,
        "note": report.note,
    }


def write_report(report, out_dir, prefix="report", class_names=None):
    """Write the evaluation report as JSON + TSV + text + an AP bar figure.
    Returns {kind: path}."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    paths["json"] = out / f"{prefix}.json"
    with open(paths["json"], "w") as f:
        json.dump(report_to_dict(report), f, indent=1, sort_keys=True)
        f.write("\n")

    paths["tsv"] = out / f"{prefix}.tsv"
    with open(paths["tsv"], "w", newline="") as f:
        writer = csv.writer(f, delimiter="\t")
        writer.writerow(["class", "num_gt"] + list(_METRICS))
        for cls in sorted(report.per_class):
            r = report.per_class[cls]
            writer.writerow([cls, r["num_gt"]] + [r[m] for m in _METRICS])
        writer.writerow(["average", ""] + [report.average[m] for m in _METRICS])

    paths["txt"] = out / f"{prefix}.txt"
    paths["txt"].write_text(render_table(report, class_names) + "\n")

    paths["png"] = out / f"{prefix}_ap.png"
    _ap_bar_figure(report, paths["png"], class_names)
    return {k: str(v) for k, v in paths.items()}


def _ap_bar_figure(report, path, class_names=None):
    class_names = class_names or {}
    classes = sorted(report.per_class)
    labels = [class_names.get(c, str(c)) for c in classes] + ["avg"]
    fig, ax = plt.subplots(figsize=(1.2 * len(labels) + 2, 4))
    x = range(len(labels))
    width = 0.27
    for mi, metric in enumerate(_METRICS):
        vals = [report.per_class[c][metric] or 0.0 for c in classes]
        vals.append(report.average[metric] or 0.0)
        ax.bar([xi + (mi - 1) * width for xi in x], vals, width, label=metric.upper())
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("average precision")
    ax.set_title("instance segmentation AP by class")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_loss_curves(log_csv_path, out_png):
    """Render the training-loss CSV (step, epoch, components) as curves."""
    steps = []
    series = {}
    with open(log_csv_path) as f:
        reader = csv.DictReader(f)
        for row in reader:
            steps.append(int(row["step"]))
            for key, val in row.items():
                if key in ("step", "epoch"):
                    continue
                series.setdefault(key, []).append(float(val))
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for key, vals in series.items():
        ax.plot(steps, vals, label=key, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss components")
    ax.legend(ncols=3, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    return str(out_png)
