"""Merged accuracy tables, plot-data files and rendered figures.

Scans a results directory for attack-report and sweep CSVs, merges them
into one model x attack x epsilon table, emits per-attack plot-data files
(x = epsilon, one series per model) and renders the matching matplotlib
figures next to the delimited output.
"""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _read_comment_headers(lines):
    headers = {}
    for line in lines:
        if not line.startswith("#"):
            break
        text = line[1:].strip()
        if ":" in text:
            key, value = text.split(":", 1)
            headers[key.strip()] = value.strip()
    return headers


def read_attack_csv(path):
    """Aggregate row of one attack report, or None if not an attack CSV."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    headers = _read_comment_headers(lines)
    if "attack" not in headers:
        return None
    try:
        body = [l for l in lines if not l.startswith("#")]
        columns = body[0].split(",")
        aggregate = None
        for line in body[1:]:
            cells = line.split(",")
            if cells and cells[0] == "aggregate":
                aggregate = dict(zip(columns, cells))
        if aggregate is None:
            raise ValueError("no aggregate row")
        epsilon = headers.get("epsilon", "")
        return {
            "model": headers.get("model", "model"),
            "attack": headers["attack"],
            "epsilon": float(epsilon) if epsilon else None,
            "clean_accuracy": float(aggregate["clean_accuracy"]),
            "adversarial_accuracy": float(aggregate["adversarial_accuracy"]),
        }
    except (KeyError, IndexError, ValueError) as exc:
        raise OSError(f"corrupt attack CSV {os.fspath(path)!r}: {exc}") from exc


def read_sweep_csv(path):
    """Rows of one sweep CSV, or None if not a sweep CSV."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    headers = _read_comment_headers(lines)
    if "sweep" not in headers:
        return None
    try:
        body = [l for l in lines if not l.startswith("#")]
        columns = body[0].split(",")
        rows = []
        for line in body[1:]:
            cells = line.split(",")
            row = dict(zip(columns, cells))
            parsed = {"h": float(row["h"]), "clean_acc": float(row["clean_acc"]),
                      "converged": row["converged"] == "True", "adv": {}}
            for col in columns:
                if col.startswith("adv_acc@"):
                    parsed["adv"][float(col.split("@", 1)[1])] = float(row[col])
            rows.append(parsed)
        return rows
    except (KeyError, IndexError, ValueError) as exc:
        raise OSError(f"corrupt sweep CSV {os.fspath(path)!r}: {exc}") from exc


def collect_results(results_dir):
    results_dir = Path(results_dir)
    attack_rows = []
    sweep_tables = []
    for path in sorted(results_dir.glob("*.csv")):
        entry = read_attack_csv(path)
        if entry is not None:
            attack_rows.append(entry)
            continue
        sweep = read_sweep_csv(path)
        if sweep is not None:
            sweep_tables.append((path.stem, sweep))
    return attack_rows, sweep_tables


def _write_atomic(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_report(results_dir, out_dir) -> list[str]:
    """Merge results into report.csv, plot-data CSVs and PNG figures.

    Returns the list of written paths.  An empty results directory yields an
    empty (header-only) table.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    attack_rows, sweep_tables = collect_results(results_dir)
    written = []

    rows = sorted(
        attack_rows,
        key=lambda r: (r["attack"], r["model"], -1.0 if r["epsilon"] is None else r["epsilon"]),
    )
    lines = ["model,attack,epsilon,adversarial_accuracy"]
    for r in rows:
        eps = "" if r["epsilon"] is None else repr(r["epsilon"])
        lines.append(f"{r['model']},{r['attack']},{eps},{repr(r['adversarial_accuracy'])}")
    report_path = out_dir / "report.csv"
    _write_atomic(report_path, "\n".join(lines) + "\n")
    written.append(str(report_path))

    by_attack: dict[str, list] = {}
    for r in rows:
        if r["epsilon"] is not None:
            by_attack.setdefault(r["attack"], []).append(r)
    for attack, entries in sorted(by_attack.items()):
        models = sorted({e["model"] for e in entries})
        # epsilon = 0 rows come from the reports' clean accuracy
        series: dict[str, dict[float, float]] = {m: {} for m in models}
        for e in entries:
            series[e["model"]][e["epsilon"]] = e["adversarial_accuracy"]
            series[e["model"]].setdefault(0.0, e["clean_accuracy"])
        eps_values = sorted({eps for s in series.values() for eps in s})
        lines = ["epsilon," + ",".join(models)]
        for eps in eps_values:
            cells = [repr(eps)]
            for m in models:
                v = series[m].get(eps)
                cells.append("" if v is None else repr(v))
            lines.append(",".join(cells))
        plot_path = out_dir / f"plotdata_{attack}.csv"
        _write_atomic(plot_path, "\n".join(lines) + "\n")
        written.append(str(plot_path))

        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for m in models:
            pts = sorted(series[m].items())
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=m)
        ax.set_xlabel(r"perturbation size $\epsilon$")
        ax.set_ylabel("accuracy")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(f"accuracy under {attack}")
        ax.legend()
        fig.tight_layout()
        fig_path = out_dir / f"fig_{attack}.png"
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        written.append(str(fig_path))

    for stem, sweep in sweep_tables:
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        hs = [row["h"] for row in sweep]
        ax.plot(hs, [row["clean_acc"] for row in sweep], marker="o", label="clean")
        eps_values = sorted({e for row in sweep for e in row["adv"]})
        for eps in eps_values:
            ax.plot(
                hs,
                [row["adv"].get(eps) for row in sweep],
                marker="s",
                label=f"transfer FGSM eps={eps:g}",
            )
        ax.set_xscale("log")
        ax.set_xlabel("step size h")
        ax.set_ylabel("accuracy")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title("step-size sweep")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig_path = out_dir / f"fig_{stem}.png"
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        written.append(str(fig_path))

    return written
