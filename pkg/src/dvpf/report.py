"""CSV artifacts, aligned-text tables and static SVG plots."""

import csv
import json
import math
import os

CURVE_COLUMNS = ("budget_bits", "utility_bits", "alpha")
TRADEOFF_COLUMNS = ("alpha", "utility_bits", "leakage_bits", "attack_acc", "tmr_at_fmr", "recon_nll", "status")


def _cell(v):
    if isinstance(v, str):
        return v
    if v is None:
        return ""
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def _num(text):
    return float("nan") if text == "" else float(text)


def write_curve_csv(curve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for p in curve.points:
            w.writerow([_cell(p.leakage_budget), _cell(p.utility), _cell(p.alpha)])


def read_curve_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: _num(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_tradeoff_csv(points, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRADEOFF_COLUMNS)
        for p in points:
            w.writerow([_cell(getattr(p, c)) for c in TRADEOFF_COLUMNS])


def read_tradeoff_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (v if k == "status" else _num(v)) for k, v in row.items()})
    return rows


# ------------------------------------------------------------------ tables


def _fmt(v, digits=4):
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{v:.{digits}f}"


def format_table(headers, rows, title=None):
    """Right-aligned numeric columns, left-aligned first column."""
    cells = [list(headers)] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]

    def line(r):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))

    out = []
    if title:
        out.append(title)
    out.append(line(cells[0]))
    out.append("  ".join("-" * w for w in widths))
    out.extend(line(r) for r in cells[1:])
    return "\n".join(out) + "\n"


def tradeoff_table(rows, fmr_target=0.1):
    headers = ["alpha", f"TMR@FMR={fmr_target:g}", "I(Z;S) [bits]", "Acc on S", "utility [bits]",
               "recon_nll [nats]", "status"]
    body = [[r["alpha"], r["tmr_at_fmr"], r["leakage_bits"], r["attack_acc"], r["utility_bits"],
             r["recon_nll"], r.get("status", "ok")] for r in rows]
    return format_table(headers, body, title="Obfuscation-utility trade-off")


def curve_table(rows):
    body = [[r["budget_bits"], r["utility_bits"], r["alpha"]] for r in rows]
    return format_table(["budget [bits]", "utility [bits]", "alpha"], body, title="Privacy funnel curve")


def attack_table(rep):
    body = [[rep["attacker"], rep["accuracy"], rep["leakage_bits"], str(rep["n_train"]), str(rep["n_test"])]]
    return format_table(["attacker", "Acc on S", "I(Z;S) [bits]", "n_train", "n_test"], body,
                        title="Attack audit")


def history_table(records):
    last = records[-1]
    keys = ["recon_nll", "marginal_kl_x", "leakage_pred_fidelity", "leakage_dist_discrepancy",
            "complexity", "uncertainty", "total"]
    body = [[k, records[0][k], last[k]] for k in keys]
    return format_table(["term", "first", "last"], body,
                        title=f"Training history ({last['variant']}, alpha={last['alpha']:g}, {len(records)} rounds)")


def render_run(run_dir):
    """All tables for the artifacts found in ``run_dir``, in a fixed order."""
    parts = []
    p = os.path.join(run_dir, "curve.csv")
    if os.path.exists(p):
        parts.append(curve_table(read_curve_csv(p)))
    p = os.path.join(run_dir, "tradeoff.csv")
    if os.path.exists(p):
        parts.append(tradeoff_table(read_tradeoff_csv(p)))
    p = os.path.join(run_dir, "history.ndjson")
    if os.path.exists(p):
        with open(p, encoding="utf-8") as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        if recs:
            parts.append(history_table(recs))
    p = os.path.join(run_dir, "attack.json")
    if os.path.exists(p):
        with open(p, encoding="utf-8") as fh:
            parts.append(attack_table(json.load(fh)))
    return "\n".join(parts)


# ------------------------------------------------------------------- plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "dvpf"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_curve(rows, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.step([r["budget_bits"] for r in rows], [r["utility_bits"] for r in rows], where="post", marker="o")
    ax.set_xlabel("leakage budget I(S;Z) [bits]")
    ax.set_ylabel("utility I(X;Z) [bits]")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_tradeoff(rows, path):
    plt = _pyplot()
    ok = [r for r in rows if r.get("status", "ok") == "ok"]
    fig, ax = plt.subplots(1, 2, figsize=(8, 3.5))
    a = [r["alpha"] for r in ok]
    ax[0].plot(a, [r["leakage_bits"] for r in ok], marker="o", label="I(Z;S)")
    ax[0].plot(a, [r["attack_acc"] for r in ok], marker="s", label="Acc on S")
    ax[0].set_xlabel("alpha")
    ax[0].legend()
    ax[1].plot(a, [r["recon_nll"] for r in ok], marker="o")
    ax[1].set_xlabel("alpha")
    ax[1].set_ylabel("recon_nll [nats]")
    if ok and min(a) > 0:
        ax[0].set_xscale("log")
        ax[1].set_xscale("log")
    for x in ax:
        x.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
