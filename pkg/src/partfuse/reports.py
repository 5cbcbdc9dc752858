"""Plain-text table views of protocol reports. JSON stays the canonical output."""

from .metrics import percent

YMU_COLUMNS = (("before_vs_before", "B vs. B"), ("after_vs_after", "A vs. A"),
               ("before_vs_after", "A vs. B"))


def _table(header, rows):
    cells = [header] + rows
    widths = [max(len(str(r[i])) for r in cells) for i in range(len(header))]

    def line(r):
        first = str(r[0]).ljust(widths[0])
        rest = [str(c).rjust(w) for c, w in zip(r[1:], widths[1:])]
        return " | ".join([first] + rest)

    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(r) for r in rows]) + "\n"


def eer_table(report):
    ds = report["result"]["dataset_id"]
    rows = [["Holistic", percent(report["result"]["holistic"]["eer"])],
            ["Fusion", percent(report["result"]["fused"]["eer"])]]
    return _table(["EER (%)", ds], rows)


def cross_table(report):
    res = report["result"]
    targets = res["targets"]
    header = ["HTER (%)"] + targets + ["Avg. ± S.D.", "Max."]
    rows = []
    for name in ("holistic", "fused"):
        rows.append([name.capitalize()] + [""] * (len(header) - 1))
        for src, row in res[name]["rows"].items():
            s = row["summary"]
            rows.append([f"  {src}"] + [percent(row["hter"][t]["hter"]) for t in targets]
                        + [f"{percent(s['mean'])} ± {percent(s['sd'])}", percent(s["max"])])
    return _table(header, rows)


def ymu_table(report):
    res = report["result"]
    rows = [[name.capitalize()] + [percent(res[name][mode]["eer"]) for mode, _ in YMU_COLUMNS]
            for name in ("holistic", "fused")]
    return _table(["EER (%)"] + [title for _, title in YMU_COLUMNS], rows)


def kfold_table(report):
    res = report["result"]
    rows = [[name.capitalize(), percent(res[name]["mean_accuracy"])]
            for name in ("holistic", "fused")]
    return _table(["Mean accuracy (%)", res["dataset_id"]], rows)


def render(report):
    kind = report["protocol"]
    if kind == "eer":
        return eer_table(report)
    if kind == "cross":
        return cross_table(report)
    if kind == "ymu-matrix":
        return ymu_table(report)
    if kind == "kfold":
        return kfold_table(report)
    raise ValueError(f"no table view for {kind!r}")
