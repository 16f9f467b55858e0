import csv
import logging

from tabulate import tabulate

from metrics import IOU_GRID
from scenes import CLASS_NAMES

CHECK, CROSS = "✓", "×"
ABLATION_HEADERS = ["Abl.", "A1", "A2", "cEMA", "TMR", "RD", "c-regress.", "sup. mAP", "AP50", "mAP"]
ABLATION_CSV_COLUMNS = (
    "label",
    "mode",
    "cascade_enabled",
    "uncertainty_enabled",
    "status",
    "sup_map",
    "ap50",
    "map",
    "error",
)


def display_message(message):
    print(message)


def display_error(message):
    print(f"Error: {message}")


def _mark(flag):
    return CHECK if flag else CROSS


def _percent(value):
    return "" if value is None else f"{100.0 * value:.2f}"


def ablation_table_rows(records):
    """Checkmark-matrix rows for the ablation table.

    Args:
        records (list): AblationRecords in display order.

    Returns:
        list: One list of cells per record; failed members show FAILED in the metric cells.
    """
    table = []
    for record in records:
        row = [
            record.label,
            _mark(not record.uncertainty_enabled),
            _mark(record.uncertainty_enabled),
            _mark(record.mode == "classical_ema"),
            _mark(record.mode in ("tmr", "tmr_rd")),
            _mark(record.mode == "tmr_rd"),
            _mark(record.cascade_enabled),
        ]
        if record.failed:
            row.extend(["FAILED", "FAILED", "FAILED"])
        else:
            row.extend([_percent(record.sup_map), _percent(record.ap50), _percent(record.map)])
        table.append(row)
    return table


def display_ablation_table(records, title="Ablation"):
    if not records:
        print("No ablation results found.\n")
        return
    print(f"\n{title}:")
    print(tabulate(ablation_table_rows(records), headers=ABLATION_HEADERS, tablefmt="grid"))
    print("")


def write_ablation_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(ABLATION_CSV_COLUMNS)
        for record in records:
            writer.writerow(
                [
                    record.label,
                    record.mode,
                    "true" if record.cascade_enabled else "false",
                    "true" if record.uncertainty_enabled else "false",
                    record.status,
                    "" if record.sup_map is None else repr(float(record.sup_map)),
                    "" if record.ap50 is None else repr(float(record.ap50)),
                    "" if record.map is None else repr(float(record.map)),
                    record.error or "",
                ]
            )
    logging.info(f"Wrote ablation table with {len(records)} rows to {path}.")


def display_eval_report(result, title="Evaluation"):
    """Per-class AP at 0.50, 0.75 and averaged over the IoU grid, then the aggregates.

    Args:
        result (EvalResult): Output of metrics.evaluate.
        title (str): The title to display above the table.
    """
    column_75 = IOU_GRID.index(0.75)
    headers = ["Class", "GT present", "AP50", "AP75", "AP"]
    table = []
    for class_id, name in enumerate(CLASS_NAMES):
        ap = result.ap_per_class_per_iou[class_id]
        table.append(
            [
                name,
                "yes" if class_id in result.classes_present else "no",
                _percent(ap[0]),
                _percent(ap[column_75]),
                _percent(ap.mean()),
            ]
        )
    table.append(["all", "", _percent(result.ap50), "", _percent(result.map)])
    print(f"\n{title}:")
    print(tabulate(table, headers=headers, tablefmt="grid"))
    print("")


def display_gradcheck_report(checks, tolerance):
    """Print one row per gradient target.

    Args:
        checks (list): (target, parameter count, coordinates checked, max relative error) tuples.
        tolerance (float): PASS threshold.
    """
    headers = ["Target", "Parameters", "Checked", "Max rel. error", "Verdict"]
    table = [
        [target, size, checked, f"{error:.3e}", "PASS" if error <= tolerance else "FAIL"]
        for target, size, checked, error in checks
    ]
    print("\nGradient check:")
    print(tabulate(table, headers=headers, tablefmt="grid"))
    print(f"Tolerance: {tolerance:g}\n")


def display_training_summary(state, rows):
    """Stage blocks of the run plus the last evaluated metrics."""
    blocks = []
    for row in rows:
        if blocks and blocks[-1][0] == row.stage:
            blocks[-1][2] = row.iteration
        else:
            blocks.append([row.stage, row.iteration, row.iteration])
    print("\nTraining schedule:")
    print(tabulate(blocks, headers=["Stage", "From", "To"], tablefmt="grid"))

    evaluated = [row for row in rows if row.map is not None]
    refines = [event for event in state.events if event["event"] == "refine"]
    print(f"Iteration {state.iteration}, stage {state.stage}, {len(refines)} refine step(s).")
    if evaluated:
        last = evaluated[-1]
        print(f"Last evaluation at iteration {last.iteration}: AP50 {_percent(last.ap50)}, mAP {_percent(last.map)}")
    print("")
