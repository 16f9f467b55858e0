import logging
import uuid
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field

import sentry_sdk

import trainer
from errors import ConfigError, TmrdError
from metrics import evaluate
from pseudo_labels import make_predictor
from results import AblationRecord

# Base detector families: the first two train the plain single-stage head
# (A1 without uncertainty, unlabeled box regression dropped; A2 with the
# uncertainty head), the last two the same with cascade regression.
FAMILIES = {
    "A1": {"cascade": False, "uncertainty": False},
    "A2": {"cascade": False, "uncertainty": True},
    "A3": {"cascade": True, "uncertainty": False},
    "A4": {"cascade": True, "uncertainty": True},
}
FAMILY_MODES = (("", "classical_ema"), ("1", "tmr"), ("2", "tmr_rd"))
SHORT_KEYS = {"mode": "train.mode", "cascade": "train.cascade_enabled", "uncertainty": "train.uncertainty_enabled"}


@dataclass(frozen=True)
class AblationRow:
    """One ablation configuration: mode, head switches and config overrides."""

    label: str
    mode: str
    cascade_enabled: bool
    uncertainty_enabled: bool
    overrides: tuple = field(default=())

    @property
    def baseline(self):
        """'A2' when the row trains the uncertainty head, else 'A1'."""
        return "A2" if self.uncertainty_enabled else "A1"

    def config(self, base=None):
        pairs = [
            ("train.mode", self.mode),
            ("train.cascade_enabled", str(self.cascade_enabled)),
            ("train.uncertainty_enabled", str(self.uncertainty_enabled)),
            ("loss.unsup_box_regression", str(self.uncertainty_enabled)),
        ]
        return trainer.parse_overrides(pairs + list(self.overrides), base)


def family_rows(family):
    switches = FAMILIES[family]
    return [
        AblationRow(family + suffix, mode, switches["cascade"], switches["uncertainty"])
        for suffix, mode in FAMILY_MODES
    ]


PRESETS = {
    "all": [row for family in ("A1", "A2", "A3", "A4") for row in family_rows(family)],
    "single_stage": family_rows("A1") + family_rows("A2"),
}


def _parse_bool(raw):
    lowered = raw.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(raw)


def parse_ablation_spec(text, base=None):
    """Parse an ablation spec.

    Each non-comment line is either ``preset <name>`` or
    ``<label> mode=<mode> cascade=<bool> uncertainty=<bool> [section.field=value ...]``.
    Labels must be unique and every row must give a valid TrainConfig.

    Returns:
        list: AblationRows in file order.

    Raises:
        ConfigError: Empty spec, duplicate labels or invalid rows, all at once.
    """
    rows, problems = [], []
    for number, line in enumerate(text.splitlines(), start=1):
        tokens = line.split("#", 1)[0].split()
        if not tokens:
            continue
        if tokens[0] == "preset":
            if len(tokens) != 2 or tokens[1] not in PRESETS:
                problems.append(f"line {number}: unknown preset {' '.join(tokens[1:])!r}")
            else:
                rows.extend(PRESETS[tokens[1]])
            continue
        label, values, overrides = tokens[0], {}, []
        for token in tokens[1:]:
            key, sep, raw = token.partition("=")
            if not sep:
                problems.append(f"line {number}: expected key=value, got {token!r}")
            elif key in SHORT_KEYS:
                values[key] = raw
            else:
                overrides.append((key, raw))
        try:
            rows.append(
                AblationRow(
                    label=label,
                    mode=values.get("mode", "tmr_rd"),
                    cascade_enabled=_parse_bool(values.get("cascade", "false")),
                    uncertainty_enabled=_parse_bool(values.get("uncertainty", "false")),
                    overrides=tuple(overrides),
                )
            )
        except ValueError as error:
            problems.append(f"line {number}: not a boolean: {error}")

    if not rows and not problems:
        problems.append("ablation spec lists no configurations")
    seen = set()
    for row in rows:
        if row.label in seen:
            problems.append(f"duplicate label {row.label}")
        seen.add(row.label)
        try:
            row.config(base)
        except ConfigError as error:
            problems.extend(f"{row.label}: {problem}" for problem in error.problems)
    if problems:
        raise ConfigError(problems)
    return rows


@dataclass
class MemberResult:
    label: str
    status: str
    sup_map: float = None
    ap50: float = None
    map: float = None
    error: str = None


def run_member(row, base_config, dataset):
    """Burn in, score the supervised-only model, then finish the run.

    Returns:
        MemberResult: OK with metrics, or FAILED with the error message.
    """
    config = row.config(base_config)
    logging.info(f"Ablation member {row.label} started ({row.mode}).")
    try:
        state, _ = trainer.run(
            config, dataset.labeled, dataset.unlabeled, dataset.test, stop_at=config.burn_in_iterations
        )
        supervised = evaluate(make_predictor(state.teacher, config.stages), dataset.test)
        state, _ = trainer.run(config, dataset.labeled, dataset.unlabeled, dataset.test, state=state)
        final = evaluate(make_predictor(state.teacher, config.stages), dataset.test)
    except (TmrdError, ValueError) as error:
        logging.error(f"Ablation member {row.label} failed: {error}")
        return MemberResult(row.label, "FAILED", error=str(error))
    logging.info(f"Ablation member {row.label} finished: AP50={final.ap50:.4f} mAP={final.map:.4f}.")
    return MemberResult(row.label, "OK", supervised.map, final.ap50, final.map)


def _record(batch, row, base_config, result):
    AblationRecord.create(
        batch=batch,
        label=row.label,
        mode=row.mode,
        cascade_enabled=row.cascade_enabled,
        uncertainty_enabled=row.uncertainty_enabled,
        status=result.status,
        sup_map=result.sup_map,
        ap50=result.ap50,
        map=result.map,
        error=result.error,
        config=trainer.config_to_text(row.config(base_config)),
    )


def run_ablation(rows, base_config, dataset, workers=1, batch=None):
    """Run every row (in parallel processes when workers > 1) and store the outcomes.

    Returns:
        tuple: (batch id, AblationRecords in spec order).
    """
    if not dataset.test:
        raise ValueError("ablation needs a labeled test split")
    batch = batch or uuid.uuid4().hex[:12]
    logging.info(f"Ablation batch {batch}: {len(rows)} members, {workers} worker(s).")
    if workers <= 1:
        for row in rows:
            _record(batch, row, base_config, run_member(row, base_config, dataset))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_member, row, base_config, dataset): row for row in rows}
            for future in as_completed(futures):
                row = futures[future]
                try:
                    result = future.result()
                except Exception as error:
                    sentry_sdk.capture_exception(error)
                    logging.error(f"Ablation member {row.label} crashed: {error}")
                    result = MemberResult(row.label, "FAILED", error=str(error))
                _record(batch, row, base_config, result)

    order = {row.label: index for index, row in enumerate(rows)}
    records = sorted(AblationRecord.get_by_batch(batch), key=lambda record: order[record.label])
    return batch, records
