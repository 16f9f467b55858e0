"""Burn-in, cyclic SSL/TMR training and checkpoints.

Iterations are numbered from 1. The first ``burn_in_iterations`` train the
student on labeled data and end by copying it into the teacher. After that
the schedule repeats ``n`` SSL iterations followed by ``n_prime`` TMR
iterations (classical_ema runs SSL only and updates the teacher by EMA).
"""

import csv
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

import detector
import tensor as T
from codec import ByteReader, pack_floats, pack_text
from errors import ConfigError, DivergenceError, FormatError
from metrics import evaluate
from pseudo_labels import make_predictor, pseudo_label_batch
from rd_strategy import RepresentationDistribution, mean_representation_kl, student_step
from refinement import EmaConfig, ScalingSet, mixing_coefficients, refine_weights, tmr_optimize
from scenes import AugmentConfig, augment_pair, sample_batch, strong_augment

BURN_IN, SSL, TMR = "BURN_IN", "SSL", "TMR"
STAGE_CODES = {BURN_IN: 0, SSL: 1, TMR: 2}
MODES = ("classical_ema", "tmr", "tmr_rd")
SECTIONS = ("train", "tmr", "loss", "pseudo", "aug")
# older spellings still accepted by parse_overrides
KEY_ALIASES = {"train.literal_eq8": "train.gradient_ascent"}
CHECKPOINT_MAGIC = b"TMRC"
CHECKPOINT_VERSION = 1
METRICS_COLUMNS = (
    "iteration",
    "stage",
    "loss_sup",
    "loss_unsup",
    "loss_rd",
    "loss_tmr",
    "mean_repr_kl",
    "ap50",
    "map",
    "wall_seconds",
)


def option(default, section):
    return field(default=default, metadata={"section": section})


@dataclass(frozen=True)
class TrainConfig:
    """Every scalar of a training run, addressable as ``section.field``."""

    seed: int = option(0, "train")
    mode: str = option("tmr_rd", "train")
    burn_in_iterations: int = option(300, "train")
    total_iterations: int = option(600, "train")
    n: int = option(40, "train")
    n_prime: int = option(20, "train")
    labeled_batch: int = option(8, "train")
    unlabeled_batch: int = option(8, "train")
    burn_in_lr: float = option(0.05, "train")
    xi: float = option(0.02, "train")
    alpha: float = option(0.999, "train")
    lambda_u: float = option(4.0, "train")
    lambda_d: float = option(None, "train")
    eval_interval: int = option(20, "train")
    kl_sample_size: int = option(16, "train")
    ssl_supervised: bool = option(True, "train")
    cascade_enabled: bool = option(True, "train")
    uncertainty_enabled: bool = option(True, "train")
    gradient_ascent: bool = option(False, "train")
    gamma: float = option(0.01, "tmr")
    lambda_t: float = option(1.0, "tmr")
    lambda_s: float = option(4.0, "tmr")
    per_tensor_scaling: bool = option(False, "tmr")
    carry_scaling: bool = option(False, "tmr")
    tau: tuple = option((0.5, 0.6, 0.7), "loss")
    focal_alpha: float = option(0.25, "loss")
    focal_gamma: float = option(2.0, "loss")
    npll_rho: float = option(0.25, "loss")
    unsup_box_regression: bool = option(True, "loss")
    unsup_uncertainty: bool = option(True, "loss")
    conf_threshold: float = option(0.7, "pseudo")
    nms_iou: float = option(0.5, "pseudo")
    flip_probability: float = option(0.5, "aug")
    brightness: float = option(0.2, "aug")
    contrast: float = option(0.2, "aug")
    noise_std: float = option(0.05, "aug")
    cutout_probability: float = option(0.5, "aug")

    @property
    def stages(self):
        return detector.NUM_STAGES if self.cascade_enabled else 1

    @property
    def effective_lambda_d(self):
        if self.lambda_d is not None:
            return self.lambda_d
        return 1.0 if self.cascade_enabled else 0.5

    @property
    def cycle(self):
        return self.n + self.n_prime if self.mode != "classical_ema" else self.n

    def loss_config(self, unlabeled=False):
        return detector.LossConfig(
            tau=tuple(self.tau),
            cascade_enabled=self.cascade_enabled,
            uncertainty_enabled=self.uncertainty_enabled and (self.unsup_uncertainty or not unlabeled),
            box_regression=self.unsup_box_regression or not unlabeled,
            focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma,
            npll_rho=self.npll_rho,
        )

    def ema_config(self):
        return EmaConfig(self.alpha)

    def augment_config(self):
        return AugmentConfig(
            flip_probability=self.flip_probability,
            brightness=self.brightness,
            contrast=self.contrast,
            noise_std=self.noise_std,
            cutout_probability=self.cutout_probability,
        )

    def validate(self):
        """Return one message per violated constraint (empty when valid)."""
        problems = []
        if self.mode not in MODES:
            problems.append(f"train.mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        for name in ("n", "n_prime", "labeled_batch", "unlabeled_batch", "eval_interval"):
            if getattr(self, name) < 1:
                problems.append(f"{self.key(name)} must be at least 1")
        if self.burn_in_iterations < 0:
            problems.append("train.burn_in_iterations must not be negative")
        if self.total_iterations < self.burn_in_iterations:
            problems.append("train.total_iterations must be >= train.burn_in_iterations")
        try:
            self.ema_config()
        except ConfigError as error:
            problems.extend(f"train.{problem}" for problem in error.problems)
        for name in ("burn_in_lr", "xi"):
            if getattr(self, name) <= 0.0:
                problems.append(f"{self.key(name)} must be positive")
        for name in ("gamma", "lambda_t", "lambda_s", "lambda_u", "focal_gamma", "brightness",
                     "contrast", "noise_std", "kl_sample_size"):
            if getattr(self, name) < 0:
                problems.append(f"{self.key(name)} must not be negative")
        if self.lambda_d is not None and self.lambda_d < 0.0:
            problems.append("train.lambda_d must not be negative")
        if len(self.tau) != detector.NUM_STAGES:
            problems.append(f"loss.tau needs {detector.NUM_STAGES} thresholds")
        elif any(b <= a for a, b in zip(self.tau, self.tau[1:])) or not 0.0 < self.tau[0] <= self.tau[-1] < 1.0:
            problems.append("loss.tau must be strictly increasing inside (0, 1)")
        for name in ("conf_threshold", "nms_iou", "focal_alpha", "flip_probability", "cutout_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{self.key(name)} must lie in [0, 1]")
        if not 0.0 < self.npll_rho <= 1.0:
            problems.append("loss.npll_rho must lie in (0, 1]")
        return problems

    def check(self):
        problems = self.validate()
        if problems:
            raise ConfigError(problems)
        return self

    @staticmethod
    def key(name):
        return f"{CONFIG_FIELDS[name].metadata['section']}.{name}"


CONFIG_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _format_value(value):
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(spec, raw):
    if spec.name == "tau":
        return tuple(float(part) for part in raw.split(","))
    if spec.type is bool:
        lowered = raw.lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if spec.type is int:
        return int(raw)
    if spec.type is float:
        if spec.name == "lambda_d" and raw.lower() == "auto":
            return None
        value = float(raw)
        if not np.isfinite(value):
            raise ValueError(f"not a finite number: {raw!r}")
        return value
    return raw


def config_to_text(config):
    """Canonical ``section.field=value`` rendering, re-readable by parse_config_text."""
    lines = []
    for spec in fields(config):
        lines.append(f"{spec.metadata['section']}.{spec.name}={_format_value(getattr(config, spec.name))}")
    return "\n".join(lines) + "\n"


def parse_overrides(pairs, base=None):
    """Apply (key, raw value) pairs to ``base``; every problem is reported at once.

    Raises:
        ConfigError: Unknown keys, unparsable values or failed constraints.
    """
    base = base or TrainConfig()
    problems = []
    changes = {}
    for key, raw in pairs:
        key = KEY_ALIASES.get(key, key)
        section, _, name = key.partition(".")
        spec = CONFIG_FIELDS.get(name)
        if section not in SECTIONS or spec is None or spec.metadata["section"] != section:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            changes[name] = _parse_value(spec, raw)
        except ValueError as error:
            problems.append(f"bad value for {key}: {error}")
    config = base
    if changes:
        try:
            config = replace(base, **changes)
        except TypeError as error:
            problems.append(str(error))
    if not problems:
        problems.extend(config.validate())
    if problems:
        raise ConfigError(problems)
    return config


def parse_config_text(text, base=None):
    """Read flat ``section.field=value`` lines; blank lines and ``#`` comments are skipped."""
    pairs = []
    problems = []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {number}: expected key=value, got {line!r}")
            continue
        key, raw = (part.strip() for part in line.split("=", 1))
        pairs.append((key, raw))
    try:
        config = parse_overrides(pairs, base)
    except ConfigError as error:
        problems.extend(error.problems)
    if problems:
        raise ConfigError(problems)
    return config


@dataclass
class MetricsRow:
    iteration: int
    stage: str
    loss_sup: float = None
    loss_unsup: float = None
    loss_rd: float = None
    loss_tmr: float = None
    mean_repr_kl: float = None
    ap50: float = None
    map: float = None
    wall_seconds: float = None

    def csv_values(self):
        values = []
        for name in METRICS_COLUMNS:
            value = getattr(self, name)
            values.append("" if value is None else (repr(float(value)) if isinstance(value, float) else str(value)))
        return values


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_values())
    logging.info("Wrote %d metrics rows to %s.", len(rows), path)


@dataclass
class TrainState:
    teacher: detector.ParameterSet
    student: detector.ParameterSet
    omega_t: ScalingSet
    omega_s: ScalingSet
    rng: np.random.Generator
    iteration: int = 0
    stage: str = BURN_IN
    history: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def equals(self, other):
        return (
            self.teacher.equals(other.teacher)
            and self.student.equals(other.student)
            and self.omega_t.equals(other.omega_t)
            and self.omega_s.equals(other.omega_s)
            and self.iteration == other.iteration
            and self.stage == other.stage
            and self.history == other.history
            and self.events == other.events
            and self.rng.bit_generator.state == other.rng.bit_generator.state
        )


def stage_of(iteration, config):
    """Stage of a 1-based iteration."""
    if iteration <= config.burn_in_iterations:
        return BURN_IN
    position = (iteration - config.burn_in_iterations - 1) % config.cycle
    return SSL if position < config.n else TMR


def stage_blocks(config):
    """Run-length encoded schedule after burn-in, e.g. [("SSL", 40), ("TMR", 20)]."""
    blocks = []
    for iteration in range(config.burn_in_iterations + 1, config.total_iterations + 1):
        stage = stage_of(iteration, config)
        if blocks and blocks[-1][0] == stage:
            blocks[-1] = (stage, blocks[-1][1] + 1)
        else:
            blocks.append((stage, 1))
    return blocks


def new_state(config):
    init_seed, train_seed = np.random.SeedSequence(config.seed).spawn(2)
    params = detector.init_params(np.random.default_rng(init_seed))
    return TrainState(
        teacher=params.copy(),
        student=params.copy(),
        omega_t=ScalingSet.ones_like(params, config.per_tensor_scaling),
        omega_s=ScalingSet.ones_like(params, config.per_tensor_scaling),
        rng=np.random.default_rng(train_seed),
    )


def sgd_step(params, loss_fn, lr):
    """One plain SGD step on ``loss_fn(leaves)``; returns (new params, loss value)."""
    leaves = params.as_leaves()
    with T.GradTape() as tape:
        loss = loss_fn(leaves)
        tape.backward(loss)
    grads = leaves.gradients()
    return detector.ParameterSet({name: t.data - lr * grads[name] for name, t in leaves.items()}), loss.item()


class Trainer:
    """Drives one TrainState through the schedule, one iteration per ``step``."""

    def __init__(self, config, labeled, unlabeled=(), test=(), state=None, record_wall_time=False):
        self.config = config.check()
        if not labeled:
            raise ValueError("training needs labeled scenes")
        if config.total_iterations > config.burn_in_iterations and not unlabeled:
            raise ValueError("semi-supervised stages need unlabeled scenes")
        self.labeled = list(labeled)
        self.unlabeled = list(unlabeled)
        self.test = list(test)
        self.state = state if state is not None else new_state(config)
        self.record_wall_time = record_wall_time
        self.loss_config = config.loss_config()
        self.unsup_config = config.loss_config(unlabeled=True)
        self.augment = config.augment_config()
        self.ema = config.ema_config()
        self.kl_sample = (self.test or self.unlabeled)[: config.kl_sample_size]
        self.started = time.perf_counter()

    def run(self, stop_at=None):
        end = self.config.total_iterations if stop_at is None else min(stop_at, self.config.total_iterations)
        while self.state.iteration < end:
            self.step()
        return self.state

    def step(self):
        state, config = self.state, self.config
        iteration = state.iteration + 1
        stage = stage_of(iteration, config)
        if stage != state.stage or iteration == 1:
            logging.info("Entering %s at iteration %d.", stage, iteration)
            state.events.append({"iteration": iteration, "event": "enter", "stage": stage})
        try:
            if stage == BURN_IN:
                row = self._burn_in(iteration)
            elif stage == SSL:
                row = self._ssl(iteration)
            else:
                row = self._tmr(iteration)
        except DivergenceError as error:
            logging.error("Training diverged in %s at iteration %d: %s", stage, iteration, error)
            raise DivergenceError(str(error), stage, iteration) from error

        state.iteration = iteration
        state.stage = stage
        if iteration % config.eval_interval == 0 or iteration == config.total_iterations:
            self._evaluate(row)
        if self.record_wall_time:
            row.wall_seconds = time.perf_counter() - self.started
        state.history.append(row)
        return row

    def _burn_in(self, iteration):
        state = self.state
        views = [strong_augment(s, state.rng, self.augment) for s in self._labeled_batch()]
        state.student, loss = sgd_step(
            state.student,
            lambda leaves: detector.supervised_loss(leaves, None, views, self.loss_config),
            self.config.burn_in_lr,
        )
        if iteration == self.config.burn_in_iterations:
            state.teacher = state.student.copy()
            logging.info("Burn-in finished; teacher and student duplicated.")
        return MetricsRow(iteration, BURN_IN, loss_sup=loss)

    def _ssl(self, iteration):
        state, config = self.state, self.config
        labeled_views = None
        if config.ssl_supervised:
            labeled_views = [strong_augment(s, state.rng, self.augment) for s in self._labeled_batch()]
        pairs = [
            augment_pair(s, state.rng, self.augment)
            for s in sample_batch(self.unlabeled, config.unlabeled_batch, state.rng)
        ]
        flips = [p.flip_applied for p in pairs]
        teacher_out = detector.forward(state.teacher.detached(), [p.weak.image for p in pairs])
        labels = pseudo_label_batch(
            state.teacher, pairs, config.conf_threshold, config.nms_iou, config.stages, outputs=teacher_out
        )
        p_teacher = RepresentationDistribution.from_features(teacher_out.features, flips)
        lambda_d = config.effective_lambda_d if config.mode == "tmr_rd" else 0.0
        state.student, stats = student_step(
            state.student,
            pairs,
            labels,
            p_teacher,
            config.xi,
            config.lambda_u,
            lambda_d,
            gradient_ascent=config.gradient_ascent,
            labeled_batch=labeled_views,
            config=self.unsup_config,
            labeled_config=self.loss_config,
        )
        if config.mode == "classical_ema":
            state.teacher = self.ema.step(state.teacher, state.student)
        return MetricsRow(
            iteration,
            SSL,
            loss_sup=stats["loss_sup"] if labeled_views else None,
            loss_unsup=stats["loss_unsup"],
            loss_rd=stats["loss_rd"],
        )

    def _tmr(self, iteration):
        state, config = self.state, self.config
        position = (iteration - config.burn_in_iterations - 1) % config.cycle
        if position == config.n and not config.carry_scaling:
            state.omega_t = ScalingSet.ones_like(state.teacher, config.per_tensor_scaling)
            state.omega_s = ScalingSet.ones_like(state.student, config.per_tensor_scaling)
        views = [strong_augment(s, state.rng, self.augment) for s in self._labeled_batch()]
        state.omega_t, state.omega_s, trace = tmr_optimize(
            state.teacher,
            state.student,
            state.omega_t,
            state.omega_s,
            views,
            config.gamma,
            1,
            config.lambda_t,
            config.lambda_s,
            self.loss_config,
        )
        if position == config.cycle - 1 or iteration == config.total_iterations:
            self._refine(iteration)
        return MetricsRow(iteration, TMR, loss_tmr=trace[0])

    def _refine(self, iteration):
        state = self.state
        mixing = mixing_coefficients(state.omega_t, state.omega_s)
        mean_m = float(np.mean(np.concatenate([m.ravel() for m in mixing.values()])))
        state.teacher, state.student = refine_weights(state.teacher, state.student, state.omega_t, state.omega_s)
        state.events.append({"iteration": iteration, "event": "refine", "mean_mixing": mean_m})

    def _labeled_batch(self):
        return sample_batch(self.labeled, self.config.labeled_batch, self.state.rng)

    def _evaluate(self, row):
        state = self.state
        model = state.student if row.stage == BURN_IN else state.teacher
        if self.test:
            result = evaluate(make_predictor(model, self.config.stages), self.test)
            row.ap50, row.map = result.ap50, result.map
        if self.kl_sample:
            row.mean_repr_kl = mean_representation_kl(state.teacher, state.student, self.kl_sample)


def burn_in(config, labeled_data):
    """Supervised training of a fresh detector, duplicated into teacher and student.

    Returns:
        ParameterSet: The burned-in weights.
    """
    if not labeled_data:
        raise ValueError("burn-in needs labeled scenes")
    trainer = Trainer(replace(config, total_iterations=config.burn_in_iterations), labeled_data)
    trainer.run()
    return trainer.state.teacher


def run(config, labeled, unlabeled, test=(), state=None, stop_at=None, record_wall_time=False):
    """Train to ``config.total_iterations`` (or pause at ``stop_at``).

    Returns:
        tuple: (TrainState, list of MetricsRow).
    """
    trainer = Trainer(config, labeled, unlabeled, test, state, record_wall_time)
    logging.info("Training mode=%s seed=%d from iteration %d.", config.mode, config.seed, trainer.state.iteration)
    trainer.run(stop_at)
    return trainer.state, trainer.state.history


# TMRC checkpoints


def save_checkpoint(state, config, path):
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        pack_text(config_to_text(config)),
        struct.pack("<QB", state.iteration, STAGE_CODES[state.stage]),
    ]
    tensors = []
    for prefix, named in (
        ("teacher", state.teacher),
        ("student", state.student),
        ("omega_t", state.omega_t),
        ("omega_s", state.omega_s),
    ):
        tensors.extend((f"{prefix}/{name}", t.data) for name, t in named.items())
    chunks.append(struct.pack("<I", len(tensors)))
    for name, data in tensors:
        chunks.append(pack_text(name))
        chunks.append(struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape))
        chunks.append(pack_floats(data))
    chunks.append(pack_text(json.dumps(state.rng.bit_generator.state, sort_keys=True)))
    journal = {"history": [asdict(row) for row in state.history], "events": state.events}
    chunks.append(pack_text(json.dumps(journal, sort_keys=True)))
    with open(path, "wb") as handle:
        handle.write(b"".join(chunks))
    logging.info("Saved checkpoint at iteration %d to %s.", state.iteration, path)


def load_checkpoint(path):
    """Read a TMRC file.

    Returns:
        tuple: (TrainConfig, TrainState).

    Raises:
        FormatError: Bad magic, unsupported version or truncation.
    """
    with open(path, "rb") as handle:
        reader = ByteReader(handle.read(), "checkpoint")
    reader.expect_magic(CHECKPOINT_MAGIC)
    version = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}")
    try:
        config = parse_config_text(reader.text())
    except ConfigError as error:
        raise FormatError(f"checkpoint config echo is invalid: {error}") from error
    iteration, stage_code = reader.unpack("<QB")
    stages = {code: name for name, code in STAGE_CODES.items()}
    if stage_code not in stages:
        raise FormatError(f"unknown stage code {stage_code}")

    groups = {"teacher": {}, "student": {}, "omega_t": {}, "omega_s": {}}
    for _ in range(reader.unpack("<I")):
        name = reader.text()
        ndim = reader.unpack("<I")
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        prefix, _, layer = name.partition("/")
        if prefix not in groups:
            raise FormatError(f"unexpected tensor {name!r}")
        groups[prefix][layer] = reader.floats(int(np.prod(shape))).reshape(shape)

    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(reader.text())
    journal = json.loads(reader.text())
    reader.expect_end()
    state = TrainState(
        teacher=detector.ParameterSet(groups["teacher"]),
        student=detector.ParameterSet(groups["student"]),
        omega_t=ScalingSet(groups["omega_t"]),
        omega_s=ScalingSet(groups["omega_s"]),
        rng=rng,
        iteration=iteration,
        stage=stages[stage_code],
        history=[MetricsRow(**row) for row in journal["history"]],
        events=journal["events"],
    )
    state.teacher.check_aligned(state.student)
    logging.info("Loaded checkpoint %s at iteration %d.", path, iteration)
    return config, state
