"""Runtime settings for the TMR-RD lab.

Environment variables are read through python-dotenv, so a ``.env`` file
in the working directory works as well as the shell environment. Training
configurations are flat ``section.field=value`` text files.
"""

import os

from dotenv import load_dotenv

from errors import ConfigError
from trainer import TrainConfig, parse_config_text

load_dotenv()

DEBUG = os.getenv("DEBUG", "False") == "True"
DEFAULT_LOG_FILE = "tmrd.log"
DEFAULT_RESULTS_DB = os.path.join("runs", "ablation.db")


def log_file():
    return os.getenv("TMRD_LOG_FILE", DEFAULT_LOG_FILE)


def results_db():
    return os.getenv("TMRD_RESULTS_DB", DEFAULT_RESULTS_DB)


def slow_tests_enabled():
    return os.getenv("TMRD_SLOW_TESTS", "0") == "1"


def max_workers():
    """Ablation parallelism cap from TMRD_THREADS (default 1).

    Raises:
        ConfigError: The variable is set but is not a positive integer.
    """
    raw = os.getenv("TMRD_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError([f"TMRD_THREADS must be a positive integer, got {raw!r}"])
    if value < 1:
        raise ConfigError([f"TMRD_THREADS must be a positive integer, got {raw!r}"])
    return value


def split_override(text):
    """'train.seed=3' -> ('train.seed', '3')."""
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigError([f"override {text!r} is not key=value"])
    return key.strip(), value.strip()


def load_config(path=None, overrides=()):
    """Read a config file (or the defaults) and apply ``key=value`` overrides.

    Args:
        path (str, optional): Flat config file.
        overrides (list): Extra ``section.field=value`` strings, applied last.

    Returns:
        TrainConfig: The validated configuration.

    Raises:
        ConfigError: Every unknown key, bad value and failed constraint at once.
    """
    text = ""
    if path:
        try:
            with open(path, encoding="utf-8") as handle:
                text = handle.read()
        except OSError as error:
            raise ConfigError([f"cannot read config {path}: {error}"]) from error
    if overrides:
        text += "\n" + "\n".join(overrides) + "\n"
    return parse_config_text(text, TrainConfig())
