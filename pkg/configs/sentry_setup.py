"""Sentry initialization for the TMR-RD lab.

Sets up error reporting for the command-line harness. Without a
SENTRY_DSN the lab runs unchanged and nothing is sent.
"""

import logging
import os

import sentry_sdk
from dotenv import load_dotenv
from sentry_sdk.transport import HttpTransport

load_dotenv()


class CustomHttpTransport(HttpTransport):
    """HTTP transport for Sentry with a short timeout."""

    def __init__(self, options):
        super().__init__(options)
        self.options["timeout"] = 5


def init_sentry():
    """Initialise Sentry from the environment.

    Returns:
        bool: True when a DSN was configured and the SDK started.
    """
    environment = os.getenv("SENTRY_ENVIRONMENT", "development")
    sentry_dsn = os.getenv("SENTRY_DSN")
    release_version = os.getenv("RELEASE_VERSION", "tmrd-lab@1.0.0")

    if not sentry_dsn:
        logging.info("Sentry DSN not provided; error reporting disabled.")
        return False
    try:
        sentry_sdk.init(
            dsn=sentry_dsn,
            environment=environment,
            release=release_version,
            send_default_pii=False,
            debug=environment != "production",
            max_breadcrumbs=100,
            attach_stacktrace=True,
            traces_sample_rate=0.1 if environment == "production" else 1.0,
            shutdown_timeout=2,
            transport=CustomHttpTransport,
        )
        logging.info("Sentry initialized for environment %s.", environment)
        return True
    except Exception as e:
        logging.error(f"Error initializing Sentry: {e}")
        return False
