"""
Django settings for the Tabdlm project.

The project has no web surface: Django provides configuration, logging,
the management-command CLI, the test runner and the run ledger.
"""

from pathlib import Path
from decouple import config
import os

BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = config('TABDLM_SECRET_KEY', default='tabdlm-local-experiments-only')

DEBUG = config('TABDLM_DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',

    # Experiment apps
    'schedules',
    'numcodec',
    'mdlm',
    'diffusion',
    'tabular',
    'metrics',
    'experiments',
]


# Database (run ledger only)

DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": config('TABDLM_DATABASE', default=str(BASE_DIR / "db.sqlite3")),
    }
}

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

USE_TZ = True
TIME_ZONE = "UTC"


# Numerical runtime

TABDLM_DEVICE = config('TABDLM_DEVICE', default='cpu')
TABDLM_NUM_THREADS = config('TABDLM_NUM_THREADS', default=0, cast=int)  # 0 = torch default
TABDLM_RUN_SLOW = config('TABDLM_RUN_SLOW', default=False, cast=bool)


# Celery configuration for sharded sampling

CELERY_BROKER_URL = config('CELERY_BROKER_URL', default='')
CELERY_RESULT_BACKEND = config('CELERY_RESULT_BACKEND', default='')
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_ACCEPT_CONTENT = ['json']


# Logging Configuration

LOG_DIR = Path(config('TABDLM_LOG_DIR', default=str(BASE_DIR / 'logs')))
LOG_LEVEL = config('TABDLM_LOG_LEVEL', default='INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'file': {
            'level': 'INFO',
            'class': 'logging.FileHandler',
            'filename': LOG_DIR / 'tabdlm.log',
            'formatter': 'verbose',
        },
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'root': {
        'handlers': ['console', 'file'],
        'level': LOG_LEVEL,
    },
}

# Create logs directory
os.makedirs(LOG_DIR, exist_ok=True)
