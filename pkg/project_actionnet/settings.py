"""
Django settings for project_actionnet project.

The project hosts the action quality assessment model as a Django app
(`app_aqa`) driven through management commands; there is no web surface.

For more information on this file, see
https://docs.djangoproject.com/en/5.2/topics/settings/
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get(
    'ACTIONNET_SECRET_KEY',
    'django-insecure-3v!k0q2m#t8l^w7x)p1r9c@e5n_y4h6z&s-j(b$f=a+d0g',
)

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'rest_framework',
    'app_aqa.apps.AppAqaConfig',
]

# No models are stored; commands read and write feature files and checkpoints.
DATABASES = {}


# Internationalization
# https://docs.djangoproject.com/en/5.2/topics/i18n/

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True


# Model and optimizer defaults. Presets and config files override these per run.
ACTIONNET_DEFAULTS = {
    'kernel_scale': 1.0,
    'dropout': 0.5,
    'momentum': 0.9,
    'weight_decay': 1e-4,
    'lr_attention': 0.01,
    'lr_prediction': 0.05,
    'decay_rate': 0.1,
    'attention_norm': 'softmax',
    'adjacency_grad': False,
}

# Threads used for per-sample forward/backward inside a batch.
# Results are merged in sample order, so this never changes the numbers.
ACTIONNET_WORKERS = int(os.environ.get('ACTIONNET_WORKERS', '1'))

# Multi-minute reproduction tests (overfit, five-seed generalization, ablations).
ACTIONNET_SLOW_TESTS = os.environ.get('ACTIONNET_SLOW_TESTS', '') not in ('', '0', 'false')

# Logging configuration: ensure app_aqa INFO logs appear in console
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'standard': {
            'format': '%(asctime)s [%(levelname)s] %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'level': os.environ.get('ACTIONNET_LOG_LEVEL', 'INFO'),
            'formatter': 'standard',
        },
    },
    'loggers': {
        'app_aqa': {
            'handlers': ['console'],
            'level': os.environ.get('ACTIONNET_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}
