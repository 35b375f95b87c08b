"""
Django settings for the Biot-number inference project.

The project has no web surface: Django provides configuration, the
`manage.py` command line, run bookkeeping in the ORM and the test runner.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/stable/ref/settings/
"""

import os

# Build paths inside the project like this: os.path.join(BASE_DIR, ...)
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


# Only used for Django's signing machinery, which the commands never touch.
SECRET_KEY = os.getenv('BIOT_SECRET_KEY', 'biot-local-only')

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'biot',
]

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

TEST_RUNNER = 'project.runner.BiotTestRunner'


# Database

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.path.join(BASE_DIR, 'db.sqlite3'),
    }
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Experiment defaults
#
# Every key may be overridden by a preset, then by the JSON file given with
# `--config`. Unknown keys are rejected.

BIOT = {
    'seed': 0,
    'model': {
        'c0': 35000.0,
        'c1': 1.0,
        'c2': 1.0,
        'a': 0.3,
        'b': 1.0,
        'T': 3600.0,
        'u0': 'x',
        'ua': 0.3,
        'ub': 1.0,
    },
    'prior': {
        'degree': 10,
        'sigma': 100.0,
        'rho_x': 0.7,
        'rho_t': 900.0,
        'mean': 0.0,
        'kernel_x': 'matern',
        'kernel_t': 'squared_exponential',
        'noise_shape': 2.0,
        'noise_rate': 2.0,
    },
    'data': {
        'source': 'simulate',
        'path': None,
        'n_x': 8,
        'n_t': 19,
        'noise': None,
        'truth_grid': 40,
        'oracle_nx': 401,
        'oracle_nt': 1600,
    },
    'fd': {
        'nx': 101,
        'nt': 400,
    },
    'network': {
        'width': 256,
        'depth': 4,
        'seed': 0,
    },
    'training': {
        'regime': 'adaptive',
        'nu1': 1.0,
        'nu2': 10.0,
        'n_int': 1024,
        'n_bnd': 256,
        'n_alpha': 32,
        'general_steps': 50000,
        'adaptive_steps': 10000,
        'lr_start': 3e-3,
        'lr_end': 1e-5,
        'window': 500,
        'patience': 2000,
        'min_improvement': 0.01,
        'log_every': 1000,
        'init_weights': None,
        'online_every': 500,
        'online_steps': 200,
        'online_lr': 1e-4,
        'weighted_bank': True,
    },
    'map': {
        'max_iter': 200,
        'step': 1e-2,
        'max_step': 1.0,
        'grow': 1.2,
        'grad_tol': 1e-6,
        'lam_start': 20.0,
        'lam_end': 0.5,
        'local_tol': 1e-4,
        'local_steps': 2000,
        'local_lr': 1e-3,
    },
    'sampler': {
        'scheme': 'hmc',
        'delayed_acceptance': True,
        'warmup': 10000,
        'samples': 10000,
        'n_leapfrog': 40,
        'step': None,
        'refresh': 500,
        'shrinkage': 0.1,
        'gain_exponent': 0.7,
        'comparisons': [],
        'flush_every': 100,
    },
    'diagnostics': {
        'level': 0.95,
        'slice_fractions': [0.0, 0.25, 0.5, 0.75, 1.0],
        'n_x': 50,
        'profile_samples': 2000,
        'hellinger_samples': 500,
        'trace_component': [0, 3],
        'trace_window': 50,
    },
}

BIOT_PRESETS = {
    'simulation': {},
    'experimental': {
        'model': {
            'c0': 362319.0,
            'a': 0.133,
            'b': 0.228,
            'T': 2400.0,
            'u0': 'spline',
            'ua': 'spline',
            'ub': 'spline',
        },
        'prior': {
            'rho_x': 0.095,
            'rho_t': 400.0,
        },
        'data': {
            'source': 'file',
        },
    },
}

BIOT_OUTPUT_DIR = os.path.join(BASE_DIR, 'runs')

BIOT_LOG_LEVEL = 'INFO'

BIOT_SLOW_TESTS = False

# The full-size simulation study, hours on a desktop.
BIOT_STUDY_TESTS = False


# Override configuration with environmental variables

def as_flag(value):
    """Read an on/off switch given as an environment string."""
    return str(value).strip().lower() in ('1', 'true', 'yes', 'on')


for key in ('BIOT_OUTPUT_DIR', 'BIOT_SEED', 'BIOT_LOG_LEVEL', 'BIOT_SLOW_TESTS',
            'BIOT_STUDY_TESTS'):
    if os.getenv(key):
        locals()[key] = os.getenv(key)

BIOT_SLOW_TESTS = as_flag(BIOT_SLOW_TESTS)
BIOT_STUDY_TESTS = as_flag(BIOT_STUDY_TESTS)

if 'BIOT_SEED' in dir():
    BIOT['seed'] = int(BIOT_SEED)


# Logging configuration

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'biot': {
            'handlers': ['console'],
            'level': BIOT_LOG_LEVEL,
        },
    },
}
