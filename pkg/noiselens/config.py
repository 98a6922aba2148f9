import os

from dotenv import load_dotenv

from noiselens.core.exceptions import ConfigError

load_dotenv()


def _flag(name, default):
    return os.environ.get(name, default).strip().lower() in ('1', 'true', 'yes', 'on')


class Config:
    """Settings shared by every environment; each reads its NOISELENS_* variable."""
    LOG_DIR = os.environ.get('NOISELENS_LOG_DIR', 'logs')
    LOG_LEVEL = os.environ.get('NOISELENS_LOG_LEVEL', 'INFO')
    DEFAULT_SEED = int(os.environ.get('NOISELENS_DEFAULT_SEED', '0'))
    STRICT_CONFIG = _flag('NOISELENS_STRICT_CONFIG', 'true')
    OVERLAY_SCALE = 4


class DevelopmentConfig(Config):
    """Development config."""
    DEBUG = True
    TESTING = False
    LOG_LEVEL = os.environ.get('NOISELENS_LOG_LEVEL', 'DEBUG')


class ProductionConfig(Config):
    """Production config."""
    DEBUG = False
    TESTING = False


class TestingConfig(Config):
    """Testing config."""
    DEBUG = True
    TESTING = True
    LOG_DIR = None
    LOG_LEVEL = 'WARNING'


config_by_name = {
    'dev': DevelopmentConfig,
    'prod': ProductionConfig,
    'test': TestingConfig
}


def get_config():
    """Settings class for ``NOISELENS_ENV`` (``dev`` when unset)."""
    env = os.getenv('NOISELENS_ENV', 'dev').strip().lower()
    try:
        return config_by_name[env]
    except KeyError:
        raise ConfigError(
            f"NOISELENS_ENV must be one of {', '.join(sorted(config_by_name))}, got {env!r}"
        ) from None
