import copy
import json
import os
from dotenv import load_dotenv
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from errors import ConfigValidationError

project_root = Path(__file__).parent
dotenv_path = project_root / '.env'
load_dotenv(dotenv_path)


class Environment(Enum):
    DEVELOPMENT = 'development'
    PRODUCTION = 'production'
    TEST = 'test'


class Config:
    """Base configuration"""
    LOG_LEVEL = os.getenv('FUNKRECS_LOG_LEVEL', 'INFO')
    THREADS = int(os.getenv('FUNKRECS_THREADS', '1'))
    RUN_CONFIG_DEFAULTS = project_root / 'json' / 'run_config.json'
    DESK_RUN_CONFIG = project_root / 'json' / 'desk_config.json'


class DevelopmentConfig(Config):
    DEBUG = True
    OUTPUT_BASE = ''


class ProductionConfig(Config):
    DEBUG = False
    OUTPUT_BASE = os.getenv('FUNKRECS_OUTPUT_BASE', '')


class TestingConfig(Config):
    TESTING = True
    LOG_LEVEL = 'WARNING'
    THREADS = 1
    OUTPUT_BASE = '/tmp/funkrecs_test_runs/'


def config_for_env(env: Optional[str] = None):
    env = Environment(env or os.getenv('FUNKRECS_ENV', 'development'))
    if env == Environment.TEST:
        return TestingConfig
    if env == Environment.PRODUCTION:
        return ProductionConfig
    return DevelopmentConfig


def _strip_notes(section: Mapping[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in section.items() if not k.startswith('_')}


def _merge(base: Dict[str, Any], override: Mapping[str, Any], where: str) -> None:
    for key, value in override.items():
        if key.startswith('_'):
            continue
        if key not in base:
            raise ConfigValidationError(f"unknown config key '{where}{key}'")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigValidationError(f"'{where}{key}' must be a section")
            _merge(base[key], value, f'{where}{key}.')
        else:
            base[key] = value


class RunConfig:
    """
    Effective hyperparameters: defaults < user config file < command-line flags.

    Sections: data, funknn, prior, solver, radon, output. Unknown keys are rejected.
    """

    def __init__(self, values: Mapping[str, Any]):
        self._values = copy.deepcopy(dict(values))

    def __repr__(self):
        return f'<RunConfig sections={sorted(self._values)}>'

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self._values[section]

    @classmethod
    def defaults(cls, path: Union[str, Path, None] = None) -> "RunConfig":
        path = Path(path or Config.RUN_CONFIG_DEFAULTS)
        raw = json.loads(path.read_text())
        return cls({name: _strip_notes(section) for name, section in raw.items()
                    if not name.startswith('_')})

    @classmethod
    def load(cls, user_path: Union[str, Path, None] = None, overrides: Optional[Mapping[str, Any]] = None,
             defaults_path: Union[str, Path, None] = None) -> "RunConfig":
        cfg = cls.defaults(defaults_path)
        if user_path:
            try:
                user = json.loads(Path(user_path).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigValidationError(f"could not read config {user_path}: {e}")
            cfg.update(user)
        if overrides:
            cfg.update(overrides)
        return cfg

    def update(self, override: Mapping[str, Any]) -> "RunConfig":
        _merge(self._values, override, '')
        return self

    def set(self, dotted: str, value: Any) -> "RunConfig":
        """`set('funknn.mode', 'factor')`; a None value leaves the key untouched."""
        if value is None:
            return self
        section, _, key = dotted.partition('.')
        return self.update({section: {key: value}})

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._values)

    def write(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / 'config.json'
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path
