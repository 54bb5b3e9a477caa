from .settings import settings
from .run_config import RunConfig, SynthConfig, load_run_config, load_synth_config, parse_config

__all__ = ['settings', 'RunConfig', 'SynthConfig', 'load_run_config', 'load_synth_config', 'parse_config']
