# Utilities.

import random
import datetime

import numpy as np
import torch


def format_eta(elapsed_time, elapsed_steps, total_steps):
    remaining_time = elapsed_time / max(elapsed_steps, 1) * (total_steps - elapsed_steps)
    return str(remaining_time)


# Helper decorator that registers the baseclass under the 'subtypes' attribute
# of the given class.
def register(superclass):
    def decorator(subclass):
        superclass.subtypes[subclass.__name__] = subclass
        return subclass
    return decorator


def now():
    'The current time as string, to be printed in log messages.'
    return datetime.datetime.now().strftime("[%Y-%m-%d %H:%M:%S]")


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def torch_generator(*keys: int) -> torch.Generator:
    '''A generator whose stream depends only on the given integer keys
    (run seed, epoch, frame, ...), never on how many draws happened before.'''
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence(list(keys)).generate_state(1, dtype=np.uint64)[0] >> 1))
    return g


def numpy_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


class ConfigError(ValueError):
    'Invalid or unknown configuration keys.'


def check_keys(config: dict, allowed, path: str):
    'Raises ConfigError for keys of `config` not in `allowed`, naming the full key path.'
    for key in config:
        if key not in allowed:
            raise ConfigError(f'unknown configuration key {path + "." if path else ""}{key}')


def as_tensor(values, dtype=None, device=None) -> torch.Tensor:
    'torch.as_tensor that copies read-only numpy arrays (such as Mesh buffers) instead of sharing them.'
    if isinstance(values, np.ndarray) and not values.flags.writeable:
        values = values.copy()
    return torch.as_tensor(values, dtype=dtype, device=device)
