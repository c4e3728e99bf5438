import numpy as np


def glorot_init(shape, fan_in, fan_out, rng):
    """Uniform Glorot/Xavier samples on ``[-sqrt(6/(fan_in+fan_out)), +...]``."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
