import math

import numpy as np

from layercode import APIUsageError

SIGNIFICANT_DIGITS = 10


class Space:
    def __init__(self, min, max, is_integer=False):
        if min > max:
            raise APIUsageError(f'Sweep min {min} exceeds max {max}')

        self.min = min
        self.max = max
        self.is_integer = is_integer

    def grid(self, num):
        '''num points evenly spaced in this space's metric, endpoints included'''
        if num < 1:
            raise APIUsageError(f'Sweep grid needs at least one point, got num={num}')
        if num == 1 or self.min == self.max:
            return [_tidy(self.min)]

        points = [self.unnormalize(v) for v in np.linspace(-1, 1, num)]
        return sorted(set(_tidy(v) for v in points))

class Linear(Space):
    def unnormalize(self, value):
        zero_one = (value + 1)/2
        value = zero_one * (self.max - self.min) + self.min
        if self.is_integer:
            value = round(value)
        return value

class Log(Space):
    base: int = 10

    def __init__(self, min, max, is_integer=False):
        if min <= 0:
            raise APIUsageError(f'Log sweep needs a positive min, got {min}')
        super().__init__(min, max, is_integer)

    def unnormalize(self, value):
        zero_one = (value + 1)/2
        log_spaced = zero_one*(math.log(self.max, self.base) - math.log(self.min, self.base)) + math.log(self.min, self.base)
        value = self.base ** log_spaced
        if self.is_integer:
            value = round(value)
        return value


def _tidy(value):
    '''Rounds away float noise so grid points print identically on every run'''
    if value == 0:
        return 0.0
    return float(f'{value:.{SIGNIFICANT_DIGITS}g}')

def space_from_config(section):
    distribution = section.get('distribution', 'uniform')
    kwargs = dict(min=section['min'], max=section['max'])
    if distribution == 'uniform':
        return Linear(**kwargs)
    elif distribution == 'int_uniform':
        return Linear(**kwargs, is_integer=True)
    elif distribution == 'log':
        return Log(**kwargs)
    raise APIUsageError(f'Invalid distribution: {distribution}')

def grid_from_config(section):
    '''An explicit values list wins over distribution/min/max/num'''
    values = section.get('values')
    if values is not None:
        if isinstance(values, (int, float)):
            values = [values]
        grid = sorted(set(_tidy(float(v)) for v in values))
    elif 'min' in section and 'max' in section:
        grid = space_from_config(section).grid(int(section.get('num', 1)))
    else:
        grid = []

    if not grid:
        raise APIUsageError('Sweep grid is empty: set values = [...] or min/max/num')

    return grid
