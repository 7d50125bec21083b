import math

from geo.util import clamp, mean_of


def area(r):
    """Area of a circle of radius r."""
    return math.pi * r * r


def scaled_area(r, k):
    a = area(r * k)
    return clamp(a, 0.0, 1e9)


def describe(r):
    return "area=" + str(round(area(r), 2))


def mean_area(radii):
    """Mean area over a list of radii."""
    return mean_of([area(r) for r in radii])


class Box:
    def __init__(self, w, h):
        self.w = w
        self.h = h

    def size(self):
        """Width times height."""
        return self.w * self.h

    def report(self):
        s = self.size()
        return "box of size %d" % s
