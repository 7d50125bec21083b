SCALE = 4


def f(x):
    return x * SCALE


def caller(a, b):
    return f(a) - b
