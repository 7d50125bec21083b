def f(x):
    t = x * 3
    return t - 1


def caller(a, b):
    t = a + b
    r = f(t)
    return r + t
