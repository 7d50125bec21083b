def f(x, y):
    return x // y


def caller(a, b):
    r = f(a, b)
    return r
