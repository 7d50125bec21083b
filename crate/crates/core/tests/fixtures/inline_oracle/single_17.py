def f(x, y=5, z=7):
    return x + y * z


def caller(a, b):
    return f(a, 2) - b
