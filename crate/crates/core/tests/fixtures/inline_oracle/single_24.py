def f(x):
    return 10 // x


def caller(a, b):
    return a > 0 and f(b)
