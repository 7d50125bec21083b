def f(x):
    return x + 1


def caller(a, b):
    return max(f(a), b)
