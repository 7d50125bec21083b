def f(x, y):
    return x - 2 * y


def caller(a, b):
    return f(y=a, x=b)
