def f(a):
    b = a * 2
    return a + b


def caller(a, b):
    z = f(b)
    return z, a, b
