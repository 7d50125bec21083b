def f(x, y):
    try:
        q = x // y
    except ZeroDivisionError:
        q = 0
    return q


def caller(a, b):
    return f(a, b) + 1
