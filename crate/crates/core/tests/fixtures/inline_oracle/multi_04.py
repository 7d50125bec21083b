def f(x):
    try:
        return 10 // x
    except ZeroDivisionError:
        return None


def caller(a, b):
    v = f(a)
    return v, b
