def f(x):
    y = x + x
    return y


def caller(a, b):
    items = [a, b]
    r = f(items.pop())
    return r, items
