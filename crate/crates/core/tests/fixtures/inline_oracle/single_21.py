def f(x):
    return x * 2


def caller(a, b):
    out = []
    for i in range(abs(b) % 5):
        out.append(f(i + a))
    return out
