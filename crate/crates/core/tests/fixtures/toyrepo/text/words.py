import re
from collections import Counter


def tokenize_words(text):
    """Lower-cased alphabetic words of text."""
    return re.findall(r"[a-z]+", text.lower())


def count_words(text):
    """Number of words in text."""
    return len(tokenize_words(text))


def top_words(text, n):
    """The n most frequent words."""
    counts = Counter(tokenize_words(text))
    return [w for w, _ in counts.most_common(n)]


def summary(text):
    total = count_words(text)
    best = top_words(text, 3)
    return "%d words, top: %s" % (total, ", ".join(best))
