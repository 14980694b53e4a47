from calculator import add, scale
from textutils import Formatter


def report(a, b):
    fmt = Formatter()
    return fmt.render(add(a, b))


def report_scaled(values, factor):
    fmt = Formatter()
    return fmt.render_all(scale(values, factor))
