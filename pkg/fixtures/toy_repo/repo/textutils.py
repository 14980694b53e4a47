class Formatter:
    """Renders values for terminal output."""

    def render(self, value):
        return f"value={value}"

    def render_all(self, values):
        return ", ".join(self.render(v) for v in values)
