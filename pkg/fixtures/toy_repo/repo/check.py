"""Oracle for the toy repo: verifies calculator.add."""

import sys

sys.path.insert(0, ".")

from calculator import add

result = add(2, 3)
assert result == 5, f"add(2, 3) returned {result}, expected 5"
print("ok")
