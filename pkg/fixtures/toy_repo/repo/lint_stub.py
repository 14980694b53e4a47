"""Stand-in linter: always reports one finding and exits nonzero."""

import sys

print(f"{sys.argv[1] if len(sys.argv) > 1 else '?'}: W101 stub finding")
sys.exit(1)
