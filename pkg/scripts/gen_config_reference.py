"""Write docs/config_reference.txt from the config schema in code."""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ntrr.data import config_reference


def main():
    out_dir = os.path.join(os.path.dirname(__file__), "..", "docs")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config_reference.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_reference())
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
