"""Rewrite the committed analysis goldens: ``python3 tests/golden/regen.py``."""
import json
from pathlib import Path

from scg import fixtures as fx

HERE = Path(__file__).parent


def render(name: str) -> str:
    return json.dumps(fx.fixture_report(fx.get_fixture(name)), indent=1) + "\n"


if __name__ == "__main__":
    for name in fx.fixture_names():
        (HERE / f"{name}.json").write_text(render(name))
        print("wrote", name)
