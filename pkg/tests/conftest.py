import sys
from pathlib import Path

# allow running the suite from a source checkout without installing
SRC = Path(__file__).resolve().parent.parent / "src"
try:
    import everest  # noqa: F401
except ImportError:
    sys.path.insert(0, str(SRC))
