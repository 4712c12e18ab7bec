import sys
from pathlib import Path

# make the in-repo sources and the test helpers importable without install
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))
sys.path.insert(0, str(Path(__file__).resolve().parent))
