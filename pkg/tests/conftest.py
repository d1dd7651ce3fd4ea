import sys
from pathlib import Path

# Allow cross-test imports (shared stub models) when running from repo root.
sys.path.insert(0, str(Path(__file__).parent))
