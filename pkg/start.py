import subprocess
import sys
from pathlib import Path

from webstep.secrets import load_secrets

BASE_DIR = Path(__file__).resolve().parent
load_secrets(BASE_DIR / "secrets.json")

if __name__ == "__main__":
    completed = subprocess.run(
        [sys.executable, "-m", "webstep.cli", *sys.argv[1:]],
        cwd=BASE_DIR,
    )
    sys.exit(completed.returncode)
