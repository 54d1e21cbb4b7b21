import os
import sys
import venv
import subprocess

VENV_DIR = "venv"


def _venv_bin(name):
    folder = "Scripts" if os.name == "nt" else "bin"
    return os.path.join(VENV_DIR, folder, name)


def setup_venv(dev=False):
    if not os.path.exists(VENV_DIR):
        print(f"Creating virtual environment in {VENV_DIR}...")
        venv.create(VENV_DIR, with_pip=True)

        print("Installing dependencies...")
        manifest = "requirements-dev.txt" if dev else "requirements.txt"
        subprocess.check_call([_venv_bin("pip"), "install", "-r", manifest])


def run_in_venv(argv):
    if os.environ.get("VIRTUAL_ENV"):
        # Already inside a venv: run the CLI in-process
        import main
        return main.start(argv)
    print("Restarting in virtual environment...", file=sys.stderr)
    return subprocess.call([_venv_bin("python"), "main.py", *argv])


if __name__ == "__main__":
    args = sys.argv[1:]
    dev = "--dev" in args
    if dev:
        args.remove("--dev")
    setup_venv(dev)
    sys.exit(run_in_venv(args))
