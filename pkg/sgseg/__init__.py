import os


appdata_path = os.environ.get("SGSEG_HOME") or os.path.expanduser("~/.local/share/sgseg")
os.makedirs(appdata_path, exist_ok=True)
