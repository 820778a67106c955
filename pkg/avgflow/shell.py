import hashlib
import json
import logging
import os
import shutil
from pathlib import Path
from typing import Any, Optional

HASH_BLOCK = 1 << 16


class FileOps:
    """Provides logged file/folder handling for run artifacts."""

    def __init__(self, log: Optional[logging.Logger] = None):
        if not log:
            self.log = logging.getLogger(self.__class__.__name__)
        else:
            self.log = log

    def __repr__(self):
        return f"<{self.__class__.__name__}>"

    def makedirs(self, path: Path | str, exist_ok: bool = True) -> Path:
        """Recursive directory creation function"""
        self.log.debug("making directory: %s", path)
        os.makedirs(path, exist_ok=exist_ok)
        return Path(path)

    def copy(self, src: Path | str, dst: Path | str) -> Path:
        """copy file or folders -- behaves like `cp -rf` into an existing folder"""
        self.log.info("copy %s to %s", src, dst)
        src, dst = Path(src), Path(dst)
        if dst.is_dir():
            dst = dst / src.name
        if src.is_dir():
            shutil.copytree(src, dst, dirs_exist_ok=True)
        else:
            shutil.copy2(src, dst)
        return dst

    def sha256(self, path: Path | str) -> str:
        """hex digest of a file's contents"""
        digest = hashlib.sha256()
        with open(path, "rb") as f:
            for block in iter(lambda: f.read(HASH_BLOCK), b""):
                digest.update(block)
        return digest.hexdigest()

    def write_json(self, path: Path | str, data: Any) -> Path:
        """sorted, indented json"""
        self.log.debug("writing %s", path)
        with open(path, "w", encoding="utf8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
        return Path(path)

    def read_json(self, path: Path | str) -> Any:
        with open(path, encoding="utf8") as f:
            return json.load(f)
