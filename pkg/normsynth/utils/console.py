"""
Human-facing batch status lines
"""
import sys
import time
from datetime import datetime


class CleanLogger:
    """Timestamped one-line status output for long batch runs"""

    def __init__(self, stream=None):
        self.start_time = time.time()
        self.last_update = 0
        self.update_interval = 2.0  # seconds between progress lines
        self.stream = stream

    def _get_time(self):
        return datetime.now().strftime("%H:%M:%S")

    def _should_update(self, force=False):
        current_time = time.time()
        if force or current_time - self.last_update >= self.update_interval:
            self.last_update = current_time
            return True
        return False

    def _print(self, glyph, message):
        print(f"[{self._get_time()}] {glyph} {message}", file=self.stream or sys.stdout)

    def info(self, message):
        self._print("ℹ️ ", message)

    def success(self, message):
        self._print("✅", message)

    def warning(self, message):
        self._print("⚠️ ", message)

    def error(self, message):
        self._print("❌", message)

    def stage(self, name):
        self._print("🔄", name)

    def progress(self, stage, done, total):
        """Throttled progress line; the last item always prints"""
        if self._should_update(force=done >= total):
            self._print("📊", f"{stage}: {done}/{total} | elapsed {time.time() - self.start_time:.0f}s")


# Global clean logger
clean_log = CleanLogger()
