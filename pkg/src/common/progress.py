"""
Console progress and per-run log files for PointGCN commands.

Console output is kept to phase banners and tqdm bars; everything else goes
to ``<log_dir>/<run>_<timestamp>.log``.
"""

import logging
import time
import traceback
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Union

from tqdm import tqdm

BANNER_WIDTH = 70
BAR_WIDTH = 100
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def format_duration(seconds: float) -> str:
    """Seconds as '12.3s', '4.5m' or '1.2h'."""
    if seconds < 60:
        return f"{seconds:.1f}s"
    if seconds < 3600:
        return f"{seconds / 60:.1f}m"
    return f"{seconds / 3600:.1f}h"


class PhaseTiming(NamedTuple):
    phase: str
    seconds: float


@dataclass
class RunStats:
    clouds_processed: int = 0
    failed_objects: int = 0
    epochs_completed: int = 0
    phases: List[PhaseTiming] = field(default_factory=list)


class RunProgress:
    """
    Phase banners, progress bars, counters and the run log of one command.

    Args:
        run_name: Name of the run, e.g. "train"; also names the log file
        log_dir: Directory for the run log; no log file when None
        quiet: Suppress console output and progress bars
    """

    PHASES = {
        'INIT': '🔧 Initializing',
        'CONFIG': '⚙️  Configuring',
        'LOAD': '📂 Loading data',
        'GRAPH': '🕸  Building graphs',
        'TRAIN': '⚡ Training',
        'EVAL': '✓ Evaluating',
        'SAVE': '💾 Saving',
        'EXPORT': '📤 Exporting',
        'COMPLETE': '✅ Complete',
        'ERROR': '❌ Error',
    }

    def __init__(self, run_name: str, log_dir: Optional[Union[str, Path]] = None, quiet: bool = False):
        self.run_name = run_name
        self.quiet = quiet
        self.stats = RunStats()
        self.current_phase = 'INIT'
        self._started = time.perf_counter()
        self._phase_started = self._started
        self.pbar: Optional[tqdm] = None
        self.sub_pbar: Optional[tqdm] = None

        safe_name = run_name.replace(' ', '_').replace('/', '_')
        self.logger = logging.getLogger(f'run.{safe_name}')
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = False
        for handler in list(self.logger.handlers):
            self.logger.removeHandler(handler)

        self.log_file: Optional[Path] = None
        self.file_handler: Optional[logging.Handler] = None
        if log_dir is not None:
            self._open_log(Path(log_dir), safe_name)

        self._banner(
            f"POINTGCN {run_name.upper()}",
            f"Started: {datetime.now():%Y-%m-%d %H:%M:%S}",
            *([f"Log: {self.log_file}"] if self.log_file else []),
        )

    def _open_log(self, log_dir: Path, safe_name: str):
        log_dir.mkdir(parents=True, exist_ok=True)
        self.log_file = log_dir / f"{safe_name}_{datetime.now():%Y%m%d_%H%M%S}.log"
        handler = logging.FileHandler(self.log_file, encoding='utf-8')
        handler.setLevel(logging.DEBUG)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        self.logger.addHandler(handler)
        self.file_handler = handler

    def _print(self, message: str = ""):
        if not self.quiet:
            print(message, flush=True)

    def _banner(self, *lines: str):
        self._print("=" * BANNER_WIDTH)
        for line in lines:
            self._print(f"  {line}" if line else "")
        self._print("=" * BANNER_WIDTH)

    # ------------------------------------------------------------ phases

    def set_phase(self, phase: str, description: Optional[str] = None):
        """Enter ``phase`` (a PHASES key), closing the timing of the previous one."""
        if phase != self.current_phase:
            now = time.perf_counter()
            if self.current_phase != 'INIT':
                timing = PhaseTiming(self.current_phase, now - self._phase_started)
                self.stats.phases.append(timing)
                self.logger.info(f"Phase {timing.phase} took {timing.seconds:.2f}s")
            self.current_phase = phase
            self._phase_started = now

        label = self.PHASES.get(phase, phase)
        if description:
            label = f"{label}: {description}"
        self._print(label)
        self.logger.info(f"Phase: {label}")

    # ------------------------------------------------------------ bars

    def _bar(self, **kwargs) -> tqdm:
        return tqdm(ncols=BAR_WIDTH, disable=self.quiet, **kwargs)

    @contextmanager
    def progress_bar(self, total: int, desc: str, unit: str = "clouds") -> Iterator[tqdm]:
        """Main bar, e.g. epochs of a training run or files of a conversion."""
        self.pbar = self._bar(
            total=total, desc=desc, unit=unit,
            bar_format='{l_bar}{bar}| {n_fmt}/{total_fmt} [{elapsed}<{remaining}, {rate_fmt}]{postfix}',
        )
        try:
            yield self.pbar
        finally:
            self.pbar.close()
            self.pbar = None

    @contextmanager
    def sub_progress(self, total: int, desc: str, leave: bool = False) -> Iterator[tqdm]:
        """Nested bar below the main one; batches of an epoch."""
        self.sub_pbar = self._bar(
            total=total, desc=f"  └─ {desc}", unit="batches", leave=leave,
            bar_format='  {l_bar}{bar}| {n_fmt}/{total_fmt}',
        )
        try:
            yield self.sub_pbar
        finally:
            self.sub_pbar.close()
            self.sub_pbar = None

    def update(self, n: int = 1):
        """Advance the main bar and count ``n`` processed clouds."""
        if self.pbar is not None:
            self.pbar.update(n)
        self.stats.clouds_processed += n

    # ------------------------------------------------------------ counters and log

    def increment_failed(self, count: int = 1):
        self.stats.failed_objects += count

    def increment_epochs(self, count: int = 1):
        self.stats.epochs_completed += count

    def log(self, message: str, level: str = 'info'):
        """Write to the run log only."""
        self.logger.log(logging.getLevelName(level.upper()), message)

    def log_error(self, error: Exception, context: str = ""):
        self.logger.error(f"Error in {context}: {error}\n{traceback.format_exc()}")

    def complete(self):
        """Close the last phase and print the run summary."""
        self.set_phase('COMPLETE')
        total = format_duration(time.perf_counter() - self._started)
        stats = self.stats

        lines = [f"Total Time: {total}", f"Clouds Processed: {stats.clouds_processed:,}"]
        if stats.epochs_completed:
            lines.append(f"Epochs Completed: {stats.epochs_completed:,}")
        if stats.failed_objects:
            lines.append(f"Failed Objects: {stats.failed_objects:,}")

        self._print()
        self._banner(f"RUN COMPLETE: {self.run_name}")
        for line in lines:
            self._print(f"  {line}")
        if self.log_file is not None:
            self._print(f"\n  Detailed log: {self.log_file}")
        self._print("=" * BANNER_WIDTH)

        self.logger.info(f"SUMMARY - {self.run_name}")
        for line in lines:
            self.logger.info(line)
        for timing in stats.phases:
            self.logger.info(f"  {timing.phase}: {format_duration(timing.seconds)}")

    def close(self):
        """Release the log file handler."""
        for handler in list(self.logger.handlers):
            handler.close()
            self.logger.removeHandler(handler)
        self.file_handler = None
