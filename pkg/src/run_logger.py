#!/usr/bin/env python3
"""
Run Logger

Handles logging to the console, a human-readable run log, and the
machine-readable JSON-lines training log.
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional


class RunLogger:
    """Logs to console and file, plus one JSON object per line for records"""

    def __init__(self, out_dir: Optional[Path] = None, quiet: bool = False,
                 title: str = "Completion Run Log"):
        """
        Initialize logger

        Args:
            out_dir: Directory for run_log.md and train_log.jsonl (None = console only)
            quiet: If True, nothing is echoed to the console
            title: Header written at the top of run_log.md
        """
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.quiet = quiet
        self.log_entries: List[str] = []
        self.records: List[Dict] = []
        self.start_time = datetime.now()

        self.output_file: Optional[Path] = None
        self.records_file: Optional[Path] = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.output_file = self.out_dir / "run_log.md"
            self.records_file = self.out_dir / "train_log.jsonl"

            # Create/clear the output files
            with open(self.output_file, 'w') as f:
                f.write(f"# {title}\n")
                f.write(f"Started: {self.start_time.strftime('%Y-%m-%d %H:%M:%S')}\n\n")
            self.records_file.write_text("")

    def log(self, text: str, to_console: bool = True, to_file: bool = True):
        """Log text to console and/or file"""
        if to_console and not self.quiet:
            print(text)
        if to_file and self.output_file is not None:
            with open(self.output_file, 'a') as f:
                f.write(text + '\n')
        self.log_entries.append(text)

    def log_section(self, title: str):
        """Log a major section header"""
        separator = "=" * 80
        self.log(f"\n{separator}")
        self.log(title)
        self.log(f"{separator}\n")

    def log_subsection(self, title: str):
        """Log a subsection header"""
        self.log(f"\n{'-' * 80}")
        self.log(title)
        self.log(f"{'-' * 80}\n")

    def log_record(self, record: Dict):
        """Append one JSON object to the records file (keys sorted for byte stability)"""
        self.records.append(record)
        if self.records_file is not None:
            with open(self.records_file, 'a') as f:
                f.write(json.dumps(record, sort_keys=True) + '\n')

    def finalize(self) -> float:
        """Write final timestamp; returns the run duration in seconds"""
        end_time = datetime.now()
        duration = (end_time - self.start_time).total_seconds()

        self.log_section("RUN COMPLETE")
        self.log(f"Ended: {end_time.strftime('%Y-%m-%d %H:%M:%S')}")
        self.log(f"Duration: {duration:.1f} seconds")
        if self.output_file is not None:
            self.log(f"\nOutput saved to: {self.output_file}")
        return duration
