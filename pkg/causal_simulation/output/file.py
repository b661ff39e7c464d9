import dataclasses
import enum
import json
import logging
import os
import typing

import dataclasses_json
import numpy as np
import pandas as pd  # type: ignore

from causal_simulation.errors import OutputLockedError

logger = logging.getLogger(__name__)

LOCK_FILE = '.lock'
SUMMARY_FILE = 'summary.txt'
FLOAT_FORMAT = '%.10g'


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class FileOutputConfig:
    path: str
    overwrite: bool = False


class ResultsWriter:
    """
    Collects result tables and writes each as CSV (canonical) and JSON (mirror) into one output directory, plus a
    plain-text summary of every table marked for it. An advisory lock file keeps concurrent runs out of the directory.
    """

    class OutputFileType(enum.Enum):
        CSV = 'csv'
        JSON = 'json'
        TEXT = 'txt'

        @property
        def suffix(self) -> str:
            return f'.{self.value}'

    def __init__(self, config: FileOutputConfig) -> None:
        self._config = config

        # Performs checks on the output directory as early as possible:
        if os.path.exists(self._config.path) and not os.path.isdir(self._config.path):
            raise NotADirectoryError(f'Output path is not a directory: {self._config.path}')
        if not self._config.overwrite and os.path.isdir(self._config.path) and self._existing_outputs():
            raise FileExistsError(f'Output directory already holds results: {self._config.path}')

        self._tables: typing.List[typing.Tuple[str, pd.DataFrame, bool]] = []
        self._lock_path: typing.Optional[str] = None

    def __enter__(self) -> 'ResultsWriter':
        os.makedirs(self._config.path, exist_ok=True)
        lock_path = os.path.join(self._config.path, LOCK_FILE)
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OutputLockedError(f'Output directory is locked by another run (remove {lock_path} if it is stale)') from None
        with os.fdopen(fd, 'w') as f_lock:
            f_lock.write(f'{os.getpid()}\n')
        self._lock_path = lock_path
        return self

    def __exit__(self, exc_type: typing.Any, exc_val: typing.Any, exc_tb: typing.Any) -> None:
        try:
            if self._lock_path is None:
                raise RuntimeError("Lock is not held! Did you call __exit__ before __enter__?")
            if exc_type is None:
                self._write_all()
        finally:
            if self._lock_path is not None:
                os.remove(self._lock_path)
                self._lock_path = None

    def _existing_outputs(self) -> typing.List[str]:
        suffixes = {file_type.suffix for file_type in ResultsWriter.OutputFileType}
        return sorted(name for name in os.listdir(self._config.path) if os.path.splitext(name)[1] in suffixes)

    def path_for(self, name: str, file_type: 'ResultsWriter.OutputFileType') -> str:
        return os.path.join(self._config.path, name + file_type.suffix)

    def add_table(self, name: str, frame: pd.DataFrame, summarize: bool = True) -> None:
        if any(existing == name for existing, _, _ in self._tables):
            raise ValueError(f"Duplicate result table name: {name!r}")
        self._tables.append((name, frame, summarize))

    def _write_all(self) -> None:
        for name, frame, _ in self._tables:
            frame.to_csv(self.path_for(name, ResultsWriter.OutputFileType.CSV), index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
            with open(self.path_for(name, ResultsWriter.OutputFileType.JSON), 'w') as f_json:
                json.dump(_records(frame), f_json, indent=2)
                f_json.write('\n')
            logger.info("Wrote %s (%d rows)", name, len(frame))
        with open(os.path.join(self._config.path, SUMMARY_FILE), 'w') as f_summary:
            f_summary.write(self.summary_text())

    def summary_text(self) -> str:
        blocks = []
        for name, frame, summarize in self._tables:
            if summarize:
                blocks.append(f'== {name} ==\n' + frame.to_string(index=False, float_format=lambda value: FLOAT_FORMAT % value) + '\n')
        return '\n'.join(blocks)


def _records(frame: pd.DataFrame) -> typing.List[typing.Dict[str, typing.Any]]:
    def plain(value: typing.Any) -> typing.Any:
        if isinstance(value, (np.floating, float)):
            return None if np.isnan(value) else float(value)
        if isinstance(value, np.integer):
            return int(value)
        return value

    return [{str(column): plain(value) for column, value in zip(frame.columns, row)} for row in frame.itertuples(index=False)]
