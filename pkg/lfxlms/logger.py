"""
Logging for Latent FxLMS experiments

Logs:
- Trial starts/ends and per-controller results
- Divergence events (block index, MSE vs ANC-OFF level)
- Dataset rows as they converge
- Training epochs
- Step-size probes

Multiple output formats:
- Console (colored, real-time)
- Daily log files (human readable)
- JSONL files (machine readable, for analysis)
"""

import json
import logging
import sys
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import ConfigError


class ColorFormatter(logging.Formatter):
    """Colored console output"""

    COLORS = {
        'DEBUG': '\033[36m',     # Cyan
        'INFO': '\033[32m',      # Green
        'WARNING': '\033[33m',   # Yellow
        'ERROR': '\033[31m',     # Red
        'CRITICAL': '\033[35m',  # Magenta
        'RESET': '\033[0m'
    }

    def format(self, record):
        color = self.COLORS.get(record.levelname, self.COLORS['RESET'])
        reset = self.COLORS['RESET']
        formatted = super().format(record)
        return f"{color}{formatted}{reset}"


@dataclass
class LogEntry:
    """Structured log entry for JSONL output"""
    timestamp: str
    event_type: str
    data: Dict[str, Any]

    def to_json(self) -> str:
        return json.dumps(asdict(self), default=str)


class LfxlmsLogger:
    """
    Central logging hub for simulations, training and experiments

    Usage:
        logger = LfxlmsLogger("logs")
        logger.trial(3, "start", positions=[[1.5, 1.0, 1.0], [2.1, 1.4, 1.4]])
        logger.epoch(12, {"total": 0.013, "recon": 0.004}, validation=0.005)
        logger.block_diverged("fxlms", 57, 12.4, 0.9)
    """

    def __init__(self, log_dir: str = "logs", console_level: str = "INFO"):
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)

        today = datetime.now().strftime("%Y-%m-%d")
        self.daily_log = self.log_dir / f"lfxlms_{today}.log"

        self.trials_file = self.log_dir / "trials.jsonl"
        self.training_file = self.log_dir / "training.jsonl"
        self.events_file = self.log_dir / "events.jsonl"

        self.logger = logging.getLogger("lfxlms")
        self.logger.setLevel(logging.DEBUG)
        self.logger.handlers = []
        self.logger.propagate = False

        console = logging.StreamHandler(sys.stderr)
        console.setLevel(getattr(logging, console_level.upper()))
        console.setFormatter(ColorFormatter(
            '%(asctime)s [%(levelname)s] %(message)s',
            datefmt='%H:%M:%S'
        ))
        self.logger.addHandler(console)

        file_handler = logging.FileHandler(self.daily_log)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s [%(levelname)s] %(process)d %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        ))
        self.logger.addHandler(file_handler)

        self.session_start = datetime.now()
        self.stats = {
            'trials': 0,
            'divergences': 0,
            'dataset_rows': 0,
            'epochs': 0,
            'probes': 0,
        }

        self.debug(f"Log directory: {self.log_dir.absolute()}")

    def _write_jsonl(self, filepath: Path, entry: LogEntry):
        """Append to JSONL file"""
        with open(filepath, 'a') as f:
            f.write(entry.to_json() + '\n')

    def _now(self) -> str:
        return datetime.now().isoformat()

    def set_level(self, level: str):
        for handler in self.logger.handlers:
            if isinstance(handler, logging.StreamHandler) and not isinstance(handler, logging.FileHandler):
                handler.setLevel(getattr(logging, level.upper()))

    # === Core logging methods ===

    def debug(self, msg: str):
        self.logger.debug(msg)

    def info(self, msg: str):
        self.logger.info(msg)

    def warning(self, msg: str):
        self.logger.warning(msg)

    def error(self, msg: str):
        self.logger.error(msg)

    # === Simulation-specific logging ===

    def trial(self, index: int, phase: str, **data):
        """Log a trial boundary ('start' or 'end')"""
        if phase == "end":
            self.stats['trials'] += 1
        self.debug(f"TRIAL {index} {phase.upper()} {data.get('realization', '')}")
        self._write_jsonl(self.trials_file, LogEntry(
            timestamp=self._now(),
            event_type=f"trial_{phase}",
            data={"trial": index, **data}
        ))

    def controller_result(self, trial: int, controller: str, metrics: Dict[str, Any]):
        """Log one controller's metrics for one trial"""
        conv = metrics.get('convergence_initial')
        conv_txt = "n/c" if conv is None else f"{conv}"
        self.info(f"  trial {trial:>3} {controller:<24} conv={conv_txt:>5} "
                  f"gain={metrics.get('gain_db', float('nan')):6.2f} dB")
        self._write_jsonl(self.trials_file, LogEntry(
            timestamp=self._now(),
            event_type="controller_result",
            data={"trial": trial, "controller": controller, **metrics}
        ))

    def block_diverged(self, controller: str, block_index: int, mse: float, off_level: float):
        """Log a divergence (block MSE above the ANC-OFF threshold)"""
        self.stats['divergences'] += 1
        self.warning(f"DIVERGED [{controller}] block {block_index}: "
                     f"mse={mse:.3e} vs ANC-OFF {off_level:.3e}")
        self._write_jsonl(self.events_file, LogEntry(
            timestamp=self._now(),
            event_type="diverged",
            data={"controller": controller, "block": block_index,
                  "mse": mse, "off_level": off_level}
        ))

    def dataset_row(self, index: int, position, residual_db: float, blocks: int, mu: float):
        """Log a converged dataset filter"""
        self.stats['dataset_rows'] += 1
        self.debug(f"ROW {index:>5} pos=({position[0]:.3f}, {position[1]:.3f}, {position[2]:.3f}) "
                   f"blocks={blocks} mu={mu:g} residual={residual_db:.1f} dB")
        self._write_jsonl(self.events_file, LogEntry(
            timestamp=self._now(),
            event_type="dataset_row",
            data={"index": index, "position": list(position),
                  "residual_db": residual_db, "blocks": blocks, "mu": mu}
        ))

    def epoch(self, epoch: int, losses: Dict[str, float], validation: Optional[float] = None):
        """Log end-of-epoch training losses"""
        self.stats['epochs'] += 1
        parts = " ".join(f"{k}={v:.3e}" for k, v in losses.items())
        val_txt = "" if validation is None else f" | val={validation:.3e}"
        self.debug(f"EPOCH {epoch:>4} {parts}{val_txt}")
        self._write_jsonl(self.training_file, LogEntry(
            timestamp=self._now(),
            event_type="epoch",
            data={"epoch": epoch, **losses, "validation": validation}
        ))

    def step_probe(self, controller: str, step: float, stable: bool, worst_ratio: float):
        """Log one step-size candidate of a tuning sweep"""
        self.stats['probes'] += 1
        status = "stable" if stable else "DIVERGES"
        self.info(f"PROBE [{controller}] mu={step:g}: {status} (worst mse/off={worst_ratio:.2f})")
        self._write_jsonl(self.events_file, LogEntry(
            timestamp=self._now(),
            event_type="step_probe",
            data={"controller": controller, "step": step,
                  "stable": stable, "worst_ratio": worst_ratio}
        ))

    def experiment_summary(self, rows: Dict[str, Dict[str, Any]]):
        """Log end-of-experiment summary per controller"""
        duration = datetime.now() - self.session_start

        self.info("")
        self.info("=" * 60)
        self.info("EXPERIMENT SUMMARY")
        self.info("=" * 60)
        self.info(f"Duration: {duration}")
        self.info(f"Trials: {self.stats['trials']} | Divergences: {self.stats['divergences']}")
        for name, row in rows.items():
            self.info(f"{name:<24} conv={row.get('mean_convergence_initial')} "
                      f"post={row.get('mean_convergence_post_switch')} "
                      f"gain={row.get('mean_gain_db')}")
        self.info("=" * 60)
        self._write_jsonl(self.events_file, LogEntry(
            timestamp=self._now(),
            event_type="experiment_summary",
            data=rows
        ))


# Singleton for easy access
_logger: Optional[LfxlmsLogger] = None


def get_logger(log_dir: Optional[str] = None) -> LfxlmsLogger:
    global _logger
    if _logger is None:
        from .config import LOGGING
        _logger = LfxlmsLogger(log_dir or LOGGING["log_dir"], LOGGING["log_level"])
    return _logger


def configure_logger(section: Dict[str, Any]) -> LfxlmsLogger:
    """Point the singleton at a config 'logging' section"""
    global _logger
    from .config import LOGGING
    log_dir = Path(section.get("log_dir") or LOGGING["log_dir"])
    level = str(section.get("log_level") or LOGGING["log_level"]).upper()
    if not isinstance(getattr(logging, level, None), int):
        raise ConfigError(f"Unknown log_level '{level}'")
    if _logger is None or _logger.log_dir != log_dir:
        _logger = LfxlmsLogger(str(log_dir), level)
    else:
        _logger.set_level(level)
    return _logger
