"""
Simple App Logger - issue log for the Scene Graph Reasoner
Records data problems and failed runs to a JSON file for later inspection
"""

import json
import os
import threading
from datetime import datetime


class AppLogger:
    """
    File logger for the reasoner

    Issues are stored as one JSON array in log_file (default logs/issues.json)
    """

    def __init__(self, log_file="logs/issues.json"):
        self.log_file = log_file
        self._lock = threading.Lock()
        self._ensure_log_directory()

    def _ensure_log_directory(self):
        """Ensure log directory exists"""
        log_dir = os.path.dirname(self.log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir, exist_ok=True)

    def log_issue(self, command, issue_type, error_message="", **metadata):
        """
        Log an issue

        Args:
            command (str): The command or component that hit the issue
            issue_type (str): Type of issue (malformed_triple, missing_entity, etc.)
            error_message (str): Error message if any
            **metadata: Additional info (para_id, counts, epoch...)
        """
        issue = {
            'timestamp': datetime.now().isoformat(),
            'command': command,
            'issue_type': issue_type,
            'error_message': error_message,
            'metadata': metadata
        }

        self._ensure_log_directory()

        # Prediction workers share one log file
        with self._lock:
            issues = self.read_issues()
            issues.append(issue)
            try:
                with open(self.log_file, "w", encoding="utf-8") as f:
                    json.dump(issues, f, indent=2, ensure_ascii=False, default=str)
            except Exception as e:
                print(f"[AppLogger] Error writing log: {e}")

    def read_issues(self):
        """Return all logged issues (empty list when the log does not exist)"""
        if not os.path.exists(self.log_file):
            return []
        try:
            with open(self.log_file, 'r', encoding='utf-8') as f:
                return json.load(f)
        except Exception as e:
            print(f"[AppLogger] Warning: Could not read existing log: {e}")
            return []


# Global instance
_logger = None


def get_logger():
    """Get the global app logger instance"""
    global _logger
    if _logger is None:
        from sgr_config import get_log_dir
        _logger = AppLogger(os.path.join(get_log_dir(), "issues.json"))
    return _logger


def set_log_file(log_file):
    """Redirect the global logger (tests point it at a temp dir)"""
    global _logger
    _logger = AppLogger(log_file)
    return _logger


# Convenience functions
def log_malformed_triples(source, count, examples=None):
    """Log knowledge triples that were skipped"""
    print(f"[Knowledge] Warning: skipped {count} malformed triple(s) from {source}")
    get_logger().log_issue(
        command="knowledge",
        issue_type="malformed_triple",
        error_message=f"{count} malformed triple(s) skipped",
        source=source,
        examples=examples or []
    )


def log_missing_entities(missing):
    """Log gold (paragraph, entity) pairs absent from the predictions"""
    print(f"[Evaluator] Warning: {len(missing)} gold entities missing from predictions; counted as misses")
    get_logger().log_issue(
        command="evaluate",
        issue_type="missing_entity",
        error_message=f"{len(missing)} gold entities have no predicted rows",
        missing=[f"{para_id}/{entity}" for para_id, entity in missing[:50]]
    )


def log_non_finite_loss(epoch, batch_index, para_ids):
    """Log the batch that produced a NaN/Inf loss"""
    get_logger().log_issue(
        command="train",
        issue_type="non_finite_loss",
        error_message="training aborted on non-finite loss",
        epoch=epoch,
        batch=batch_index,
        para_ids=list(para_ids)
    )


def log_contract_error(command, error_message, **metadata):
    """Log a contract violation that stopped a command"""
    get_logger().log_issue(
        command=command,
        issue_type="contract_error",
        error_message=error_message,
        **metadata
    )


def log_io_error(command, error_message, **metadata):
    """Log an unreadable or unwritable file"""
    get_logger().log_issue(
        command=command,
        issue_type="io_error",
        error_message=error_message,
        **metadata
    )


def log_gradcheck_failure(failures):
    """Log parameters whose gradients failed the finite-difference check"""
    get_logger().log_issue(
        command="gradcheck",
        issue_type="gradcheck_failure",
        error_message=f"{len(failures)} parameter(s) above tolerance",
        failures=failures
    )


def log_repaired_transitions(para_id, repairs):
    """Log label transitions rewritten by the constraint repair"""
    get_logger().log_issue(
        command="predict",
        issue_type="invalid_transition",
        error_message=f"{len(repairs)} label(s) repaired",
        para_id=para_id,
        repairs=repairs
    )
