"""
Error Handling for the Scene Graph Reasoner
Categorizes failures and turns them into structured errors and CLI exit codes
"""

import json
import re
from enum import Enum


class ErrorCategory(Enum):
    """Categories of errors that can occur"""
    SHAPE_MISMATCH = "shape_mismatch"
    NON_FINITE = "non_finite"
    MALFORMED_INPUT = "malformed_input"
    MISSING_FIELD = "missing_field"
    CONTRACT = "contract"
    GRADIENT = "gradient"
    IO = "io"
    UNKNOWN = "unknown"


# Exit codes of cli.py
EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2


class SGRError(Exception):
    """
    Structured error raised by every module of the reasoner

    Args:
        message (str): Human readable description
        category (ErrorCategory): Error category
        **context: Extra fields (operation, shapes, line, field, entity, step...)
    """

    def __init__(self, message, category=ErrorCategory.CONTRACT, **context):
        super().__init__(message)
        self.message = message
        self.category = category
        self.context = context

    def __str__(self):
        if not self.context:
            return self.message
        details = ", ".join(f"{key}={value}" for key, value in self.context.items())
        return f"{self.message} ({details})"

    def to_dict(self):
        return {
            'message': self.message,
            'category': self.category.value,
            'context': {key: str(value) for key, value in self.context.items()},
        }


def shape_error(op, *shapes):
    """Build the shape-mismatch error of a tensor primitive"""
    return SGRError(
        f"shape mismatch in {op}",
        ErrorCategory.SHAPE_MISMATCH,
        op=op,
        shapes=" vs ".join(str(tuple(s)) for s in shapes),
    )


def non_finite_error(op):
    """Build the NaN/Inf error of a tensor primitive"""
    return SGRError(f"non-finite value produced by {op}", ErrorCategory.NON_FINITE, op=op)


class ErrorHandler:
    """
    Maps exceptions to categories, hints and exit codes
    """

    # Known message patterns for exceptions that are not SGRError
    ERROR_PATTERNS = {
        ErrorCategory.IO: [
            r'no such file',
            r'permission denied',
            r'is a directory',
            r'disk full',
        ],
        ErrorCategory.MALFORMED_INPUT: [
            r'expecting value',
            r'invalid literal',
            r'could not convert',
            r'unterminated string',
        ],
        ErrorCategory.NON_FINITE: [
            r'\bnan\b',
            r'\binf\b',
            r'overflow',
        ],
        ErrorCategory.SHAPE_MISMATCH: [
            r'shapes? .* not aligned',
            r'could not be broadcast',
            r'dimension mismatch',
        ],
    }

    HINTS = {
        ErrorCategory.SHAPE_MISMATCH: "Check hidden_size against the checkpoint and the vocabulary size.",
        ErrorCategory.NON_FINITE: "Lower the learning rate or check the input features for extreme values.",
        ErrorCategory.MALFORMED_INPUT: "Each JSONL line must be one JSON object; TSV rows need six tab-separated fields.",
        ErrorCategory.MISSING_FIELD: "Required instance fields are para_id, sentences and entities.",
        ErrorCategory.CONTRACT: "The input violates a documented contract; see the context fields above.",
        ErrorCategory.GRADIENT: "Autodiff and finite differences disagree; inspect the reported parameters.",
        ErrorCategory.IO: "Check that the path exists and is readable/writable.",
        ErrorCategory.UNKNOWN: "Unexpected failure; rerun with the same seed to reproduce.",
    }

    def __init__(self):
        self.error_history = []

    def categorize_error(self, error):
        """
        Categorize an exception

        Args:
            error (Exception): The exception to categorize

        Returns:
            ErrorCategory: The category of the error
        """
        if isinstance(error, SGRError):
            return error.category
        if isinstance(error, OSError):
            return ErrorCategory.IO
        if isinstance(error, json.JSONDecodeError):
            return ErrorCategory.MALFORMED_INPUT
        if isinstance(error, KeyError):
            return ErrorCategory.MISSING_FIELD

        error_msg_lower = str(error).lower()
        for category, patterns in self.ERROR_PATTERNS.items():
            for pattern in patterns:
                if re.search(pattern, error_msg_lower):
                    return category

        return ErrorCategory.UNKNOWN

    def exit_code(self, category):
        """I/O failures exit with 2, every other failure with 1"""
        return EXIT_IO if category == ErrorCategory.IO else EXIT_CONTRACT

    def get_user_friendly_message(self, error, context=""):
        """
        Build the message printed by the CLI

        Args:
            error (Exception): The exception
            context (str): Where the error occurred (command name)

        Returns:
            str: Message with category, details and a hint
        """
        category = self.categorize_error(error)
        self.error_history.append({
            'timestamp': self._get_timestamp(),
            'category': category.value,
            'message': str(error),
            'type': type(error).__name__,
            'context': context,
        })

        header = f"[{context or 'sgr'}] error ({category.value}): {error}"
        return f"{header}\n  hint: {self.HINTS[category]}"

    def get_error_summary(self):
        """
        Get a summary of recent errors

        Returns:
            dict: Summary of errors by category
        """
        summary = {"total": len(self.error_history), "by_category": {}}
        for error in self.error_history:
            category = error['category']
            summary["by_category"][category] = summary["by_category"].get(category, 0) + 1
        return summary

    def _get_timestamp(self):
        from datetime import datetime
        return datetime.now().isoformat()

    def clear_history(self):
        """Clear error history"""
        self.error_history = []


# Global error handler instance
error_handler = ErrorHandler()


def handle_cli_error(error, command=""):
    """
    Convenience function used by cli.py for any failure of a command

    Args:
        error (Exception): The exception that occurred
        command (str): The subcommand being run

    Returns:
        tuple: (exit_code, message)
    """
    from app_logger import log_contract_error, log_io_error

    category = error_handler.categorize_error(error)
    message = error_handler.get_user_friendly_message(error, command)
    details = error.to_dict()['context'] if isinstance(error, SGRError) else {}

    if category == ErrorCategory.IO:
        log_io_error(command, str(error), **details)
    else:
        log_contract_error(command, str(error), category=category.value, **details)

    return error_handler.exit_code(category), message
