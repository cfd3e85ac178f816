"""Learned dispatching for the flexible job-shop scheduling problem."""

from .core import Assignment, DomainError, Instance, OperationSpec, Schedule, gap, makespan, validate_schedule

__all__ = ["Assignment", "DomainError", "Instance", "OperationSpec", "Schedule", "gap", "makespan", "validate_schedule"]
__version__ = "0.1.0"
