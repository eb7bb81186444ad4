"""
Worker queue for scoring jobs.
Handles a FIFO job list served by a pool of worker threads; results come back
in submission order regardless of which worker finished first.
"""

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, List, Optional, Sequence

logger = logging.getLogger(__name__)


class JobStatus(Enum):
    """Status of a scoring job."""
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class QueueFullError(Exception):
    pass


@dataclass(eq=False)
class ScoringJob:
    """One unit of work, usually all test queries of one user."""
    name: str
    task: Callable[[], Any]
    index: int = -1
    status: JobStatus = JobStatus.PENDING
    result: Any = None
    error: Optional[BaseException] = None
    done: threading.Event = field(default_factory=threading.Event, repr=False)


class ScoringQueue:
    """
    FIFO queue of scoring jobs with a pool of worker threads.
    """

    def __init__(self, n_workers: int = 1, max_size: int = 100_000):
        """
        Initialize the scoring queue.

        Args:
            n_workers: Number of worker threads started by ``start``
            max_size: Maximum number of pending jobs
        """
        if n_workers < 1:
            raise ValueError("n_workers must be at least 1")
        self._jobs: List[ScoringJob] = []
        self._n_workers = n_workers
        self._workers: List[threading.Thread] = []
        self._stop_event = threading.Event()
        self._lock = threading.Lock()
        self._condition = threading.Condition(self._lock)
        self._max_size = max_size
        self._submitted = 0

    @property
    def n_workers(self) -> int:
        return self._n_workers

    def start(self):
        """Start the worker threads."""
        if any(t.is_alive() for t in self._workers):
            return
        self._stop_event.clear()
        self._workers = [
            threading.Thread(target=self._worker_loop, name=f"scoring-{i}", daemon=True)
            for i in range(self._n_workers)
        ]
        for thread in self._workers:
            thread.start()
        logger.debug(f"Scoring queue started with {self._n_workers} workers")

    def stop(self):
        """Stop the worker threads; pending jobs stay pending."""
        self._stop_event.set()
        with self._condition:
            self._condition.notify_all()
        for thread in self._workers:
            thread.join(timeout=5)
        self._workers = []

    def __enter__(self) -> "ScoringQueue":
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    def submit(self, name: str, task: Callable[[], Any]) -> ScoringJob:
        """
        Add a job to the queue.

        Raises:
            QueueFullError: If ``max_size`` jobs are already pending
        """
        with self._condition:
            if len(self._jobs) >= self._max_size:
                raise QueueFullError(f"Scoring queue is full ({self._max_size} jobs)")
            job = ScoringJob(name=name, task=task, index=self._submitted)
            self._submitted += 1
            self._jobs.append(job)
            self._condition.notify()
        return job

    def cancel_job(self, job: ScoringJob) -> bool:
        """Drop a job that has not started yet."""
        with self._lock:
            if job in self._jobs:
                self._jobs.remove(job)
                job.status = JobStatus.FAILED
                job.error = RuntimeError("cancelled")
                job.done.set()
                return True
        return False

    def _next_job(self) -> Optional[ScoringJob]:
        with self._condition:
            while not self._jobs and not self._stop_event.is_set():
                self._condition.wait(timeout=1)
            if self._stop_event.is_set():
                return None
            job = self._jobs.pop(0)
            job.status = JobStatus.RUNNING
            return job

    def _worker_loop(self):
        while not self._stop_event.is_set():
            job = self._next_job()
            if job is None:
                continue
            try:
                job.result = job.task()
                job.status = JobStatus.COMPLETED
            except Exception as e:
                logger.debug(f"Job {job.name} failed: {e}")
                job.error = e
                job.status = JobStatus.FAILED
            finally:
                job.done.set()


def run_jobs(tasks: Sequence[tuple], n_workers: int = 1) -> List[Any]:
    """
    Run ``(name, callable)`` tasks and return their results in input order.

    With one worker the tasks run inline on the calling thread.

    Raises:
        The first failing job's exception, in input order. Jobs still
        pending at that point are cancelled.
    """
    if n_workers <= 1:
        return [task() for _, task in tasks]
    with ScoringQueue(n_workers) as pool:
        jobs = [pool.submit(name, task) for name, task in tasks]
        for i, job in enumerate(jobs):
            job.done.wait()
            if job.status is not JobStatus.FAILED:
                continue
            rest = jobs[i + 1:]
            cancelled = sum(pool.cancel_job(other) for other in rest)
            if cancelled:
                logger.debug(f"Cancelled {cancelled} pending jobs after {job.name} failed")
            for other in rest:
                other.done.wait()
            raise job.error
    return [job.result for job in jobs]
