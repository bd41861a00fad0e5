"""
Worker pool for per-sample work (feature extraction, scene rendering)
"""

import queue
import threading
import time
import traceback
import uuid
from typing import Any, Callable, Dict, Iterable, List, Optional

import torch


class WorkerPool:
    """Thread pool with task ids; `max_workers <= 1` runs everything inline."""

    def __init__(self, max_workers: int = 1):
        self.task_queue: "queue.Queue" = queue.Queue()
        self.results: Dict[str, Any] = {}
        self.status: Dict[str, str] = {}
        self.max_workers = max_workers
        self.workers: List[threading.Thread] = []
        self.running = True

        if max_workers > 1:
            for i in range(max_workers):
                worker = threading.Thread(target=self._worker, daemon=True, name=f"MvadWorker-{i}")
                worker.start()
                self.workers.append(worker)

    def _worker(self):
        """Worker thread to process tasks"""
        while self.running:
            try:
                task_id, func, args, kwargs = self.task_queue.get(timeout=0.5)
            except queue.Empty:
                continue
            self.status[task_id] = "running"
            self._run(task_id, func, args, kwargs)

    def _run(self, task_id: str, func: Callable, args, kwargs):
        try:
            result = func(*args, **kwargs)
            self.results[task_id] = {"status": "completed", "result": result, "time": time.time()}
            self.status[task_id] = "completed"
        except Exception as e:
            self.results[task_id] = {
                "status": "failed",
                "error": e,
                "traceback": traceback.format_exc(),
                "time": time.time()
            }
            self.status[task_id] = "failed"

    def submit(self, func: Callable, *args, **kwargs) -> str:
        """
        Submit a task

        Args:
            func: Function to execute
            *args: Function arguments
            **kwargs: Function keyword arguments

        Returns:
            task_id: Unique task identifier
        """
        task_id = str(uuid.uuid4())
        self.status[task_id] = "queued"
        if self.max_workers <= 1:
            self._run(task_id, func, args, kwargs)
        else:
            self.task_queue.put((task_id, func, args, kwargs))
        return task_id

    def wait_for_result(self, task_id: str, timeout: Optional[float] = None) -> Any:
        """Wait for task to complete and return result; re-raises task errors"""
        start = time.time()
        while task_id not in self.results:
            if timeout is not None and time.time() - start > timeout:
                raise TimeoutError(f"task {task_id} did not finish in {timeout}s")
            time.sleep(0.01)

        result = self.results.pop(task_id)
        self.status.pop(task_id, None)
        if result["status"] == "completed":
            return result["result"]
        raise result["error"]

    def map_ordered(self, func: Callable, items: Iterable[Any]) -> List[Any]:
        """Apply `func` to every item; results come back in input order"""
        task_ids = [self.submit(func, item) for item in items]
        return [self.wait_for_result(task_id) for task_id in task_ids]

    def shutdown(self):
        self.running = False
        for worker in self.workers:
            worker.join(timeout=2.0)

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *exc):
        self.shutdown()


def configure_runtime(workers: int = 1, deterministic: bool = False) -> int:
    """
    Set torch threading for the run.

    In deterministic mode reductions run on one thread with deterministic
    kernels and the returned worker count is 1.
    """
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        return 1
    torch.use_deterministic_algorithms(False)
    return max(1, workers)
