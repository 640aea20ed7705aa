from concurrent.futures import Future, ThreadPoolExecutor
from typing import Any, Callable, Iterable, List, Optional


class WorkerPool:
    """Process-wide thread pool; results always come back in submission order."""

    def __init__(self, size: int = 1):
        self.size = size
        self._executor: Optional[ThreadPoolExecutor] = None

    def init_app(self, config: Any) -> None:
        size = int(getattr(config, 'THREADS', 1) or 1)
        self.resize(size)

    def resize(self, size: int) -> None:
        size = max(int(size), 1)
        if size != self.size:
            self.shutdown()
        self.size = size

    def _get_executor(self) -> ThreadPoolExecutor:
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self.size, thread_name_prefix='funkrecs')
        return self._executor

    def map(self, func: Callable[[Any], Any], items: Iterable[Any]) -> List[Any]:
        items = list(items)
        if self.size == 1 or len(items) < 2:
            return [func(item) for item in items]
        return list(self._get_executor().map(func, items))

    def submit(self, func: Callable[..., Any], *args: Any, **kwargs: Any) -> Future:
        return self._get_executor().submit(func, *args, **kwargs)

    def shutdown(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None


pool = WorkerPool()
