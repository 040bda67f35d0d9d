"""Sequential stage runner: stages share a state dict and the first failure stops the run."""

import functools
import traceback
from typing import Callable, Dict, Sequence

from fif_flow.errors import FIFError

Stage = Callable[[Dict], Dict]


def stage(fn: Stage) -> Stage:
    """Convert package errors raised inside a stage into a failure result dict."""

    @functools.wraps(fn)
    def wrapper(state: Dict) -> Dict:
        try:
            return fn(state)
        except FIFError as exc:
            print(f"[{fn.__name__.upper()}] Error: {exc}")
            return {'success': False, 'error': str(exc), 'error_type': type(exc).__name__, 'exit_code': exc.exit_code}

    return wrapper


class SequentialPipeline:
    """Runs stages in order over one shared state."""

    def __init__(self, name: str, stages: Sequence[Stage]):
        self.name = name
        self.stages = list(stages)

    def run(self, state: Dict) -> Dict:
        """
        Execute all stages.

        Args:
            state: Shared state, mutated by the stages

        Returns:
            Dict with success flag, per-stage results and exit_code
        """
        results = {}
        total = len(self.stages)
        for i, stage_fn in enumerate(self.stages, start=1):
            print(f"[PIPELINE] Stage {i}/{total}: {stage_fn.__name__}")
            try:
                result = stage_fn(state)
            except Exception as exc:
                traceback.print_exc()
                result = {'success': False, 'error': f"{type(exc).__name__}: {exc}", 'exit_code': 1}
            results[stage_fn.__name__] = result
            if not result.get('success'):
                return {
                    'success': False,
                    'pipeline': self.name,
                    'failed_stage': stage_fn.__name__,
                    'error': result.get('error', 'unknown error'),
                    'exit_code': result.get('exit_code', 1),
                    'stages': results,
                }
        return {'success': True, 'pipeline': self.name, 'exit_code': 0, 'stages': results}
