"""
Plugin system for the Trainer.
Provides hooks at the end of each batch, at the end of each epoch, and on training errors.
"""

import logging
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)


class HookType(Enum):
    """Types of hooks available in the plugin system."""
    BATCH_END = "batch_end"
    EPOCH_END = "epoch_end"
    TRAIN_ERROR = "train_error"


class BatchContext:
    """Context object passed to batch-end hooks."""

    def __init__(self, epoch: int, batch: int, loss: float,
                 chunk_ids: Sequence[Tuple[int, int]]):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        self.chunk_ids = list(chunk_ids)


class EpochContext:
    """Context object passed to epoch-end hooks."""

    def __init__(self, epoch: int, train_loss: float, test_loss: Optional[float], model: Any):
        self.epoch = epoch
        self.train_loss = train_loss
        self.test_loss = test_loss
        self.model = model


class ErrorContext:
    """Context object passed to training-error hooks."""

    def __init__(self, exception: Exception, epoch: int):
        self.exception = exception
        self.epoch = epoch
        self.handled = False

    def mark_handled(self):
        """Stop training cleanly with the curves recorded so far instead of raising."""
        self.handled = True


class PluginManager:
    """Manages hooks for the Trainer."""

    def __init__(self):
        self.hooks: Dict[HookType, List[Callable]] = {
            HookType.BATCH_END: [],
            HookType.EPOCH_END: [],
            HookType.TRAIN_ERROR: [],
        }

    def register_hook(self, hook_type: HookType, hook_func: Callable):
        """
        Register a hook function.

        Args:
            hook_type: Type of hook to register
            hook_func: Function to call for this hook
        """
        if hook_type not in self.hooks:
            raise ValueError(f"Invalid hook type: {hook_type}")

        self.hooks[hook_type].append(hook_func)
        logger.debug(f"Registered {hook_type.value} hook: {_hook_name(hook_func)}")

    def unregister_hook(self, hook_type: HookType, hook_func: Callable):
        if hook_type in self.hooks and hook_func in self.hooks[hook_type]:
            self.hooks[hook_type].remove(hook_func)
            logger.debug(f"Unregistered {hook_type.value} hook: {_hook_name(hook_func)}")

    def clear_hooks(self, hook_type: Optional[HookType] = None):
        """
        Clear hooks for a specific type or all hooks.

        Args:
            hook_type: Specific hook type to clear, or None for all
        """
        if hook_type:
            self.hooks[hook_type].clear()
        else:
            for hooks in self.hooks.values():
                hooks.clear()

    def _execute(self, hook_type: HookType, context: Any):
        for hook in self.hooks[hook_type]:
            try:
                hook(context)
            except Exception as e:
                logger.error(f"Error in {hook_type.value} hook {_hook_name(hook)}: {e}")

    def execute_batch_end_hooks(self, context: BatchContext):
        self._execute(HookType.BATCH_END, context)

    def execute_epoch_end_hooks(self, context: EpochContext):
        self._execute(HookType.EPOCH_END, context)

    def execute_error_hooks(self, context: ErrorContext):
        """Execute training-error hooks until one marks the error handled."""
        for hook in self.hooks[HookType.TRAIN_ERROR]:
            try:
                hook(context)
                if context.handled:
                    break
            except Exception as e:
                logger.error(f"Error in {HookType.TRAIN_ERROR.value} hook {_hook_name(hook)}: {e}")

    def list_hooks(self) -> Dict[str, List[str]]:
        """Return a summary of registered hooks."""
        return {
            hook_type.value: [_hook_name(func) for func in funcs]
            for hook_type, funcs in self.hooks.items()
        }


def _hook_name(hook: Callable) -> str:
    return getattr(hook, "__name__", type(hook).__name__)
