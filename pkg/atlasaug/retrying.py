import random

import tenacity

from atlasaug.exceptions import CheckpointError, PhantomGenerationError


class retry_if_io_error(tenacity.retry_if_exception):
    """Retry strategy that retries transient filesystem failures.

    * `OSError` is retried.
    * `CheckpointError` is retried only when it was caused by an `OSError`.
    * Any other exception, in particular domain errors, is raised immediately.
    """

    def __init__(self):
        super().__init__(self._retry_if)

    def _retry_if(self, error):
        if isinstance(error, OSError):
            return True
        if isinstance(error, CheckpointError):
            return isinstance(error.__cause__, OSError)
        return False


class wait_exponential_jitter(tenacity.wait_exponential):
    """Wait strategy that applies exponential backoff with jitter."""

    def __call__(self, retry_state):
        high = super().__call__(retry_state)
        low = high * 0.75
        return low + (random.random() * (high - low))


# Writes of checkpoints and reports back off exponentially (with some
# randomness) up to 2 seconds between attempts and give up after 10 seconds.
retry_io = tenacity.retry(
    retry=retry_if_io_error(),
    wait=wait_exponential_jitter(multiplier=0.05, max=2),
    stop=tenacity.stop_after_delay(10),
    reraise=True,
)


def generation_attempts(max_attempts: int = 6) -> tenacity.Retrying:
    """Return an attempt iterator for phantom generation.

    Only `PhantomGenerationError` is retried, immediately, and the last
    error is re-raised once `max_attempts` is exhausted.
    """
    return tenacity.Retrying(
        retry=tenacity.retry_if_exception_type(PhantomGenerationError),
        stop=tenacity.stop_after_attempt(max_attempts),
        reraise=True,
    )
