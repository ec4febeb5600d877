"""Knowledge-grounded image retrieval.

A query-image retrieval engine for images whose relevance hinges on
named entities: candidate entity knowledge is re-ranked per query,
fused with recognition likelihoods, and the winning knowledge text is
encoded jointly with the query and region features by a transformer
that scores alignment.  Everything runs on a small hand-rolled
reverse-mode autodiff core over numpy.

Submodule attributes are loaded lazily so that `import kgir` stays free
of numpy: the CLI must pin BLAS thread counts via environment variables
before numpy is first imported, and an eager package import would beat
it to it.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": ".autograd",
    "no_grad": ".autograd",
    "Adam": ".optim",
    "AdamState": ".optim",
    "adam_step": ".optim",
    "grad_check": ".gradcheck",
    "GradCheckReport": ".gradcheck",
}

__all__ = [*_EXPORTS, "__version__"]


def __getattr__(name):
    home = _EXPORTS.get(name)
    if home is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    return getattr(import_module(home, __name__), name)


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
