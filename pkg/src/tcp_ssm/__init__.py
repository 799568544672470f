"""Token-conditioned-pole selective state-space operators."""

from importlib.metadata import PackageNotFoundError
from importlib.metadata import version as _version

from .config import TcpSettings
from .errors import TcpError
from .models import OperatorParams, PoleBankConfig
from .params import init_operator_params, load_operator_params, save_operator_params
from .scan import build_route, forward_multi_route, forward_route, reference_forward

try:
    __version__ = _version("tcp-ssm")
except PackageNotFoundError:  # dev/editable fallback
    __version__ = "0"

__all__ = [
    "OperatorParams",
    "PoleBankConfig",
    "TcpError",
    "TcpSettings",
    "__version__",
    "build_route",
    "forward_multi_route",
    "forward_route",
    "init_operator_params",
    "load_operator_params",
    "reference_forward",
    "save_operator_params",
]
