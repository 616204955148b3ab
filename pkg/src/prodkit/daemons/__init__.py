# ServerProcess lives in prodkit.daemons.runner; it is not re-exported
# here so `python -m prodkit.daemons.runner` stays warning-free.
from prodkit.daemons.config import ServerConfig, SiteConfig, load_config, parse_config
from prodkit.daemons.datahandler import DataHandlerDaemon, GcReport
from prodkit.daemons.monitor import MonitorService
from prodkit.daemons.queue import CycleReport, QueueDaemon
from prodkit.daemons.submit import SubmitService

__all__ = [
    "CycleReport",
    "DataHandlerDaemon",
    "GcReport",
    "MonitorService",
    "QueueDaemon",
    "ServerConfig",
    "SiteConfig",
    "SubmitService",
    "load_config",
    "parse_config",
]
