import logging

from .cwlate_env import TransportType, get_mcp_config
from .mcp_server import mcp

logger = logging.getLogger(__name__)

NETWORK_TRANSPORTS = (TransportType.HTTP.value, TransportType.SSE.value)


def main():
    """Start the estimation tool server on the configured transport."""
    config = get_mcp_config()
    transport = config.server_transport

    if transport not in NETWORK_TRANSPORTS:
        logger.info("Serving cwlate tools over %s", transport)
        mcp.run(transport=transport)
        return

    logger.info(
        "Serving cwlate tools over %s on %s:%d (simulation tool %s)",
        transport,
        config.bind_host,
        config.bind_port,
        "enabled" if config.simulation_enabled else "disabled",
    )
    mcp.run(transport=transport, host=config.bind_host, port=config.bind_port)


if __name__ == "__main__":
    main()
