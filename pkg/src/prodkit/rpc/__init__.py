from prodkit.rpc.client import RpcClient, TransportError
from prodkit.rpc.envelope import (
    FAULT_AUTH,
    FAULT_DECODE,
    FAULT_INTERNAL,
    FAULT_METHOD,
    FAULT_STALE,
    FAULT_VALIDATION,
    JSON_CONTENT_TYPE,
    XML_CONTENT_TYPE,
    RpcFault,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
)
from prodkit.rpc.server import (
    METHOD_NAMES,
    PROTOCOL_VERSION,
    BindFailure,
    DispatchTable,
    MethodNotFound,
    RpcServer,
    TlsConfig,
    serve,
)

__all__ = [
    "BindFailure",
    "DispatchTable",
    "FAULT_AUTH",
    "FAULT_DECODE",
    "FAULT_INTERNAL",
    "FAULT_METHOD",
    "FAULT_STALE",
    "FAULT_VALIDATION",
    "JSON_CONTENT_TYPE",
    "METHOD_NAMES",
    "MethodNotFound",
    "PROTOCOL_VERSION",
    "RpcClient",
    "RpcFault",
    "RpcServer",
    "TlsConfig",
    "TransportError",
    "XML_CONTENT_TYPE",
    "decode_request",
    "decode_response",
    "encode_request",
    "encode_response",
    "serve",
]
