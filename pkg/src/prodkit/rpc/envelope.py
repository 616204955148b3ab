"""Wire encoding for requests and responses.

Canonical encoding is the XML-RPC envelope (method name + typed params)
over HTTP POST; a JSON mapping with identical semantics is negotiated by
content type. Values: int, float, str, bool, bytes, list, dict with
string keys; None is allowed as a method result.

XML-RPC ints are 32-bit on the wire (stdlib marshaller limit); the JSON
encoding carries Python ints unrestricted.
"""

from __future__ import annotations

import base64
import json
import xmlrpc.client

XML_CONTENT_TYPE = "text/xml"
JSON_CONTENT_TYPE = "application/json"

#: fault codes (External Interface): auth, unknown method, stale state, validation
FAULT_AUTH = 401
FAULT_METHOD = 404
FAULT_STALE = 409
FAULT_VALIDATION = 422
FAULT_DECODE = 400
FAULT_INTERNAL = 500


class RpcFault(Exception):
    def __init__(self, code: int, message: str):
        super().__init__("[%d] %s" % (code, message))
        self.code = code
        self.message = message


class EncodingError(Exception):
    pass


def _to_wire(value):
    if isinstance(value, bytes):
        return xmlrpc.client.Binary(value)
    if isinstance(value, (list, tuple)):
        return [_to_wire(v) for v in value]
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise EncodingError("map keys must be strings, got %r" % (k,))
            out[k] = _to_wire(v)
        return out
    return value


def _from_wire(value):
    if isinstance(value, xmlrpc.client.Binary):
        return value.data
    if isinstance(value, (list, tuple)):
        return [_from_wire(v) for v in value]
    if isinstance(value, dict):
        return {k: _from_wire(v) for k, v in value.items()}
    return value


def _to_json(value):
    if isinstance(value, bytes):
        return {"$binary": base64.b64encode(value).decode("ascii")}
    if isinstance(value, (list, tuple)):
        return [_to_json(v) for v in value]
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise EncodingError("map keys must be strings, got %r" % (k,))
            out[k] = _to_json(v)
        return out
    return value


def _from_json(value):
    if isinstance(value, dict):
        if set(value) == {"$binary"}:
            return base64.b64decode(value["$binary"])
        return {k: _from_json(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_from_json(v) for v in value]
    return value


def encode_request(method: str, params, content_type: str = XML_CONTENT_TYPE) -> bytes:
    if content_type == JSON_CONTENT_TYPE:
        return json.dumps({"method": method, "params": _to_json(list(params))}).encode("utf-8")
    try:
        return xmlrpc.client.dumps(
            tuple(_to_wire(p) for p in params), methodname=method, allow_none=True
        ).encode("utf-8")
    except (TypeError, OverflowError) as exc:
        raise EncodingError(str(exc)) from exc


def decode_request(body: bytes, content_type: str):
    try:
        if content_type.startswith(JSON_CONTENT_TYPE):
            doc = json.loads(body.decode("utf-8"))
            method = doc["method"]
            params = _from_json(doc.get("params", []))
            if not isinstance(method, str) or not isinstance(params, list):
                raise EncodingError("bad request document")
            return method, params
        params, method = xmlrpc.client.loads(body, use_builtin_types=True)
        return method, [_from_wire(p) for p in params]
    except EncodingError:
        raise
    except Exception as exc:
        raise EncodingError(str(exc)) from exc


def encode_response(value, content_type: str = XML_CONTENT_TYPE) -> bytes:
    if content_type == JSON_CONTENT_TYPE:
        return json.dumps({"result": _to_json(value)}).encode("utf-8")
    return xmlrpc.client.dumps(
        (_to_wire(value),), methodresponse=True, allow_none=True
    ).encode("utf-8")


def encode_fault(code: int, message: str, content_type: str = XML_CONTENT_TYPE) -> bytes:
    if content_type == JSON_CONTENT_TYPE:
        return json.dumps({"fault": {"code": code, "message": message}}).encode("utf-8")
    return xmlrpc.client.dumps(
        xmlrpc.client.Fault(code, message), methodresponse=True
    ).encode("utf-8")


def decode_response(body: bytes, content_type: str):
    """Result value, or RpcFault for an in-band fault."""
    if content_type.startswith(JSON_CONTENT_TYPE):
        doc = json.loads(body.decode("utf-8"))
        if "fault" in doc:
            raise RpcFault(int(doc["fault"]["code"]), str(doc["fault"]["message"]))
        return _from_json(doc.get("result"))
    try:
        (value,), _method = xmlrpc.client.loads(body, use_builtin_types=True)
    except xmlrpc.client.Fault as fault:
        raise RpcFault(fault.faultCode, fault.faultString) from None
    return _from_wire(value)
