"""Reference server for the S4DB inpainter wire protocol.

Run an echo server on stdio (what ``exec:`` endpoints expect)::

    python3 s4db_bridge.py --stdio

or on a Unix socket::

    python3 s4db_bridge.py --socket /tmp/warp4d.sock --adapter mymodel:inpaint

An adapter is a callable ``adapter(message) -> message``. ``Message.tensors``
maps names to ``(shape, array('f'))``; raise any exception to send an error
reply. Only the standard library is needed.
"""

import argparse
import importlib
import json
import os
import socket
import struct
import sys
from array import array

MAGIC = b"S4DB"
VERSION = 1
REQUEST, RESPONSE, ERROR = 1, 2, 3
MAX_PAYLOAD = 1 << 30
_FRAME = struct.Struct("<4sIIQ")


class ProtocolError(Exception):
    pass


class Closed(Exception):
    pass


class Message:
    def __init__(self, kind, header=None, tensors=None, version=VERSION):
        self.kind = kind
        self.version = version
        self.header = dict(header or {})
        # name -> (shape tuple, array('f')), insertion ordered
        self.tensors = dict(tensors or {})

    def tensor(self, name):
        if name not in self.tensors:
            raise ProtocolError("missing tensor %r" % name)
        return self.tensors[name]

    @classmethod
    def error(cls, text):
        return cls(ERROR, {"error": str(text)})


def _le(values):
    a = array("f", values)
    if sys.byteorder != "little":
        a.byteswap()
    return a.tobytes()


def encode(msg):
    header = dict(msg.header)
    header["tensors"] = [{"name": n, "shape": list(s)} for n, (s, _) in msg.tensors.items()]
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(_le(d) for _, d in msg.tensors.values())
    payload = struct.pack("<I", len(hjson)) + hjson + body
    return _FRAME.pack(MAGIC, msg.version, msg.kind, len(payload)) + payload


def _size(shape):
    n = 1
    for d in shape:
        if not isinstance(d, int) or d < 0:
            raise ProtocolError("bad shape %r" % (shape,))
        n *= d
    return n


def decode_payload(version, kind, payload):
    if len(payload) < 4:
        raise ProtocolError("payload shorter than its header length")
    (hlen,) = struct.unpack_from("<I", payload)
    if hlen > len(payload) - 4:
        raise ProtocolError("header length %d exceeds payload" % hlen)
    try:
        header = json.loads(payload[4 : 4 + hlen])
    except ValueError as e:
        raise ProtocolError("header: %s" % e)
    if not isinstance(header, dict):
        raise ProtocolError("header is not an object")
    specs = header.pop("tensors", [])
    pos = 4 + hlen
    tensors = {}
    for spec in specs:
        try:
            name, shape = spec["name"], tuple(spec["shape"])
        except (TypeError, KeyError):
            raise ProtocolError("bad tensor spec %r" % (spec,))
        n = _size(shape) * 4
        if pos + n > len(payload):
            raise ProtocolError("tensor %s truncated" % name)
        a = array("f")
        a.frombytes(payload[pos : pos + n])
        if sys.byteorder != "little":
            a.byteswap()
        tensors[name] = (shape, a)
        pos += n
    if pos != len(payload):
        raise ProtocolError("%d trailing payload bytes" % (len(payload) - pos))
    return Message(kind, header, tensors, version)


def _read_exact(stream, n):
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise Closed()
        buf += chunk
    return buf


def read_message(stream):
    magic, version, kind, length = _FRAME.unpack(_read_exact(stream, _FRAME.size))
    if magic != MAGIC:
        raise ProtocolError("bad magic %r" % magic)
    if version != VERSION:
        raise ProtocolError("unsupported protocol version %d" % version)
    if kind not in (REQUEST, RESPONSE, ERROR):
        raise ProtocolError("unknown message type %d" % kind)
    if length > MAX_PAYLOAD:
        raise ProtocolError("payload of %d bytes exceeds the limit" % length)
    try:
        payload = _read_exact(stream, length)
    except Closed:
        raise ProtocolError("payload truncated")
    return decode_payload(version, kind, payload)


def write_message(stream, msg):
    stream.write(encode(msg))
    stream.flush()


def server_handshake(stream):
    hello = _read_exact(stream, 8)
    if hello[:4] != MAGIC:
        raise ProtocolError("bad magic %r" % hello[:4])
    (v,) = struct.unpack("<I", hello[4:])
    accepted = v if v == VERSION else 0
    stream.write(MAGIC + struct.pack("<I", accepted))
    stream.flush()
    if not accepted:
        raise ProtocolError("unsupported protocol version %d" % v)


def serve_stream(stream, adapter):
    """Handles one connection until the peer closes it."""
    try:
        server_handshake(stream)
    except Closed:
        return
    while True:
        try:
            msg = read_message(stream)
        except Closed:
            return
        except ProtocolError as e:
            try:
                write_message(stream, Message.error(e))
            except OSError:
                pass
            return
        if msg.kind != REQUEST:
            reply = Message.error("expected a request")
        else:
            try:
                reply = adapter(msg)
            except Exception as e:  # adapter failures never kill the server
                reply = Message.error("%s: %s" % (type(e).__name__, e))
        write_message(stream, reply)


def serve(endpoint, adapter):
    """``endpoint`` is ``"stdio"`` or a Unix socket path. Never returns for sockets."""
    if endpoint == "stdio":
        class Duplex:
            read = sys.stdin.buffer.read
            write = sys.stdout.buffer.write
            flush = sys.stdout.buffer.flush

        serve_stream(Duplex(), adapter)
        return
    if os.path.exists(endpoint):
        os.unlink(endpoint)
    srv = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    srv.bind(endpoint)
    srv.listen()
    while True:
        conn, _ = srv.accept()
        with conn, conn.makefile("rwb") as f:
            try:
                serve_stream(f, adapter)
            except OSError:
                pass


def echo_adapter(msg):
    """Returns the request's warped frames unchanged."""
    shape, data = msg.tensor("warped")
    return Message(RESPONSE, {}, {"frames": (shape, data)})


def load_adapter(spec):
    if spec == "echo":
        return echo_adapter
    module, _, attr = spec.partition(":")
    return getattr(importlib.import_module(module), attr or "adapter")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--stdio", action="store_true")
    g.add_argument("--socket")
    p.add_argument("--adapter", default="echo", help='"echo" or module:function')
    a = p.parse_args(argv)
    serve("stdio" if a.stdio else a.socket, load_adapter(a.adapter))


if __name__ == "__main__":
    main()
