import io
import struct
import unittest
from array import array

import s4db_bridge as b


class Pipe:
    """In-memory duplex: reads from `inp`, collects writes."""

    def __init__(self, data):
        self.inp = io.BytesIO(data)
        self.out = io.BytesIO()
        self.read = self.inp.read
        self.write = self.out.write

    def flush(self):
        pass


def hello():
    return b.MAGIC + struct.pack("<I", b.VERSION)


def request(n=2, h=3, w=4):
    shape = (n, h, w, 3)
    data = array("f", [i * 0.01 for i in range(n * h * w * 3)])
    mask = array("f", [1.0] * (n * h * w))
    return b.Message(b.REQUEST, {"op": "inpaint", "seed": 7}, {"warped": (shape, data), "mask": ((n, h, w), mask)})


def replies(raw):
    s = io.BytesIO(raw[8:])
    out = []
    while True:
        try:
            out.append(b.read_message(s))
        except b.Closed:
            return out


class ProtocolTest(unittest.TestCase):
    def test_encode_decode_encode_is_identical(self):
        raw = b.encode(request())
        again = b.encode(b.read_message(io.BytesIO(raw)))
        self.assertEqual(raw, again)

    def test_echo_is_bit_exact(self):
        req = request(16, 64, 64)
        pipe = Pipe(hello() + b.encode(req))
        b.serve_stream(pipe, b.echo_adapter)
        raw = pipe.out.getvalue()
        self.assertEqual(raw[:8], hello())
        (resp,) = replies(raw)
        self.assertEqual(resp.kind, b.RESPONSE)
        self.assertEqual(resp.tensor("frames"), req.tensor("warped"))

    def test_adapter_failure_continues(self):
        def boom(msg):
            raise RuntimeError("nope")

        pipe = Pipe(hello() + b.encode(request()) * 2)
        b.serve_stream(pipe, boom)
        rs = replies(pipe.out.getvalue())
        self.assertEqual([r.kind for r in rs], [b.ERROR, b.ERROR])
        self.assertIn("nope", rs[0].header["error"])

    def test_malformed_inputs_close_with_error(self):
        good = b.encode(request())
        cases = [
            b"XXXX" + good[4:],
            good[:4] + struct.pack("<I", 9) + good[8:],
            good[:8] + struct.pack("<I", 42) + good[12:],
            good[:12] + struct.pack("<Q", b.MAX_PAYLOAD + 1) + good[20:],
            good[:20] + struct.pack("<I", 10**6) + good[24:],
        ]
        for bad in cases:
            pipe = Pipe(hello() + bad + good)
            b.serve_stream(pipe, b.echo_adapter)
            rs = replies(pipe.out.getvalue())
            self.assertEqual([r.kind for r in rs], [b.ERROR], bad[:24])
        # Truncation is only detectable at end of stream.
        pipe = Pipe(hello() + good[:-3])
        b.serve_stream(pipe, b.echo_adapter)
        self.assertEqual([r.kind for r in replies(pipe.out.getvalue())], [b.ERROR])

    def test_version_rejected(self):
        pipe = Pipe(b.MAGIC + struct.pack("<I", 2))
        with self.assertRaises(b.ProtocolError):
            b.serve_stream(pipe, b.echo_adapter)
        self.assertEqual(pipe.out.getvalue(), b.MAGIC + struct.pack("<I", 0))


if __name__ == "__main__":
    unittest.main()
