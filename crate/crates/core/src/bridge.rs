//! S4DB wire protocol for out-of-process inpainters and depth providers.
//!
//! Every message is a 20-byte frame header followed by a payload:
//!
//! ```text
//! "S4DB" | u32 version | u32 type | u64 payload_len | payload
//! payload = u32 header_len | header JSON | f32 tensors (little-endian)
//! ```
//!
//! Tensors appear in the order listed by the header's `tensors` array. The
//! full layout is in `docs/protocol.md`.

use std::io::{self, Read, Write};
use std::os::unix::net::UnixStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraJson, CameraModel};
use crate::inpaint::{InpaintError, InpaintRequest, InpaintResponse, Inpainter};
use crate::raster::{DepthFrame, ImageFrame, Mask};
use crate::warp::WarpResult;

pub const MAGIC: &[u8; 4] = b"S4DB";
pub const PROTOCOL_VERSION: u32 = 1;
/// Upper bound on a payload; anything larger is rejected before allocation.
pub const MAX_PAYLOAD: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown message type {0}")]
    BadType(u32),
    #[error("payload of {0} bytes exceeds the limit")]
    TooLarge(u64),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("remote error: {0}")]
    Remote(String),
    #[error("connection closed")]
    Closed,
    #[error("bad endpoint {0:?}")]
    BadEndpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum MessageKind {
    Request = 1,
    Response = 2,
    Error = 3,
}

impl MessageKind {
    fn from_u32(v: u32) -> Result<Self, BridgeError> {
        match v {
            1 => Ok(Self::Request),
            2 => Ok(Self::Response),
            3 => Ok(Self::Error),
            _ => Err(BridgeError::BadType(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<Self, BridgeError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(BridgeError::Malformed(format!(
                "tensor {name}: shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            name: name.to_string(),
            shape,
            data,
        })
    }
}

/// A decoded message. `header` carries everything except the tensor list,
/// which is rebuilt from `tensors` on encode.
#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub version: u32,
    pub kind: MessageKind,
    pub header: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<Tensor>,
}

impl WireMessage {
    pub fn new(kind: MessageKind, header: serde_json::Map<String, serde_json::Value>, tensors: Vec<Tensor>) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            kind,
            header,
            tensors,
        }
    }

    pub fn error(message: &str) -> Self {
        let mut h = serde_json::Map::new();
        h.insert("error".into(), message.into());
        Self::new(MessageKind::Error, h, vec![])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, BridgeError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| BridgeError::Malformed(format!("missing tensor {name:?}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>, BridgeError> {
        let mut header = self.header.clone();
        let specs: Vec<TensorSpec> = self
            .tensors
            .iter()
            .map(|t| TensorSpec {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect();
        header.insert("tensors".into(), serde_json::to_value(specs).expect("plain data"));
        let hjson = serde_json::to_vec(&header).map_err(|e| BridgeError::Malformed(e.to_string()))?;
        let body: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let payload = 4 + hjson.len() + body;
        let mut out = Vec::with_capacity(20 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(payload as u64).to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&hjson);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses one complete payload that followed a frame header.
    pub fn decode_payload(version: u32, kind: MessageKind, payload: &[u8]) -> Result<Self, BridgeError> {
        if payload.len() < 4 {
            return Err(BridgeError::Malformed("payload shorter than its header length".into()));
        }
        let hlen = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
        if hlen > payload.len() - 4 {
            return Err(BridgeError::Malformed(format!("header length {hlen} exceeds payload")));
        }
        let mut header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&payload[4..4 + hlen]).map_err(|e| BridgeError::Malformed(format!("header: {e}")))?;
        let specs: Vec<TensorSpec> = match header.remove("tensors") {
            Some(v) => serde_json::from_value(v).map_err(|e| BridgeError::Malformed(format!("tensors: {e}")))?,
            None => vec![],
        };
        let mut body = &payload[4 + hlen..];
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let n = s
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| BridgeError::Malformed(format!("tensor {} too large", s.name)))?;
            if n > body.len() {
                return Err(BridgeError::Malformed(format!("tensor {} truncated", s.name)));
            }
            let data = body[..n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            body = &body[n..];
            tensors.push(Tensor {
                name: s.name,
                shape: s.shape,
                data,
            });
        }
        if !body.is_empty() {
            return Err(BridgeError::Malformed(format!("{} trailing payload bytes", body.len())));
        }
        Ok(Self {
            version,
            kind,
            header,
            tensors,
        })
    }
}

fn read_exact_or_closed<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), BridgeError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            BridgeError::Closed
        } else {
            BridgeError::Io(e)
        }
    })
}

pub fn read_message<R: Read>(r: &mut R) -> Result<WireMessage, BridgeError> {
    let mut head = [0u8; 20];
    read_exact_or_closed(r, &mut head)?;
    let magic: [u8; 4] = head[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(BridgeError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != PROTOCOL_VERSION {
        return Err(BridgeError::UnsupportedVersion(version));
    }
    let kind = MessageKind::from_u32(u32::from_le_bytes(head[8..12].try_into().unwrap()))?;
    let len = u64::from_le_bytes(head[12..20].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(BridgeError::TooLarge(len));
    }
    let mut payload = vec![0u8; len as usize];
    read_exact_or_closed(r, &mut payload).map_err(|e| match e {
        BridgeError::Closed => BridgeError::Malformed("payload truncated".into()),
        e => e,
    })?;
    WireMessage::decode_payload(version, kind, &payload)
}

pub fn write_message<W: Write>(w: &mut W, msg: &WireMessage) -> Result<(), BridgeError> {
    w.write_all(&msg.encode()?)?;
    w.flush()?;
    Ok(())
}

/// Client side: send our version and require the server to accept it.
pub fn client_handshake<S: Read + Write>(s: &mut S) -> Result<u32, BridgeError> {
    let mut hello = Vec::with_capacity(8);
    hello.extend_from_slice(MAGIC);
    hello.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    s.write_all(&hello)?;
    s.flush()?;
    let mut reply = [0u8; 8];
    read_exact_or_closed(s, &mut reply)?;
    let magic: [u8; 4] = reply[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(BridgeError::BadMagic(magic));
    }
    let v = u32::from_le_bytes(reply[4..].try_into().unwrap());
    if v != PROTOCOL_VERSION {
        return Err(BridgeError::UnsupportedVersion(v));
    }
    Ok(v)
}

/// Server side: read the client's version and reply with the accepted one
/// (0 when the client's version is not supported).
pub fn server_handshake<S: Read + Write>(s: &mut S) -> Result<u32, BridgeError> {
    let mut hello = [0u8; 8];
    read_exact_or_closed(s, &mut hello)?;
    let magic: [u8; 4] = hello[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(BridgeError::BadMagic(magic));
    }
    let v = u32::from_le_bytes(hello[4..].try_into().unwrap());
    let accepted = if v == PROTOCOL_VERSION { v } else { 0 };
    s.write_all(MAGIC)?;
    s.write_all(&accepted.to_le_bytes())?;
    s.flush()?;
    if accepted == 0 {
        return Err(BridgeError::UnsupportedVersion(v));
    }
    Ok(accepted)
}

/// Serves one connection until the peer closes it. Adapter failures are
/// reported as error messages and the loop continues; protocol violations
/// are answered with an error message and end the connection.
pub fn serve<S, F>(mut stream: S, mut adapter: F) -> Result<(), BridgeError>
where
    S: Read + Write,
    F: FnMut(&WireMessage) -> Result<WireMessage, String>,
{
    server_handshake(&mut stream)?;
    loop {
        let msg = match read_message(&mut stream) {
            Ok(m) => m,
            Err(BridgeError::Closed) => return Ok(()),
            Err(e) => {
                let _ = write_message(&mut stream, &WireMessage::error(&e.to_string()));
                return Err(e);
            }
        };
        let reply = if msg.kind != MessageKind::Request {
            WireMessage::error("expected a request")
        } else {
            adapter(&msg).unwrap_or_else(|e| WireMessage::error(&e))
        };
        write_message(&mut stream, &reply)?;
    }
}

/// Echo adapter: returns the `warped` tensor as `frames`.
pub fn echo_adapter(msg: &WireMessage) -> Result<WireMessage, String> {
    let t = msg.tensor("warped").map_err(|e| e.to_string())?;
    Ok(WireMessage::new(
        MessageKind::Response,
        serde_json::Map::new(),
        vec![Tensor {
            name: "frames".into(),
            ..t.clone()
        }],
    ))
}

trait Transport: Read + Write + Send {}
impl<T: Read + Write + Send> Transport for T {}

struct ChildIo {
    child: Child,
    stdin: ChildStdin,
    stdout: ChildStdout,
}

impl Read for ChildIo {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.stdout.read(buf)
    }
}

impl Write for ChildIo {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.stdin.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.stdin.flush()
    }
}

impl Drop for ChildIo {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A connected, handshaken client.
pub struct BridgeClient {
    endpoint: String,
    io: Box<dyn Transport>,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient").field("endpoint", &self.endpoint).finish()
    }
}

impl BridgeClient {
    /// `unix:<path>` or a bare path connects to a socket; `exec:<cmd …>`
    /// spawns a process speaking the protocol on stdin/stdout; `echo` runs
    /// the echo adapter on an in-process thread.
    pub fn connect(endpoint: &str) -> Result<Self, BridgeError> {
        let io: Box<dyn Transport> = if endpoint == "echo" {
            let (client, server) = UnixStream::pair()?;
            std::thread::spawn(move || serve(server, echo_adapter));
            Box::new(client)
        } else if let Some(cmd) = endpoint.strip_prefix("exec:") {
            let mut parts = cmd.split_whitespace();
            let prog = parts.next().ok_or_else(|| BridgeError::BadEndpoint(endpoint.into()))?;
            let mut child = Command::new(prog)
                .args(parts)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()?;
            let stdin = child.stdin.take().expect("piped");
            let stdout = child.stdout.take().expect("piped");
            Box::new(ChildIo { child, stdin, stdout })
        } else {
            let path = endpoint.strip_prefix("unix:").unwrap_or(endpoint);
            if path.is_empty() {
                return Err(BridgeError::BadEndpoint(endpoint.into()));
            }
            Box::new(UnixStream::connect(path)?)
        };
        Self::from_transport(endpoint, io)
    }

    fn from_transport(endpoint: &str, mut io: Box<dyn Transport>) -> Result<Self, BridgeError> {
        client_handshake(&mut io)?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            io,
        })
    }

    /// Wraps any connected stream (used by tests with socket pairs).
    pub fn over<S: Read + Write + Send + 'static>(endpoint: &str, stream: S) -> Result<Self, BridgeError> {
        Self::from_transport(endpoint, Box::new(stream))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn call(&mut self, msg: &WireMessage) -> Result<WireMessage, BridgeError> {
        write_message(&mut self.io, msg)?;
        let reply = read_message(&mut self.io)?;
        match reply.kind {
            MessageKind::Response => Ok(reply),
            MessageKind::Error => Err(BridgeError::Remote(
                reply
                    .header
                    .get("error")
                    .and_then(|v| v.as_str())
                    .unwrap_or("unspecified")
                    .to_string(),
            )),
            MessageKind::Request => Err(BridgeError::Malformed("server sent a request".into())),
        }
    }
}

fn image_tensor(name: &str, frames: &[ImageFrame]) -> Tensor {
    let f = &frames[0];
    let data = frames.iter().flat_map(|im| im.data.iter().map(|v| *v as f32)).collect();
    Tensor {
        name: name.into(),
        shape: vec![frames.len(), f.height, f.width, f.channels],
        data,
    }
}

fn mask_tensor(masks: &[&Mask]) -> Tensor {
    let m = masks[0];
    let data = masks
        .iter()
        .flat_map(|m| m.data.iter().map(|b| if *b { 1.0f32 } else { 0.0 }))
        .collect();
    Tensor {
        name: "mask".into(),
        shape: vec![masks.len(), m.height, m.width],
        data,
    }
}

/// Builds the request message for an inpainting or depth call.
pub fn request_message(op: &str, req: &InpaintRequest, images: &[ImageFrame]) -> WireMessage {
    let mut h = serde_json::Map::new();
    h.insert("op".into(), op.into());
    h.insert("frame_indices".into(), serde_json::to_value(&req.frame_indices).unwrap());
    h.insert("seed".into(), req.rng_seed.into());
    let cams: Vec<CameraJson> = req.cameras.iter().map(CameraJson::from).collect();
    h.insert("cameras".into(), serde_json::to_value(cams).unwrap());
    let warped: Vec<ImageFrame> = req.warped.iter().map(|w| w.image.clone()).collect();
    let masks: Vec<&Mask> = req.warped.iter().map(|w| &w.mask).collect();
    let mut tensors = vec![image_tensor("warped", &warped), mask_tensor(&masks)];
    tensors.push(image_tensor(if op == "depth" { "frames" } else { "source" }, images));
    WireMessage::new(MessageKind::Request, h, tensors)
}

fn expect_shape(t: &Tensor, want: &[usize]) -> Result<(), BridgeError> {
    if t.shape != want {
        return Err(BridgeError::Malformed(format!(
            "tensor {} has shape {:?}, expected {:?}",
            t.name, t.shape, want
        )));
    }
    Ok(())
}

/// Inpainter served by an external process.
#[derive(Debug)]
pub struct BridgeInpainter {
    client: BridgeClient,
}

impl BridgeInpainter {
    pub fn new(client: BridgeClient) -> Self {
        Self { client }
    }

    pub fn connect(endpoint: &str) -> Result<Self, BridgeError> {
        Ok(Self::new(BridgeClient::connect(endpoint)?))
    }
}

impl Inpainter for BridgeInpainter {
    fn name(&self) -> String {
        format!("bridge:{}", self.client.endpoint())
    }

    fn inpaint(&mut self, req: &InpaintRequest) -> Result<InpaintResponse, InpaintError> {
        req.validate()?;
        let to_err = |e: BridgeError| InpaintError::Bridge(e.to_string());
        let reply = self
            .client
            .call(&request_message("inpaint", req, &req.source_frames))
            .map_err(to_err)?;
        let first = &req.warped[0].image;
        let t = reply.tensor("frames").map_err(to_err)?;
        expect_shape(t, &[req.warped.len(), first.height, first.width, first.channels]).map_err(to_err)?;
        let per = first.height * first.width * first.channels;
        let frames = t
            .data
            .chunks_exact(per)
            .map(|c| {
                let data = c.iter().map(|v| (*v as f64).clamp(0.0, 1.0)).collect();
                ImageFrame::new(first.width, first.height, first.channels, data)
                    .map_err(|e| InpaintError::Bridge(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(InpaintResponse { frames })
    }
}

/// Asks the bridge for depth maps of freshly inpainted frames.
pub fn bridge_depth(
    client: &mut BridgeClient,
    frames: &[ImageFrame],
    warped: &[WarpResult],
    cameras: &[CameraModel],
    frame_indices: &[usize],
) -> Result<Vec<DepthFrame>, BridgeError> {
    let req = InpaintRequest {
        warped: warped.to_vec(),
        source_frames: frames.to_vec(),
        frame_indices: frame_indices.to_vec(),
        cameras: cameras.to_vec(),
        rng_seed: 0,
    };
    let reply = client.call(&request_message("depth", &req, frames))?;
    let f = &frames[0];
    let t = reply.tensor("depth")?;
    expect_shape(t, &[frames.len(), f.height, f.width])?;
    t.data
        .chunks_exact(f.width * f.height)
        .map(|c| {
            DepthFrame::from_values(f.width, f.height, c.iter().map(|v| *v as f64).collect())
                .map_err(|e| BridgeError::Malformed(e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_msg() -> WireMessage {
        let mut h = serde_json::Map::new();
        h.insert("op".into(), "inpaint".into());
        WireMessage::new(
            MessageKind::Request,
            h,
            vec![
                Tensor::new("warped", vec![2, 2, 3], (0..12).map(|i| i as f32 * 0.1).collect()).unwrap(),
                Tensor::new("mask", vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap(),
            ],
        )
    }

    #[test]
    fn encode_decode_round_trip_is_byte_identical() {
        let msg = sample_msg();
        let bytes = msg.encode().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize, bytes.len() - 20);
        let back = read_message(&mut &bytes[..]).unwrap();
        assert_eq!(back, msg);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn rejects_malformed() {
        let bytes = sample_msg().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_message(&mut &bad[..]), Err(BridgeError::BadMagic(_))));
        for cut in [0, 10, 20, 30, bytes.len() - 1] {
            assert!(read_message(&mut &bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut big = bytes.clone();
        big[12..20].copy_from_slice(&(MAX_PAYLOAD + 1).to_le_bytes());
        assert!(matches!(read_message(&mut &big[..]), Err(BridgeError::TooLarge(_))));
        let mut ver = bytes.clone();
        ver[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(read_message(&mut &ver[..]), Err(BridgeError::UnsupportedVersion(7))));
        let mut ty = bytes.clone();
        ty[8..12].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(read_message(&mut &ty[..]), Err(BridgeError::BadType(9))));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        let n = u64::from_le_bytes(extra[12..20].try_into().unwrap()) + 4;
        extra[12..20].copy_from_slice(&n.to_le_bytes());
        assert!(matches!(read_message(&mut &extra[..]), Err(BridgeError::Malformed(_))));
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new("x", vec![2, 3], vec![0.0; 5]).is_err());
    }
}
