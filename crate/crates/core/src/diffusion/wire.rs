//! Binary framing for out-of-process denoisers.
//!
//! Every frame is `magic (4 bytes) | u32 LE header_len | JSON header | payload`:
//!
//! * request `DNRQ`: header `{shape, t, prompt, cond_shape, camera_tag}`,
//!   payload `x_t` then `cond`, each `f32` LE planar `C x H x W`;
//! * response `DNRS`: header `{shape}`, payload `eps_hat`;
//! * error `DNER`: header `{message}`, no payload.
//!
//! One request is in flight per connection and responses arrive in order.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{DenoiseRequest, Denoiser, DiffusionError};
use crate::fmap::FloatImage;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

pub const REQUEST_MAGIC: &[u8; 4] = b"DNRQ";
pub const RESPONSE_MAGIC: &[u8; 4] = b"DNRS";
pub const ERROR_MAGIC: &[u8; 4] = b"DNER";

const MAX_HEADER_LEN: usize = 1 << 20;
const MAX_PAYLOAD_FLOATS: usize = 1 << 28;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestHeader {
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    pub t: f64,
    pub prompt: String,
    pub cond_shape: [usize; 3],
    pub camera_tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ResponseHeader {
    shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ErrorHeader {
    message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Frame {
    Request {
        header: RequestHeader,
        x_t: FloatImage,
        cond: FloatImage,
    },
    Response(FloatImage),
    Error(String),
}

fn chw(img: &FloatImage) -> [usize; 3] {
    [img.channels, img.height, img.width]
}

fn write_frame(w: &mut impl Write, magic: &[u8; 4], header: &impl Serialize, payloads: &[&FloatImage]) -> io::Result<()> {
    let header = serde_json::to_vec(header)?;
    w.write_all(magic)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for img in payloads {
        let bytes: Vec<u8> = img.to_planar().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    w.flush()
}

pub fn write_request(w: &mut impl Write, req: &DenoiseRequest) -> io::Result<()> {
    let header = RequestHeader {
        shape: chw(req.x_t),
        t: req.t,
        prompt: req.prompt.to_owned(),
        cond_shape: chw(req.cond),
        camera_tag: req.camera_tag.unwrap_or_default().to_owned(),
    };
    write_frame(w, REQUEST_MAGIC, &header, &[req.x_t, req.cond])
}

pub fn write_response(w: &mut impl Write, eps_hat: &FloatImage) -> io::Result<()> {
    write_frame(w, RESPONSE_MAGIC, &ResponseHeader { shape: chw(eps_hat) }, &[eps_hat])
}

pub fn write_error(w: &mut impl Write, message: &str) -> io::Result<()> {
    write_frame(w, ERROR_MAGIC, &ErrorHeader { message: message.to_owned() }, &[])
}

fn protocol(msg: impl Into<String>) -> DiffusionError {
    DiffusionError::Protocol(msg.into())
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), DiffusionError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => protocol(format!("truncated frame while reading {what}")),
        _ => DiffusionError::Io(e),
    })
}

fn read_payload(r: &mut impl Read, shape: [usize; 3]) -> Result<FloatImage, DiffusionError> {
    let [c, h, w] = shape;
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|&n| n <= MAX_PAYLOAD_FLOATS)
        .ok_or_else(|| protocol(format!("payload shape {shape:?} too large")))?;
    let mut bytes = vec![0u8; n * 4];
    read_exact_or_truncated(r, &mut bytes, "payload")?;
    let planar: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(FloatImage::from_planar(c, h, w, &planar))
}

fn parse_header<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, DiffusionError> {
    serde_json::from_slice(bytes).map_err(|e| protocol(format!("bad header: {e}")))
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any byte.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, DiffusionError> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut magic[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(protocol("truncated frame while reading magic")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let mut len = [0u8; 4];
    read_exact_or_truncated(r, &mut len, "header length")?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_HEADER_LEN {
        return Err(protocol(format!("header length {len} exceeds limit")));
    }
    let mut header = vec![0u8; len];
    read_exact_or_truncated(r, &mut header, "header")?;
    let frame = match &magic {
        REQUEST_MAGIC => {
            let header: RequestHeader = parse_header(&header)?;
            let x_t = read_payload(r, header.shape)?;
            let cond = read_payload(r, header.cond_shape)?;
            Frame::Request { header, x_t, cond }
        }
        RESPONSE_MAGIC => {
            let header: ResponseHeader = parse_header(&header)?;
            Frame::Response(read_payload(r, header.shape)?)
        }
        ERROR_MAGIC => Frame::Error(parse_header::<ErrorHeader>(&header)?.message),
        other => return Err(protocol(format!("bad magic {other:?}"))),
    };
    Ok(Some(frame))
}

/// Answers requests from `r` on `w` until the stream ends. Malformed
/// requests get an error frame and end the session.
pub fn serve(
    r: impl Read,
    w: impl Write,
    mut handler: impl FnMut(&RequestHeader, FloatImage, FloatImage) -> Result<FloatImage, String>,
) -> io::Result<()> {
    let (mut r, mut w) = (BufReader::new(r), BufWriter::new(w));
    loop {
        match read_frame(&mut r) {
            Ok(None) => return Ok(()),
            Ok(Some(Frame::Request { header, x_t, cond })) => match handler(&header, x_t, cond) {
                Ok(eps) => write_response(&mut w, &eps)?,
                Err(msg) => write_error(&mut w, &msg)?,
            },
            Ok(Some(_)) => return write_error(&mut w, "expected a request frame"),
            Err(e) => return write_error(&mut w, &e.to_string()),
        }
    }
}

/// Loopback handler: `eps_hat = x_t`.
pub fn echo(_: &RequestHeader, x_t: FloatImage, _: FloatImage) -> Result<FloatImage, String> {
    Ok(x_t)
}

/// Runs an echo server on an ephemeral local port, one thread per connection.
pub fn spawn_echo_server() -> io::Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let handle = thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            thread::spawn(move || {
                if let Ok(read) = stream.try_clone() {
                    let _ = serve(read, stream, echo);
                }
            });
        }
    });
    Ok((addr, handle))
}

type FrameResult = Result<Frame, DiffusionError>;

/// Client for a denoiser served over TCP or a child process's stdio.
pub struct RemoteDenoiser {
    writer: BufWriter<Box<dyn Write + Send>>,
    frames: Receiver<FrameResult>,
    child: Option<Child>,
    pub timeout: Duration,
}

fn spawn_reader(read: impl Read + Send + 'static) -> Receiver<FrameResult> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut r = BufReader::new(read);
        loop {
            let item = match read_frame(&mut r) {
                Ok(Some(f)) => Ok(f),
                Ok(None) => Err(protocol("denoiser closed the connection")),
                Err(e) => Err(e),
            };
            let stop = item.is_err();
            if tx.send(item).is_err() || stop {
                return;
            }
        }
    });
    rx
}

impl RemoteDenoiser {
    pub fn connect_tcp(addr: &str) -> Result<Self, DiffusionError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let read = stream.try_clone()?;
        Ok(Self {
            writer: BufWriter::new(Box::new(stream)),
            frames: spawn_reader(read),
            child: None,
            timeout: DEFAULT_TIMEOUT,
        })
    }

    /// Spawns `command` (whitespace-separated program and arguments) and
    /// talks to it over its stdin/stdout.
    pub fn spawn_stdio(command: &str) -> Result<Self, DiffusionError> {
        let mut parts = command.split_whitespace();
        let program = parts.next().ok_or_else(|| protocol("empty denoiser command"))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            writer: BufWriter::new(Box::new(stdin)),
            frames: spawn_reader(stdout),
            child: Some(child),
            timeout: DEFAULT_TIMEOUT,
        })
    }

    /// Parses `tcp:<addr>` or `stdio:<command>`.
    pub fn from_spec(spec: &str) -> Result<Self, DiffusionError> {
        if let Some(addr) = spec.strip_prefix("tcp:") {
            Self::connect_tcp(addr)
        } else if let Some(cmd) = spec.strip_prefix("stdio:") {
            Self::spawn_stdio(cmd)
        } else {
            Err(protocol(format!("unknown endpoint {spec:?}")))
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl Denoiser for RemoteDenoiser {
    fn predict(&mut self, req: &DenoiseRequest) -> Result<FloatImage, DiffusionError> {
        write_request(&mut self.writer, req)?;
        let frame = match self.frames.recv_timeout(self.timeout) {
            Ok(f) => f?,
            Err(RecvTimeoutError::Timeout) => return Err(DiffusionError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => return Err(protocol("denoiser connection lost")),
        };
        match frame {
            Frame::Response(eps) => {
                super::check_shape(req.x_t.shape(), eps.shape())?;
                Ok(eps)
            }
            Frame::Error(msg) => Err(DiffusionError::Remote(msg)),
            Frame::Request { .. } => Err(protocol("unexpected request frame from denoiser")),
        }
    }
}

impl Drop for RemoteDenoiser {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
