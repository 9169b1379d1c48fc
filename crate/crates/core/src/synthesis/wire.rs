//! Out-of-process generator protocol.
//!
//! The client writes one JSON request per line:
//!
//! ```text
//! {"op":"capabilities"}
//! {"op":"generate","prompt":"...","seed":42}
//! ```
//!
//! and the server answers each with one binary frame. All integers are
//! little-endian `u32`, all reals little-endian `f32`:
//!
//! ```text
//! magic   "FCAT"
//! kind    u8: b'C' capabilities | b'G' generation | b'E' error
//! C, E:   len, len bytes of UTF-8 (capabilities JSON / error message)
//! G:      L, H, S_text, p_h, p_w
//!         L block ids
//!         width, height, width*height*3 bytes RGB8, row-major
//!         n_spans, then per span: start, end, len, len bytes UTF-8 word
//!         L*H*S_text*p_h*p_w attention values ordered (layer, head, token,
//!         patch), patch = row * p_w + col
//! ```

use std::io::{self, BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use image::RgbImage;
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::{AttentionStack, Generation, GeneratorBackend, GeneratorCapabilities, WordSpan};
use crate::error::BackendError;

pub const MAGIC: &[u8; 4] = b"FCAT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Capabilities,
    Generate { prompt: String, seed: u64 },
}

#[derive(Debug)]
pub enum Frame {
    Capabilities(GeneratorCapabilities),
    Generation(Generation),
    Error(String),
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len());
    out.extend_from_slice(bytes);
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    match frame {
        Frame::Capabilities(caps) => {
            out.push(b'C');
            put_bytes(
                &mut out,
                &serde_json::to_vec(caps).expect("capabilities serialize"),
            );
        }
        Frame::Error(msg) => {
            out.push(b'E');
            put_bytes(&mut out, msg.as_bytes());
        }
        Frame::Generation(g) => {
            out.push(b'G');
            let stack = &g.attention;
            let (l, h, text, _) = stack.values().dim();
            let (ph, pw) = stack.grid();
            for v in [l, h, text, ph, pw] {
                put_u32(&mut out, v);
            }
            for &id in stack.layers() {
                put_u32(&mut out, id as usize);
            }
            put_u32(&mut out, g.image.width() as usize);
            put_u32(&mut out, g.image.height() as usize);
            out.extend_from_slice(g.image.as_raw());
            put_u32(&mut out, g.token_spans.len());
            for span in &g.token_spans {
                put_u32(&mut out, span.start);
                put_u32(&mut out, span.end);
                put_bytes(&mut out, span.word.as_bytes());
            }
            for v in stack.values().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_vec<R: Read>(r: &mut R, len: usize) -> io::Result<Vec<u8>> {
    // Refuse absurd lengths instead of allocating them.
    if len > 1 << 30 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "frame field too large",
        ));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn invalid(msg: impl ToString) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

pub fn decode_frame<R: Read>(r: &mut R) -> io::Result<Frame> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid("bad frame magic"));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    match kind[0] {
        b'C' => {
            let len = read_u32(r)?;
            let caps = serde_json::from_slice(&read_vec(r, len)?).map_err(invalid)?;
            Ok(Frame::Capabilities(caps))
        }
        b'E' => {
            let len = read_u32(r)?;
            Ok(Frame::Error(
                String::from_utf8_lossy(&read_vec(r, len)?).into_owned(),
            ))
        }
        b'G' => {
            let (l, h, text, ph, pw) = (
                read_u32(r)?,
                read_u32(r)?,
                read_u32(r)?,
                read_u32(r)?,
                read_u32(r)?,
            );
            let layers = (0..l)
                .map(|_| read_u32(r).map(|v| v as u32))
                .collect::<io::Result<Vec<_>>>()?;
            let (w, hgt) = (read_u32(r)?, read_u32(r)?);
            let pixels = read_vec(r, w * hgt * 3)?;
            let image = RgbImage::from_raw(w as u32, hgt as u32, pixels)
                .ok_or_else(|| invalid("image buffer size mismatch"))?;
            let n_spans = read_u32(r)?;
            let mut token_spans = Vec::with_capacity(n_spans.min(4096));
            for _ in 0..n_spans {
                let (start, end) = (read_u32(r)?, read_u32(r)?);
                let len = read_u32(r)?;
                let word = String::from_utf8(read_vec(r, len)?).map_err(invalid)?;
                token_spans.push(WordSpan { word, start, end });
            }
            let n = l * h * text * ph * pw;
            let raw = read_vec(r, n * 4)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let values = Array4::from_shape_vec((l, h, text, ph * pw), values).map_err(invalid)?;
            let attention = AttentionStack::new(values, layers, (ph, pw)).map_err(invalid)?;
            Ok(Frame::Generation(Generation {
                image,
                attention,
                token_spans,
            }))
        }
        other => Err(invalid(format!("unknown frame kind {other:#x}"))),
    }
}

/// Answers requests from `input` with frames on `output` until `input` ends.
pub fn serve<R: BufRead, W: Write>(
    backend: &dyn GeneratorBackend,
    input: R,
    mut output: W,
) -> io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame = match serde_json::from_str::<Request>(&line) {
            Ok(Request::Capabilities) => Frame::Capabilities(backend.capabilities()),
            Ok(Request::Generate { prompt, seed }) => match backend.generate(&prompt, seed) {
                Ok(g) => Frame::Generation(g),
                Err(e) => Frame::Error(e.to_string()),
            },
            Err(e) => Frame::Error(format!("bad request: {e}")),
        };
        output.write_all(&encode_frame(&frame))?;
        output.flush()?;
    }
    Ok(())
}

/// Client half of the protocol over any reader/writer pair. Calls are
/// serialized.
pub struct StreamGenerator<R, W> {
    name: String,
    io: Mutex<(BufReader<R>, W)>,
    caps: GeneratorCapabilities,
}

impl<R: Read + Send, W: Write + Send> StreamGenerator<R, W> {
    /// Connects and fetches the server's capabilities.
    pub fn connect(name: impl Into<String>, reader: R, writer: W) -> Result<Self, BackendError> {
        let name = name.into();
        let mut io = (BufReader::new(reader), writer);
        let caps = match exchange(&name, &mut io, &Request::Capabilities)? {
            Frame::Capabilities(mut caps) => {
                caps.concurrent = false;
                caps
            }
            Frame::Error(e) => return Err(BackendError::failed(&name, e)),
            Frame::Generation(_) => {
                return Err(BackendError::failed(&name, "expected a capabilities frame"))
            }
        };
        Ok(Self {
            name,
            io: Mutex::new(io),
            caps,
        })
    }
}

fn exchange<R: Read, W: Write>(
    name: &str,
    io: &mut (BufReader<R>, W),
    req: &Request,
) -> Result<Frame, BackendError> {
    let mut line = serde_json::to_string(req).expect("request serializes");
    line.push('\n');
    io.1.write_all(line.as_bytes())
        .and_then(|_| io.1.flush())
        .map_err(|e| BackendError::transport(name, e))?;
    decode_frame(&mut io.0).map_err(|e| match e.kind() {
        io::ErrorKind::InvalidData => BackendError::failed(name, e),
        _ => BackendError::transport(name, e),
    })
}

impl<R: Read + Send, W: Write + Send> GeneratorBackend for StreamGenerator<R, W> {
    fn capabilities(&self) -> GeneratorCapabilities {
        self.caps.clone()
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<Generation, BackendError> {
        let mut io = self
            .io
            .lock()
            .map_err(|_| BackendError::transport(&self.name, "connection poisoned"))?;
        let req = Request::Generate {
            prompt: prompt.to_string(),
            seed,
        };
        match exchange(&self.name, &mut io, &req)? {
            Frame::Generation(g) => Ok(g),
            Frame::Error(e) => Err(BackendError::failed(&self.name, e)),
            Frame::Capabilities(_) => Err(BackendError::failed(
                &self.name,
                "unexpected capabilities frame",
            )),
        }
    }
}

/// Generator served by a child process over its stdin/stdout.
pub struct ProcessGenerator {
    child: Child,
    inner: StreamGenerator<ChildStdout, ChildStdin>,
}

impl ProcessGenerator {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, BackendError> {
        let name = format!("process-generator({program})");
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::transport(&name, e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let inner = StreamGenerator::connect(name, stdout, stdin)?;
        Ok(Self { child, inner })
    }
}

impl GeneratorBackend for ProcessGenerator {
    fn capabilities(&self) -> GeneratorCapabilities {
        self.inner.capabilities()
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<Generation, BackendError> {
        self.inner.generate(prompt, seed)
    }
}

impl Drop for ProcessGenerator {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
