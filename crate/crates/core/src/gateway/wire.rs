//! Length-prefixed binary protocol for out-of-process detectors and
//! mask/box providers.
//!
//! Frame: `u32` little-endian length of the rest, then `u16` protocol
//! version, `u8` message type, body. Reals travel as little-endian `f64`,
//! images as `u32 h, u32 w` followed by `h·w·3` values.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use super::{AdapterManifest, Detector, GatewayError, PROTOCOL_VERSION};
use crate::model::{BoundingBox, ClassLabel, Detection, ImagePlane, MaskMap, Tensor3};

const MAX_FRAME: u32 = 1 << 30;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(AdapterManifest),
    DetectRequest(ImagePlane),
    DetectResponse(Vec<Detection>),
    ScoreRequest { image: ImagePlane, want_grad: bool },
    ScoreResponse { score: f64, grad: Option<Tensor3> },
    MaskRequest(ImagePlane),
    MaskResponse(MaskMap),
    BoxesRequest(ImagePlane),
    BoxesResponse(Vec<BoundingBox>),
    Error(String),
    Shutdown,
}

impl Message {
    fn tag(&self) -> u8 {
        match self {
            Self::Hello(_) => 1,
            Self::DetectRequest(_) => 2,
            Self::DetectResponse(_) => 3,
            Self::ScoreRequest { .. } => 4,
            Self::ScoreResponse { .. } => 5,
            Self::MaskRequest(_) => 6,
            Self::MaskResponse(_) => 7,
            Self::BoxesRequest(_) => 8,
            Self::BoxesResponse(_) => 9,
            Self::Error(_) => 10,
            Self::Shutdown => 11,
        }
    }
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(b: &mut Vec<u8>, v: f64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_values(b: &mut Vec<u8>, h: usize, w: usize, values: &[f64]) {
    put_u32(b, h as u32);
    put_u32(b, w as u32);
    for &v in values {
        put_f64(b, v);
    }
}

fn put_box(b: &mut Vec<u8>, x: &BoundingBox) {
    for v in [x.x_min, x.y_min, x.x_max, x.y_max] {
        put_f64(b, v);
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn protocol(msg: impl Into<String>) -> GatewayError {
    GatewayError::Protocol(msg.into())
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GatewayError> {
        if self.pos + n > self.buf.len() {
            return Err(protocol("truncated message body"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, GatewayError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, GatewayError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, GatewayError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn values(&mut self, channels: usize) -> Result<(usize, usize, Vec<f64>), GatewayError> {
        let h = self.u32()? as usize;
        let w = self.u32()? as usize;
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(channels))
            .filter(|&n| n * 8 <= self.buf.len() - self.pos)
            .ok_or_else(|| protocol("value block exceeds message"))?;
        let vals = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Ok((h, w, vals))
    }

    fn image(&mut self) -> Result<ImagePlane, GatewayError> {
        let (h, w, v) = self.values(3)?;
        Ok(ImagePlane::new(h, w, v)?)
    }

    fn bbox(&mut self) -> Result<BoundingBox, GatewayError> {
        Ok(BoundingBox {
            x_min: self.f64()?,
            y_min: self.f64()?,
            x_max: self.f64()?,
            y_max: self.f64()?,
        })
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn finish(&self) -> Result<(), GatewayError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(protocol("trailing bytes in message"))
        }
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut body = Vec::new();
    match msg {
        Message::Hello(m) => body.extend(serde_json::to_vec(m).expect("manifest serializes")),
        Message::DetectRequest(img) | Message::MaskRequest(img) | Message::BoxesRequest(img) => {
            put_values(&mut body, img.height(), img.width(), img.data())
        }
        Message::DetectResponse(dets) => {
            put_u32(&mut body, dets.len() as u32);
            for d in dets {
                put_box(&mut body, &d.bbox);
                body.push(d.class.index() as u8);
                put_f64(&mut body, d.confidence);
            }
        }
        Message::ScoreRequest { image, want_grad } => {
            body.push(*want_grad as u8);
            put_values(&mut body, image.height(), image.width(), image.data());
        }
        Message::ScoreResponse { score, grad } => {
            put_f64(&mut body, *score);
            match grad {
                Some(g) => {
                    body.push(1);
                    put_values(&mut body, g.height(), g.width(), g.data());
                }
                None => body.push(0),
            }
        }
        Message::MaskResponse(m) => put_values(&mut body, m.height(), m.width(), m.values()),
        Message::BoxesResponse(boxes) => {
            put_u32(&mut body, boxes.len() as u32);
            for b in boxes {
                put_box(&mut body, b);
            }
        }
        Message::Error(e) => body.extend_from_slice(e.as_bytes()),
        Message::Shutdown => {}
    }
    let mut frame = Vec::with_capacity(body.len() + 7);
    put_u32(&mut frame, (body.len() + 3) as u32);
    frame.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    frame.push(msg.tag());
    frame.extend(body);
    frame
}

pub fn decode(tag: u8, body: &[u8]) -> Result<Message, GatewayError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let msg = match tag {
        1 => Message::Hello(serde_json::from_slice(c.rest()).map_err(|e| protocol(format!("bad manifest: {e}")))?),
        2 => Message::DetectRequest(c.image()?),
        3 => {
            let n = c.u32()? as usize;
            let mut dets = Vec::with_capacity(n.min(4096));
            for _ in 0..n {
                let bbox = c.bbox()?;
                let class = ClassLabel::from_index(c.u8()? as usize).ok_or_else(|| protocol("bad class index"))?;
                let confidence = c.f64()?;
                dets.push(Detection { bbox, class, confidence });
            }
            Message::DetectResponse(dets)
        }
        4 => {
            let want_grad = c.u8()? != 0;
            Message::ScoreRequest {
                want_grad,
                image: c.image()?,
            }
        }
        5 => {
            let score = c.f64()?;
            let grad = match c.u8()? {
                0 => None,
                _ => {
                    let (h, w, v) = c.values(3)?;
                    Some(Tensor3::new(h, w, 3, v)?)
                }
            };
            Message::ScoreResponse { score, grad }
        }
        6 => Message::MaskRequest(c.image()?),
        7 => {
            let (h, w, v) = c.values(1)?;
            Message::MaskResponse(MaskMap::new(h, w, v)?)
        }
        8 => Message::BoxesRequest(c.image()?),
        9 => {
            let n = c.u32()? as usize;
            let boxes = (0..n).map(|_| c.bbox()).collect::<Result<Vec<_>, _>>()?;
            Message::BoxesResponse(boxes)
        }
        10 => Message::Error(String::from_utf8_lossy(c.rest()).into_owned()),
        11 => Message::Shutdown,
        t => return Err(protocol(format!("unknown message type {t}"))),
    };
    c.finish()?;
    Ok(msg)
}

pub fn write_message(w: &mut dyn Write, msg: &Message) -> Result<(), GatewayError> {
    w.write_all(&encode(msg))?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_message(r: &mut dyn Read) -> Result<Option<Message>, GatewayError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len);
    if !(3..=MAX_FRAME).contains(&len) {
        return Err(protocol(format!("bad frame length {len}")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    let version = u16::from_le_bytes([buf[0], buf[1]]);
    if version != PROTOCOL_VERSION {
        return Err(protocol(format!(
            "protocol version {version}, expected {PROTOCOL_VERSION}"
        )));
    }
    decode(buf[2], &buf[3..]).map(Some)
}

/// Server side of the protocol.
pub trait Service {
    fn manifest(&self) -> AdapterManifest;

    fn detect(&mut self, image: &ImagePlane) -> Result<Vec<Detection>, String> {
        let _ = image;
        Err("detect unsupported".into())
    }

    fn score(&mut self, image: &ImagePlane, want_grad: bool) -> Result<(f64, Option<Tensor3>), String> {
        let _ = (image, want_grad);
        Err("score unsupported".into())
    }

    fn mask(&mut self, image: &ImagePlane) -> Result<MaskMap, String> {
        let _ = image;
        Err("mask unsupported".into())
    }

    fn boxes(&mut self, image: &ImagePlane) -> Result<Vec<BoundingBox>, String> {
        let _ = image;
        Err("boxes unsupported".into())
    }
}

/// Serves any in-process detector.
pub struct DetectorService(pub Box<dyn Detector>);

impl Service for DetectorService {
    fn manifest(&self) -> AdapterManifest {
        self.0.manifest().clone()
    }

    fn detect(&mut self, image: &ImagePlane) -> Result<Vec<Detection>, String> {
        self.0.detect(image).map_err(|e| e.to_string())
    }

    fn score(&mut self, image: &ImagePlane, want_grad: bool) -> Result<(f64, Option<Tensor3>), String> {
        if want_grad {
            self.0.person_score_and_grad(image).map(|(s, g)| (s, Some(g))).map_err(|e| e.to_string())
        } else {
            self.0.person_score(image).map(|s| (s, None)).map_err(|e| e.to_string())
        }
    }
}

/// Sends `Hello`, then answers requests until `Shutdown` or end of stream.
pub fn serve(service: &mut dyn Service, r: &mut dyn Read, w: &mut dyn Write) -> Result<(), GatewayError> {
    write_message(w, &Message::Hello(service.manifest()))?;
    while let Some(msg) = read_message(r)? {
        let reply = match msg {
            Message::DetectRequest(img) => service.detect(&img).map(Message::DetectResponse),
            Message::ScoreRequest { image, want_grad } => service
                .score(&image, want_grad)
                .map(|(score, grad)| Message::ScoreResponse { score, grad }),
            Message::MaskRequest(img) => service.mask(&img).map(Message::MaskResponse),
            Message::BoxesRequest(img) => service.boxes(&img).map(Message::BoxesResponse),
            Message::Shutdown => return Ok(()),
            other => Err(format!("unexpected message type {}", other.tag())),
        };
        write_message(w, &reply.unwrap_or_else(Message::Error))?;
    }
    Ok(())
}

/// Client for a detector (or mask/box provider) on the other end of a
/// stream pair.
pub struct ProcessAdapter {
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    manifest: AdapterManifest,
    child: Option<Child>,
    command: Option<Vec<String>>,
}

impl ProcessAdapter {
    /// Connects over an existing stream pair and reads the `Hello`.
    pub fn connect(mut reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>) -> Result<Self, GatewayError> {
        let manifest = match read_message(&mut reader)? {
            Some(Message::Hello(m)) => m,
            Some(other) => return Err(protocol(format!("expected hello, got type {}", other.tag()))),
            None => return Err(protocol("adapter closed before hello")),
        };
        if manifest.protocol_version != PROTOCOL_VERSION {
            return Err(protocol(format!(
                "adapter {} speaks version {}",
                manifest.name, manifest.protocol_version
            )));
        }
        Ok(Self {
            reader,
            writer,
            manifest,
            child: None,
            command: None,
        })
    }

    /// Spawns `command[0] command[1..]` and talks over its stdin/stdout.
    pub fn spawn(command: &[String]) -> Result<Self, GatewayError> {
        let (prog, args) = command
            .split_first()
            .ok_or_else(|| GatewayError::Protocol("empty adapter command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout: ChildStdout = child.stdout.take().expect("piped stdout");
        let mut a = Self::connect(Box::new(BufReader::new(stdout)), Box::new(BufWriter::new(stdin)))?;
        a.child = Some(child);
        a.command = Some(command.to_vec());
        Ok(a)
    }

    fn call(&mut self, msg: &Message) -> Result<Message, GatewayError> {
        write_message(&mut self.writer, msg)?;
        match read_message(&mut self.reader)? {
            Some(Message::Error(e)) => Err(GatewayError::Adapter {
                adapter: self.manifest.name.clone(),
                message: e,
            }),
            Some(m) => Ok(m),
            None => Err(GatewayError::Adapter {
                adapter: self.manifest.name.clone(),
                message: "adapter closed the connection".into(),
            }),
        }
    }

    fn unexpected(&self, m: &Message) -> GatewayError {
        GatewayError::Adapter {
            adapter: self.manifest.name.clone(),
            message: format!("unexpected reply type {}", m.tag()),
        }
    }

    pub fn mask(&mut self, image: &ImagePlane) -> Result<MaskMap, GatewayError> {
        match self.call(&Message::MaskRequest(image.clone()))? {
            Message::MaskResponse(m) => Ok(m),
            m => Err(self.unexpected(&m)),
        }
    }

    pub fn boxes(&mut self, image: &ImagePlane) -> Result<Vec<BoundingBox>, GatewayError> {
        match self.call(&Message::BoxesRequest(image.clone()))? {
            Message::BoxesResponse(b) => Ok(b),
            m => Err(self.unexpected(&m)),
        }
    }

    pub fn shutdown(&mut self) -> Result<(), GatewayError> {
        write_message(&mut self.writer, &Message::Shutdown)?;
        if let Some(mut c) = self.child.take() {
            c.wait()?;
        }
        Ok(())
    }
}

impl Drop for ProcessAdapter {
    fn drop(&mut self) {
        if self.child.is_some() {
            let _ = self.shutdown();
        }
    }
}

impl Detector for ProcessAdapter {
    fn manifest(&self) -> &AdapterManifest {
        &self.manifest
    }

    fn detect(&mut self, image: &ImagePlane) -> Result<Vec<Detection>, GatewayError> {
        match self.call(&Message::DetectRequest(image.clone()))? {
            Message::DetectResponse(d) => Ok(d),
            m => Err(self.unexpected(&m)),
        }
    }

    fn person_score(&mut self, image: &ImagePlane) -> Result<f64, GatewayError> {
        match self.call(&Message::ScoreRequest {
            image: image.clone(),
            want_grad: false,
        })? {
            Message::ScoreResponse { score, .. } => Ok(score),
            m => Err(self.unexpected(&m)),
        }
    }

    fn person_score_and_grad(&mut self, image: &ImagePlane) -> Result<(f64, Tensor3), GatewayError> {
        if !self.manifest.capabilities.grads_available {
            return Err(GatewayError::GradientsUnavailable {
                adapter: self.manifest.name.clone(),
            });
        }
        match self.call(&Message::ScoreRequest {
            image: image.clone(),
            want_grad: true,
        })? {
            Message::ScoreResponse { score, grad: Some(g) } => Ok((score, g)),
            m => Err(self.unexpected(&m)),
        }
    }

    fn try_clone(&self) -> Result<Box<dyn Detector>, GatewayError> {
        match &self.command {
            Some(cmd) => Ok(Box::new(Self::spawn(cmd)?)),
            None => Err(self.unsupported("clone of a stream-bound adapter")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_message_round_trips() {
        let img = ImagePlane::from_fn(2, 3, |y, x| [y as f64 * 0.1, x as f64 * 0.2, 0.3]);
        let b = BoundingBox::new(1.0, 2.0, 3.5, 4.25).unwrap();
        let msgs = vec![
            Message::DetectRequest(img.clone()),
            Message::DetectResponse(vec![Detection {
                bbox: b,
                class: ClassLabel::PERSON,
                confidence: 0.8,
            }]),
            Message::ScoreRequest {
                image: img.clone(),
                want_grad: true,
            },
            Message::ScoreResponse {
                score: 0.25,
                grad: Some(img.as_tensor().clone()),
            },
            Message::ScoreResponse { score: 0.0, grad: None },
            Message::MaskRequest(img.clone()),
            Message::MaskResponse(MaskMap::from_bools(1, 2, &[true, false])),
            Message::BoxesRequest(img),
            Message::BoxesResponse(vec![b]),
            Message::Error("boom".into()),
            Message::Shutdown,
        ];
        for m in msgs {
            let bytes = encode(&m);
            let back = read_message(&mut &bytes[..]).unwrap().unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = encode(&Message::Shutdown);
        bytes[4] = 99;
        assert!(matches!(read_message(&mut &bytes[..]), Err(GatewayError::Protocol(_))));
    }

    #[test]
    fn truncated_body_is_rejected() {
        let mut bytes = encode(&Message::BoxesResponse(vec![BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()]));
        bytes.truncate(bytes.len() - 4);
        let n = (bytes.len() - 4) as u32;
        bytes[..4].copy_from_slice(&n.to_le_bytes());
        assert!(read_message(&mut &bytes[..]).is_err());
    }
}
