//! Two-party triple product `J′ = L·M·N + Z`.
//!
//! The middle holder owns `M` and the key pair; it sends `[M]` and receives
//! `[J′]`. The side holder owns `L`, `N` and the noise, and only ever sees a
//! public key. Both run over a framed, strictly alternating [`Session`].

use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc;

use nalgebra::DMatrix;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{DenseMatrix, NumericsError, RngState};
use crate::paillier::{
    self, dec_matrix, enc_matrix_at, plain_cipher_product, raise_scale, scale_by_real, sub_matrices, CipherMatrix,
    FixedPointCodec, KeyPair, PaillierError, PublicKey, Side,
};
use crate::privacy::NoisePlan;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("transport failure: {0}")]
    Transport(#[from] std::io::Error),
    #[error("connection closed")]
    Closed,
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("out-of-order message: expected {expected}, got {got:?}")]
    OutOfOrder { expected: String, got: Tag },
    #[error("factorization residual {residual:e} above tolerance")]
    RankCondition { residual: f64 },
    #[error("operand kind does not match session mode")]
    ModeMismatch,
    #[error("{0}")]
    Rejected(String),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CipherMode {
    He,
    Plaintext,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolMode {
    pub cipher: CipherMode,
    pub dp: bool,
}

#[repr(u8)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    Hello = 1,
    PubKey = 2,
    EncState = 3,
    FwdReq = 4,
    FwdResp = 5,
    BwdReq = 6,
    BwdResp = 7,
    Update = 8,
    Bye = 9,
}

impl Tag {
    pub fn from_byte(b: u8) -> Option<Tag> {
        use Tag::*;
        Some(match b {
            1 => Hello,
            2 => PubKey,
            3 => EncState,
            4 => FwdReq,
            5 => FwdResp,
            6 => BwdReq,
            7 => BwdResp,
            8 => Update,
            9 => Bye,
            _ => return None,
        })
    }

    pub fn is_request(self) -> bool {
        !matches!(self, Tag::FwdResp | Tag::BwdResp)
    }

    /// Tag a server must answer `self` with. Control messages are acked with
    /// their own tag.
    pub fn response(self) -> Tag {
        match self {
            Tag::FwdReq => Tag::FwdResp,
            Tag::BwdReq => Tag::BwdResp,
            t => t,
        }
    }
}

pub const FRAME_HEADER_BYTES: usize = 5;
const MAX_PAYLOAD: usize = 1 << 30;

/// `len: u32 BE` (payload only) `‖ tag: u8 ‖ payload`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub tag: Tag,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(tag: Tag, payload: Vec<u8>) -> Self {
        Self { tag, payload }
    }

    pub fn empty(tag: Tag) -> Self {
        Self::new(tag, Vec::new())
    }

    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_BYTES + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.push(self.tag as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        if bytes.len() < FRAME_HEADER_BYTES {
            return Err(ProtocolError::Malformed("short header".into()));
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        if bytes.len() != FRAME_HEADER_BYTES + len {
            return Err(ProtocolError::Malformed(format!(
                "declared {len} payload bytes, got {}",
                bytes.len() - FRAME_HEADER_BYTES
            )));
        }
        let tag = Tag::from_byte(bytes[4]).ok_or_else(|| ProtocolError::Malformed(format!("tag {}", bytes[4])))?;
        Ok(Frame::new(tag, bytes[FRAME_HEADER_BYTES..].to_vec()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportStats {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
}

impl TransportStats {
    fn on_send(&mut self, bytes: usize) {
        self.bytes_sent += bytes as u64;
        self.messages_sent += 1;
    }

    fn on_recv(&mut self, bytes: usize) {
        self.bytes_received += bytes as u64;
        self.messages_received += 1;
    }
}

pub trait Transport: Send {
    fn send(&mut self, frame: &Frame) -> Result<()>;
    fn recv(&mut self) -> Result<Frame>;
    fn stats(&self) -> TransportStats;
}

/// One end of an in-process channel carrying the exact wire bytes.
pub struct MemoryTransport {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
    stats: TransportStats,
}

impl MemoryTransport {
    pub fn pair() -> (MemoryTransport, MemoryTransport) {
        let (tx_a, rx_b) = mpsc::channel();
        let (tx_b, rx_a) = mpsc::channel();
        (
            MemoryTransport {
                tx: tx_a,
                rx: rx_a,
                stats: TransportStats::default(),
            },
            MemoryTransport {
                tx: tx_b,
                rx: rx_b,
                stats: TransportStats::default(),
            },
        )
    }

    /// Pushes raw bytes, bypassing framing. Used to inject malformed input.
    pub fn send_raw(&mut self, bytes: Vec<u8>) -> Result<()> {
        self.tx.send(bytes).map_err(|_| ProtocolError::Closed)
    }
}

impl Transport for MemoryTransport {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        let bytes = frame.encode();
        let len = bytes.len();
        self.tx.send(bytes).map_err(|_| ProtocolError::Closed)?;
        self.stats.on_send(len);
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame> {
        let bytes = self.rx.recv().map_err(|_| ProtocolError::Closed)?;
        let frame = Frame::decode(&bytes)?;
        self.stats.on_recv(bytes.len());
        Ok(frame)
    }

    fn stats(&self) -> TransportStats {
        self.stats
    }
}

pub struct TcpTransport {
    stream: TcpStream,
    stats: TransportStats,
}

impl TcpTransport {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        Ok(Self::from_stream(TcpStream::connect(addr)?))
    }

    pub fn from_stream(stream: TcpStream) -> Self {
        let _ = stream.set_nodelay(true);
        Self {
            stream,
            stats: TransportStats::default(),
        }
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        let bytes = frame.encode();
        self.stream.write_all(&bytes)?;
        self.stream.flush()?;
        self.stats.on_send(bytes.len());
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame> {
        let mut head = [0u8; FRAME_HEADER_BYTES];
        match self.stream.read_exact(&mut head) {
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Err(ProtocolError::Closed),
            r => r?,
        }
        let len = u32::from_be_bytes(head[..4].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(ProtocolError::Malformed(format!("payload of {len} bytes")));
        }
        let tag = Tag::from_byte(head[4]).ok_or_else(|| ProtocolError::Malformed(format!("tag {}", head[4])))?;
        let mut payload = vec![0u8; len];
        self.stream.read_exact(&mut payload)?;
        self.stats.on_recv(FRAME_HEADER_BYTES + len);
        Ok(Frame::new(tag, payload))
    }

    fn stats(&self) -> TransportStats {
        self.stats
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

/// Enforces request/response alternation over a transport.
pub struct Session<T: Transport> {
    transport: T,
    role: Role,
    pending: Option<Tag>,
}

impl<T: Transport> Session<T> {
    pub fn client(transport: T) -> Self {
        Self {
            transport,
            role: Role::Client,
            pending: None,
        }
    }

    pub fn server(transport: T) -> Self {
        Self {
            transport,
            role: Role::Server,
            pending: None,
        }
    }

    pub fn send(&mut self, frame: &Frame) -> Result<()> {
        match (self.role, self.pending) {
            (Role::Client, None) if frame.tag.is_request() => self.pending = Some(frame.tag),
            (Role::Client, Some(req)) => {
                return Err(ProtocolError::OutOfOrder {
                    expected: format!("response to {req:?}"),
                    got: frame.tag,
                })
            }
            (Role::Client, None) => {
                return Err(ProtocolError::OutOfOrder {
                    expected: "a request".into(),
                    got: frame.tag,
                })
            }
            (Role::Server, Some(req)) if frame.tag == req.response() => self.pending = None,
            (Role::Server, Some(req)) => {
                return Err(ProtocolError::OutOfOrder {
                    expected: format!("{:?}", req.response()),
                    got: frame.tag,
                })
            }
            (Role::Server, None) => {
                return Err(ProtocolError::OutOfOrder {
                    expected: "a request to answer".into(),
                    got: frame.tag,
                })
            }
        }
        self.transport.send(frame)
    }

    pub fn recv(&mut self) -> Result<Frame> {
        if self.role == Role::Client && self.pending.is_none() {
            return Err(ProtocolError::OutOfOrder {
                expected: "a request before receiving".into(),
                got: Tag::Hello,
            });
        }
        if let (Role::Server, Some(got)) = (self.role, self.pending) {
            return Err(ProtocolError::OutOfOrder {
                expected: "a reply before the next request".into(),
                got,
            });
        }
        let frame = self.transport.recv()?;
        match self.role {
            Role::Client => {
                let req = self.pending.take().unwrap();
                if frame.tag != req.response() {
                    return Err(ProtocolError::OutOfOrder {
                        expected: format!("{:?}", req.response()),
                        got: frame.tag,
                    });
                }
            }
            Role::Server => {
                if !frame.tag.is_request() {
                    return Err(ProtocolError::OutOfOrder {
                        expected: "a request".into(),
                        got: frame.tag,
                    });
                }
                self.pending = Some(frame.tag);
            }
        }
        Ok(frame)
    }

    pub fn stats(&self) -> TransportStats {
        self.transport.stats()
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }
}

/// Server-side message handler.
pub trait Responder {
    fn respond(&mut self, request: Frame) -> Result<Frame>;
}

/// Handles requests until `Bye`, which is acknowledged before returning.
pub fn serve<T: Transport, R: Responder + ?Sized>(responder: &mut R, session: &mut Session<T>) -> Result<()> {
    loop {
        let req = session.recv()?;
        let bye = req.tag == Tag::Bye;
        let resp = match responder.respond(req) {
            Ok(r) => r,
            Err(e) => {
                log::error!("responder failed: {e}");
                return Err(e);
            }
        };
        session.send(&resp)?;
        if bye {
            return Ok(());
        }
    }
}

/// Client view of a protocol session.
pub trait Link {
    fn exchange(&mut self, request: Frame) -> Result<Frame>;
    /// Counters of the client end.
    fn stats(&self) -> TransportStats;
}

/// Both ends in one thread: each exchange drives the responder synchronously
/// through real frames on a memory channel.
pub struct InProcessLink<'a> {
    client: Session<MemoryTransport>,
    server: Session<MemoryTransport>,
    responder: &'a mut dyn Responder,
}

impl<'a> InProcessLink<'a> {
    pub fn new(responder: &'a mut dyn Responder) -> Self {
        let (a, b) = MemoryTransport::pair();
        Self {
            client: Session::client(a),
            server: Session::server(b),
            responder,
        }
    }

    pub fn server_stats(&self) -> TransportStats {
        self.server.stats()
    }
}

impl Link for InProcessLink<'_> {
    fn exchange(&mut self, request: Frame) -> Result<Frame> {
        self.client.send(&request)?;
        let req = self.server.recv()?;
        let resp = self.responder.respond(req)?;
        self.server.send(&resp)?;
        self.client.recv()
    }

    fn stats(&self) -> TransportStats {
        self.client.stats()
    }
}

/// Client end of a session whose server runs elsewhere.
pub struct RemoteLink<T: Transport> {
    session: Session<T>,
}

impl<T: Transport> RemoteLink<T> {
    pub fn new(transport: T) -> Self {
        Self {
            session: Session::client(transport),
        }
    }
}

impl<T: Transport> Link for RemoteLink<T> {
    fn exchange(&mut self, request: Frame) -> Result<Frame> {
        self.session.send(&request)?;
        self.session.recv()
    }

    fn stats(&self) -> TransportStats {
        self.session.stats()
    }
}

/// A matrix on the wire: ciphertexts in HE mode, raw values when simulating.
#[derive(Clone, Debug, PartialEq)]
pub enum Operand {
    Cipher(CipherMatrix),
    Plain(DenseMatrix),
}

impl Operand {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Operand::Cipher(c) => c.shape(),
            Operand::Plain(p) => p.shape(),
        }
    }

    /// Number of ciphertexts this operand stands for.
    pub fn cells(&self) -> usize {
        let (r, c) = self.shape();
        r * c
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        match self {
            Operand::Cipher(c) => {
                out.push(0);
                out.extend_from_slice(&c.to_bytes());
            }
            Operand::Plain(p) => {
                out.push(1);
                out.extend_from_slice(&(p.rows() as u32).to_be_bytes());
                out.extend_from_slice(&(p.cols() as u32).to_be_bytes());
                for v in p.data() {
                    out.extend_from_slice(&v.to_bits().to_be_bytes());
                }
            }
        }
    }

    pub fn read_from(buf: &mut &[u8]) -> Result<Operand> {
        let (&kind, rest) = buf.split_first().ok_or_else(|| ProtocolError::Malformed("empty operand".into()))?;
        *buf = rest;
        match kind {
            0 => Ok(Operand::Cipher(CipherMatrix::read_from(buf)?)),
            1 => {
                let rows = read_u32(buf)? as usize;
                let cols = read_u32(buf)? as usize;
                if buf.len() < rows * cols * 8 {
                    return Err(ProtocolError::Malformed("truncated plain operand".into()));
                }
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows * cols {
                    let (head, rest) = buf.split_at(8);
                    data.push(f64::from_bits(u64::from_be_bytes(head.try_into().unwrap())));
                    *buf = rest;
                }
                Ok(Operand::Plain(DenseMatrix::from_vec(rows, cols, data)?))
            }
            k => Err(ProtocolError::Malformed(format!("operand kind {k}"))),
        }
    }
}

pub fn write_u32(v: u32, out: &mut Vec<u8>) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub fn read_u32(buf: &mut &[u8]) -> Result<u32> {
    paillier::read_u32(buf).map_err(|_| ProtocolError::Malformed("truncated u32".into()))
}

pub fn write_f64(v: f64, out: &mut Vec<u8>) {
    out.extend_from_slice(&v.to_bits().to_be_bytes());
}

pub fn read_f64(buf: &mut &[u8]) -> Result<f64> {
    paillier::read_u64(buf)
        .map(f64::from_bits)
        .map_err(|_| ProtocolError::Malformed("truncated f64".into()))
}

pub fn write_indices(idx: &[usize], out: &mut Vec<u8>) {
    write_u32(idx.len() as u32, out);
    for &i in idx {
        write_u32(i as u32, out);
    }
}

pub fn read_indices(buf: &mut &[u8]) -> Result<Vec<usize>> {
    let n = read_u32(buf)? as usize;
    if buf.len() < n * 4 {
        return Err(ProtocolError::Malformed("truncated index list".into()));
    }
    (0..n).map(|_| read_u32(buf).map(|v| v as usize)).collect()
}

pub fn expect_consumed(buf: &[u8]) -> Result<()> {
    if buf.is_empty() {
        Ok(())
    } else {
        Err(ProtocolError::Malformed(format!("{} trailing bytes", buf.len())))
    }
}

/// Key material and codec of the middle holder.
pub struct MiddleCrypto {
    keys: Option<(KeyPair, FixedPointCodec)>,
}

impl MiddleCrypto {
    pub fn plaintext() -> Self {
        Self { keys: None }
    }

    pub fn generate(key_bits: usize, frac_bits: u32, rng: &mut RngState) -> Result<Self> {
        let kp = KeyPair::generate(key_bits, rng)?;
        let codec = FixedPointCodec::new(kp.public(), frac_bits);
        Ok(Self::from_keypair(kp, codec))
    }

    pub fn from_keypair(kp: KeyPair, codec: FixedPointCodec) -> Self {
        Self { keys: Some((kp, codec)) }
    }

    pub fn mode(&self) -> CipherMode {
        if self.keys.is_some() {
            CipherMode::He
        } else {
            CipherMode::Plaintext
        }
    }

    pub fn public_key(&self) -> Option<&PublicKey> {
        self.keys.as_ref().map(|(kp, _)| kp.public())
    }

    pub fn codec(&self) -> Option<&FixedPointCodec> {
        self.keys.as_ref().map(|(_, c)| c)
    }

    /// `PUBKEY` payload; empty in plaintext mode.
    pub fn key_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        if let Some((kp, codec)) = &self.keys {
            paillier::write_biguint(kp.public().n(), &mut out);
            write_u32(codec.frac_bits(), &mut out);
            write_u32(codec.magnitude_bits(), &mut out);
        }
        out
    }

    pub fn frac_bits(&self) -> u32 {
        self.codec().map_or(0, |c| c.frac_bits())
    }

    /// Encrypts at `multiple · frac_bits`.
    pub fn encrypt(&self, m: &DenseMatrix, multiple: u32, rng: &mut RngState) -> Result<Operand> {
        Ok(match &self.keys {
            Some((kp, codec)) => Operand::Cipher(enc_matrix_at(kp.public(), m, codec, multiple * codec.frac_bits(), rng)?),
            None => Operand::Plain(m.clone()),
        })
    }

    pub fn decrypt(&self, op: &Operand) -> Result<DenseMatrix> {
        match (&self.keys, op) {
            (Some((kp, codec)), Operand::Cipher(c)) => Ok(dec_matrix(kp.secret(), c, codec)?),
            (None, Operand::Plain(p)) => Ok(p.clone()),
            _ => Err(ProtocolError::ModeMismatch),
        }
    }
}

/// What the side holder knows of the middle's key: the public half only.
#[derive(Clone, Debug)]
pub struct SideCrypto {
    keys: Option<(PublicKey, FixedPointCodec)>,
}

impl SideCrypto {
    pub fn plaintext() -> Self {
        Self { keys: None }
    }

    pub fn from_key_payload(payload: &[u8]) -> Result<Self> {
        if payload.is_empty() {
            return Ok(Self::plaintext());
        }
        let mut buf = payload;
        let n: BigUint = paillier::read_biguint(&mut buf)?;
        let frac = read_u32(&mut buf)?;
        let mag = read_u32(&mut buf)?;
        expect_consumed(buf)?;
        let pk = PublicKey::from_modulus(n);
        let codec = FixedPointCodec::new(&pk, frac).with_magnitude_bits(mag);
        Ok(Self { keys: Some((pk, codec)) })
    }

    pub fn mode(&self) -> CipherMode {
        if self.keys.is_some() {
            CipherMode::He
        } else {
            CipherMode::Plaintext
        }
    }

    pub fn public_key(&self) -> Option<&PublicKey> {
        self.keys.as_ref().map(|(pk, _)| pk)
    }

    pub fn read_operand(&self, buf: &mut &[u8]) -> Result<Operand> {
        let op = Operand::read_from(buf)?;
        match (&self.keys, &op) {
            (Some((pk, _)), Operand::Cipher(c)) if c.key_id() != pk.key_id() => Err(PaillierError::KeyMismatch {
                expected: pk.key_id(),
                got: c.key_id(),
            }
            .into()),
            (Some(_), Operand::Cipher(_)) | (None, Operand::Plain(_)) => Ok(op),
            _ => Err(ProtocolError::ModeMismatch),
        }
    }

    /// `L·[M]·N + [Z]`, with `Z` encrypted at the product's scale.
    pub fn triple(
        &self,
        l: &DenseMatrix,
        m: &Operand,
        n: &DenseMatrix,
        noise: Option<&DenseMatrix>,
        rng: &mut RngState,
    ) -> Result<Operand> {
        let (q, r) = m.shape();
        if l.cols() != q || n.rows() != r {
            return Err(ProtocolError::Shape(format!(
                "L {:?} · M {:?} · N {:?}",
                l.shape(),
                m.shape(),
                n.shape()
            )));
        }
        if let Some(z) = noise {
            if z.shape() != (l.rows(), n.cols()) {
                return Err(ProtocolError::Shape(format!(
                    "noise {:?} for product {:?}",
                    z.shape(),
                    (l.rows(), n.cols())
                )));
            }
        }
        match (&self.keys, m) {
            (Some((pk, codec)), Operand::Cipher(c)) => {
                let lm = plain_cipher_product(pk, l, c, Side::Left, codec)?;
                let mut j = plain_cipher_product(pk, n, &lm, Side::Right, codec)?;
                if let Some(z) = noise {
                    let zc = enc_matrix_at(pk, z, codec, j.scale_exp(), rng)?;
                    j = paillier::add_matrices(pk, &j, &zc)?;
                }
                Ok(Operand::Cipher(j))
            }
            (None, Operand::Plain(p)) => {
                let mut j = l.matmul(p)?.matmul(n)?;
                if let Some(z) = noise {
                    j = j.add(z)?;
                }
                Ok(Operand::Plain(j))
            }
            _ => Err(ProtocolError::ModeMismatch),
        }
    }

    /// See [`stored_middle_update`].
    pub fn update_state(&self, state: &mut Operand, rows: &[usize], delta: &Operand, eta: f64) -> Result<()> {
        match (&self.keys, state, delta) {
            (Some((pk, codec)), Operand::Cipher(s), Operand::Cipher(d)) => {
                *s = stored_middle_update(pk, codec, s, rows, d, eta)?;
                Ok(())
            }
            (None, Operand::Plain(s), Operand::Plain(d)) => {
                if d.rows() != rows.len() || d.cols() != s.cols() {
                    return Err(ProtocolError::Shape(format!("delta {:?} for {} rows", d.shape(), rows.len())));
                }
                if eta == 0.0 {
                    return Ok(());
                }
                for (k, &r) in rows.iter().enumerate() {
                    if r >= s.rows() {
                        return Err(ProtocolError::Shape(format!("row {r} of {}", s.rows())));
                    }
                    for c in 0..s.cols() {
                        s[(r, c)] -= eta * d[(k, c)];
                    }
                }
                Ok(())
            }
            _ => Err(ProtocolError::ModeMismatch),
        }
    }
}

/// `[X_B] ← [X_B] ⊖ η·[Δ]` on the rows listed in `rows`; every other row is
/// left bit-identical. `η` is encoded at the codec, so `Δ`'s scale plus the
/// fractional bits must not exceed the state's scale.
pub fn stored_middle_update(
    pk: &PublicKey,
    codec: &FixedPointCodec,
    state: &CipherMatrix,
    rows: &[usize],
    delta: &CipherMatrix,
    eta: f64,
) -> Result<CipherMatrix> {
    if state.key_id() != pk.key_id() || delta.key_id() != pk.key_id() {
        return Err(PaillierError::KeyMismatch {
            expected: pk.key_id(),
            got: if state.key_id() != pk.key_id() {
                state.key_id()
            } else {
                delta.key_id()
            },
        }
        .into());
    }
    if delta.rows() != rows.len() || delta.cols() != state.cols() {
        return Err(ProtocolError::Shape(format!("delta {:?} for {} rows", delta.shape(), rows.len())));
    }
    if eta == 0.0 {
        return Ok(state.clone());
    }
    let step = scale_by_real(pk, delta, eta, codec)?;
    if step.scale_exp() > state.scale_exp() {
        return Err(PaillierError::ScaleOverflow {
            scale: step.scale_exp(),
            magnitude_bits: codec.magnitude_bits(),
            modulus_bits: pk.bits(),
        }
        .into());
    }
    let step = raise_scale(pk, &step, state.scale_exp() - step.scale_exp())?;
    let current = state.select_rows(rows)?;
    let updated = sub_matrices(pk, &current, &step)?;
    let mut out = state.clone();
    out.replace_rows(rows, &updated)?;
    Ok(out)
}

/// Side role of a one-shot product.
pub struct SideHolder {
    l: DenseMatrix,
    n: DenseMatrix,
    crypto: SideCrypto,
    noise: Option<NoisePlan>,
    rng: RngState,
}

impl SideHolder {
    pub fn new(l: DenseMatrix, n: DenseMatrix, noise: Option<NoisePlan>, rng: RngState) -> Self {
        Self {
            l,
            n,
            crypto: SideCrypto::plaintext(),
            noise,
            rng,
        }
    }

    pub fn crypto(&self) -> &SideCrypto {
        &self.crypto
    }
}

impl Responder for SideHolder {
    fn respond(&mut self, req: Frame) -> Result<Frame> {
        match req.tag {
            Tag::Hello | Tag::Bye => Ok(Frame::empty(req.tag)),
            Tag::PubKey => {
                self.crypto = SideCrypto::from_key_payload(&req.payload)?;
                Ok(Frame::empty(Tag::PubKey))
            }
            Tag::FwdReq => {
                let mut buf = req.payload.as_slice();
                let m = self.crypto.read_operand(&mut buf)?;
                expect_consumed(buf)?;
                let z = match &self.noise {
                    Some(plan) if !plan.is_zero() => Some(plan.sample(&mut self.rng)),
                    _ => None,
                };
                let j = self.crypto.triple(&self.l, &m, &self.n, z.as_ref(), &mut self.rng)?;
                let mut out = Vec::new();
                j.write_to(&mut out);
                Ok(Frame::new(Tag::FwdResp, out))
            }
            t => Err(ProtocolError::Rejected(format!("{t:?} not supported by a one-shot side holder"))),
        }
    }
}

/// Middle role of a one-shot product.
pub struct MiddleHolder {
    m: DenseMatrix,
    crypto: MiddleCrypto,
    rng: RngState,
}

impl MiddleHolder {
    pub fn new(m: DenseMatrix, crypto: MiddleCrypto, rng: RngState) -> Self {
        Self { m, crypto, rng }
    }

    pub fn crypto(&self) -> &MiddleCrypto {
        &self.crypto
    }

    /// Sends the key and `[M]`, returns the decrypted `J′`.
    pub fn run(&mut self, link: &mut dyn Link) -> Result<DenseMatrix> {
        link.exchange(Frame::new(Tag::PubKey, self.crypto.key_payload()))?;
        let op = self.crypto.encrypt(&self.m, 1, &mut self.rng)?;
        let mut payload = Vec::new();
        op.write_to(&mut payload);
        let resp = link.exchange(Frame::new(Tag::FwdReq, payload))?;
        let mut buf = resp.payload.as_slice();
        let j = Operand::read_from(&mut buf)?;
        expect_consumed(buf)?;
        self.crypto.decrypt(&j)
    }
}

/// Runs one product with both roles in-process. Returns `J′` as delivered to
/// the middle holder and the middle's transport counters.
pub fn sandwich_multiply(side: &mut SideHolder, middle: &mut MiddleHolder) -> Result<(DenseMatrix, TransportStats)> {
    let mut link = InProcessLink::new(side);
    let j = middle.run(&mut link)?;
    link.exchange(Frame::empty(Tag::Bye))?;
    Ok((j, link.stats()))
}

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn from_na(m: &DMatrix<f64>) -> Result<DenseMatrix> {
    Ok(DenseMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)]))
}

pub const FACTORIZATION_TOLERANCE: f64 = 1e-8;

/// Another factor pair reproducing `J = L·M·N`: `L′` is `L` with one entry
/// shifted by `magnitude`, and `N′` is the minimum-norm least-squares
/// solution of `(L′M)·N′ = J`.
pub fn perturb_factorization(
    l: &DenseMatrix,
    m: &DenseMatrix,
    n: &DenseMatrix,
    position: (usize, usize),
    magnitude: f64,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let j = l.matmul(m)?.matmul(n)?;
    let (pi, pj) = position;
    if pi >= l.rows() || pj >= l.cols() {
        return Err(ProtocolError::Shape(format!("position {position:?} in {:?}", l.shape())));
    }
    let mut l2 = l.clone();
    l2[(pi, pj)] += magnitude;
    let a = to_na(&l2.matmul(m)?);
    let dim = a.nrows().max(a.ncols());
    let svd = a.svd(true, true);
    let cutoff = svd.singular_values.max() * f64::EPSILON * (dim as f64);
    let sol = svd
        .solve(&to_na(&j), cutoff)
        .map_err(|e| ProtocolError::Rejected(e.to_string()))?;
    let n2 = from_na(&sol)?;
    let residual = l2.matmul(m)?.matmul(&n2)?.sub(&j)?.frobenius_norm();
    if !(residual <= FACTORIZATION_TOLERANCE) {
        return Err(ProtocolError::RankCondition { residual });
    }
    Ok((l2, n2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::NoisePlan;
    use std::sync::OnceLock;

    fn shared_keys() -> &'static (KeyPair, FixedPointCodec) {
        static KEYS: OnceLock<(KeyPair, FixedPointCodec)> = OnceLock::new();
        KEYS.get_or_init(|| {
            let kp = KeyPair::generate(512, &mut RngState::new(11)).unwrap();
            let codec = FixedPointCodec::new(kp.public(), paillier::DEFAULT_FRAC_BITS);
            (kp, codec)
        })
    }

    fn he_crypto() -> MiddleCrypto {
        let (kp, codec) = shared_keys().clone();
        MiddleCrypto::from_keypair(kp, codec)
    }

    fn naive_triple(l: &DenseMatrix, m: &DenseMatrix, n: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(l.rows(), n.cols(), |i, t| {
            let mut s = 0.0;
            for j in 0..m.rows() {
                for k in 0..m.cols() {
                    s += l[(i, j)] * m[(j, k)] * n[(k, t)];
                }
            }
            s
        })
    }

    #[test]
    fn identity_factors_return_m() {
        let mut rng = RngState::new(1);
        let m = DenseMatrix::random_normal(3, 3, 1.0, &mut rng);
        let mut side = SideHolder::new(DenseMatrix::identity(3), DenseMatrix::identity(3), None, rng.fork(1));
        let mut mid = MiddleHolder::new(m.clone(), he_crypto(), rng.fork(2));
        let (j, _) = sandwich_multiply(&mut side, &mut mid).unwrap();
        assert!(j.sub(&m).unwrap().max_abs() < 1e-9);
        assert_eq!(side.crypto().mode(), CipherMode::He);
    }

    #[test]
    fn random_triple_matches_plaintext() {
        let mut rng = RngState::new(2);
        let l = DenseMatrix::random_normal(4, 3, 1.0, &mut rng);
        let m = DenseMatrix::random_normal(3, 3, 1.0, &mut rng);
        let n = DenseMatrix::random_normal(3, 2, 1.0, &mut rng);
        let want = naive_triple(&l, &m, &n);
        let mut side = SideHolder::new(l.clone(), n.clone(), None, rng.fork(1));
        let mut mid = MiddleHolder::new(m.clone(), he_crypto(), rng.fork(2));
        let (he, _) = sandwich_multiply(&mut side, &mut mid).unwrap();
        assert!(he.sub(&want).unwrap().max_abs() <= 1e-6);

        let mut side = SideHolder::new(l, n, None, rng.fork(3));
        let mut mid = MiddleHolder::new(m, MiddleCrypto::plaintext(), rng.fork(4));
        let (plain, _) = sandwich_multiply(&mut side, &mut mid).unwrap();
        assert!(plain.sub(&want).unwrap().max_abs() <= 1e-12);
        // mode equivalence bound: 2^-f · (‖L‖max‖N‖max + 1) · q · r
        let bound = 2f64.powi(-40) * (3.0 * 3.0 + 1.0) * 9.0;
        assert!(he.sub(&plain).unwrap().max_abs() <= bound.max(1e-9));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let rng = RngState::new(3);
        let mut side = SideHolder::new(DenseMatrix::zeros(2, 4), DenseMatrix::identity(3), None, rng.fork(1));
        let mut mid = MiddleHolder::new(DenseMatrix::zeros(3, 3), MiddleCrypto::plaintext(), rng.fork(2));
        assert!(matches!(sandwich_multiply(&mut side, &mut mid), Err(ProtocolError::Shape(_))));
    }

    #[test]
    fn constant_noise_statistics() {
        let mut rng = RngState::new(5);
        let l = DenseMatrix::random_normal(2, 2, 1.0, &mut rng);
        let m = DenseMatrix::random_normal(2, 2, 1.0, &mut rng);
        let n = DenseMatrix::random_normal(2, 2, 1.0, &mut rng);
        let exact = l.matmul(&m).unwrap().matmul(&n).unwrap();
        let sigma = 0.5;
        let mut side = SideHolder::new(l, n, Some(NoisePlan::constant(2, 2, sigma)), rng.fork(1));
        let mut mid = MiddleHolder::new(m, MiddleCrypto::plaintext(), rng.fork(2));
        let runs = 10_000;
        let mut sum = DenseMatrix::zeros(2, 2);
        let mut sq = DenseMatrix::zeros(2, 2);
        for _ in 0..runs {
            let (j, _) = sandwich_multiply(&mut side, &mut mid).unwrap();
            let e = j.sub(&exact).unwrap();
            sum.axpy(1.0, &e).unwrap();
            sq.axpy(1.0, &e.hadamard(&e).unwrap()).unwrap();
        }
        let se = sigma / (runs as f64).sqrt();
        for k in 0..4 {
            let mean = sum.data()[k] / runs as f64;
            let var = sq.data()[k] / runs as f64 - mean * mean;
            assert!(mean.abs() < 3.0 * se, "mean {mean}");
            assert!((var - sigma * sigma).abs() < 0.1 * sigma * sigma, "var {var}");
        }
    }

    #[test]
    fn he_noise_is_added_under_encryption() {
        let mut rng = RngState::new(6);
        let m = DenseMatrix::random_normal(2, 2, 1.0, &mut rng);
        let mut side = SideHolder::new(
            DenseMatrix::identity(2),
            DenseMatrix::identity(2),
            Some(NoisePlan::constant(2, 2, 1.0)),
            rng.fork(1),
        );
        let mut mid = MiddleHolder::new(m.clone(), he_crypto(), rng.fork(2));
        let (j, _) = sandwich_multiply(&mut side, &mut mid).unwrap();
        assert!(j.sub(&m).unwrap().max_abs() > 1e-3);
    }

    #[test]
    fn stored_update_examples() {
        let (kp, codec) = shared_keys();
        let pk = kp.public();
        let mut rng = RngState::new(7);
        let x = DenseMatrix::random_normal(4, 3, 0.1, &mut rng);
        let g = DenseMatrix::random_normal(4, 3, 0.1, &mut rng);
        let f = codec.frac_bits();
        let state = enc_matrix_at(pk, &x, codec, 4 * f, &mut rng).unwrap();
        let delta = enc_matrix_at(pk, &g, codec, 3 * f, &mut rng).unwrap();
        let rows = [0, 1, 2, 3];

        let same = stored_middle_update(pk, codec, &state, &rows, &delta, 0.0).unwrap();
        assert_eq!(same, state);

        let eta = 0.05;
        let upd = stored_middle_update(pk, codec, &state, &rows, &delta, eta).unwrap();
        assert_eq!(upd.scale_exp(), state.scale_exp());
        let want = x.sub(&g.scale(eta)).unwrap();
        let got = dec_matrix(kp.secret(), &upd, codec).unwrap();
        assert!(got.sub(&want).unwrap().max_abs() < 1e-9);

        let part = delta.select_rows(&[1, 3]).unwrap();
        let upd = stored_middle_update(pk, codec, &state, &[1, 3], &part, eta).unwrap();
        assert_eq!(upd.row_cells(0), state.row_cells(0));
        assert_eq!(upd.row_cells(2), state.row_cells(2));
        assert_ne!(upd.row_cells(1), state.row_cells(1));

        // a delta whose scaled step outgrows the state scale is rejected
        let too_fine = enc_matrix_at(pk, &g, codec, 4 * f, &mut rng).unwrap();
        assert!(stored_middle_update(pk, codec, &state, &rows, &too_fine, eta).is_err());

        let other = KeyPair::generate(256, &mut RngState::new(99)).unwrap();
        let foreign = enc_matrix_at(other.public(), &g, codec, 3 * f, &mut rng);
        if let Ok(foreign) = foreign {
            assert!(stored_middle_update(pk, codec, &state, &rows, &foreign, eta).is_err());
        }
    }

    #[test]
    fn frames_and_counters() {
        let (mut a, mut b) = MemoryTransport::pair();
        let frames = [
            Frame::empty(Tag::Hello),
            Frame::new(Tag::FwdReq, vec![1, 2, 3]),
            Frame::new(Tag::Bye, vec![0; 100]),
        ];
        for f in &frames {
            a.send(f).unwrap();
            assert_eq!(&b.recv().unwrap(), f);
        }
        let total: usize = frames.iter().map(Frame::wire_len).sum();
        assert_eq!(a.stats().bytes_sent, total as u64);
        assert_eq!(b.stats().bytes_received, total as u64);
        assert_eq!(a.stats().messages_sent, 3);

        a.send_raw(vec![0, 0, 0, 9, 1]).unwrap();
        assert!(matches!(b.recv(), Err(ProtocolError::Malformed(_))));
        a.send_raw(vec![0, 0, 0, 0, 77]).unwrap();
        assert!(matches!(b.recv(), Err(ProtocolError::Malformed(_))));
        drop(a);
        assert!(matches!(b.recv(), Err(ProtocolError::Closed)));
    }

    #[test]
    fn cipher_payload_roundtrip() {
        let (kp, codec) = shared_keys();
        let mut rng = RngState::new(8);
        let m = DenseMatrix::random_normal(2, 3, 1.0, &mut rng);
        let op = Operand::Cipher(paillier::enc_matrix(kp.public(), &m, codec, &mut rng).unwrap());
        let mut buf = Vec::new();
        op.write_to(&mut buf);
        let mut slice = buf.as_slice();
        assert_eq!(Operand::read_from(&mut slice).unwrap(), op);
        assert!(slice.is_empty());

        let plain = Operand::Plain(m);
        let mut buf = Vec::new();
        plain.write_to(&mut buf);
        assert_eq!(Operand::read_from(&mut buf.as_slice()).unwrap(), plain);
    }

    #[test]
    fn alternation_is_enforced() {
        let (a, b) = MemoryTransport::pair();
        let mut client = Session::client(a);
        let mut server = Session::server(b);
        assert!(client.recv().is_err());
        assert!(server.send(&Frame::empty(Tag::FwdResp)).is_err());
        client.send(&Frame::empty(Tag::FwdReq)).unwrap();
        assert!(client.send(&Frame::empty(Tag::FwdReq)).is_err());
        server.recv().unwrap();
        assert!(server.send(&Frame::empty(Tag::BwdResp)).is_err());
        server.send(&Frame::empty(Tag::FwdResp)).unwrap();
        client.recv().unwrap();

        // a response tag arriving as a request is rejected by the server
        client.transport_mut().send(&Frame::empty(Tag::BwdResp)).unwrap();
        assert!(matches!(server.recv(), Err(ProtocolError::OutOfOrder { .. })));

        // a mismatched reply is rejected by the client
        let (a, b) = MemoryTransport::pair();
        let mut client = Session::client(a);
        let mut raw = b;
        client.send(&Frame::empty(Tag::BwdReq)).unwrap();
        raw.recv().unwrap();
        raw.send(&Frame::empty(Tag::FwdResp)).unwrap();
        assert!(matches!(client.recv(), Err(ProtocolError::OutOfOrder { .. })));
    }

    #[test]
    fn socket_transport_end_to_end() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let mut rng = RngState::new(9);
        let l = DenseMatrix::random_normal(3, 2, 1.0, &mut rng);
        let m = DenseMatrix::random_normal(2, 2, 1.0, &mut rng);
        let n = DenseMatrix::random_normal(2, 3, 1.0, &mut rng);
        let want = naive_triple(&l, &m, &n);
        let side_rng = rng.fork(1);
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut side = SideHolder::new(l, n, None, side_rng);
            let mut session = Session::server(TcpTransport::from_stream(stream));
            serve(&mut side, &mut session).unwrap();
            session.stats()
        });
        let mut link = RemoteLink::new(TcpTransport::connect(addr).unwrap());
        let mut mid = MiddleHolder::new(m, he_crypto(), rng.fork(2));
        let j = mid.run(&mut link).unwrap();
        link.exchange(Frame::empty(Tag::Bye)).unwrap();
        let server_stats = server.join().unwrap();
        assert!(j.sub(&want).unwrap().max_abs() < 1e-6);
        assert_eq!(link.stats().bytes_sent, server_stats.bytes_received);
        assert_eq!(link.stats().bytes_received, server_stats.bytes_sent);
        assert_eq!(link.stats().messages_sent, 3);
    }

    #[test]
    fn in_process_and_socket_bytes_agree() {
        let mut rng = RngState::new(10);
        let l = DenseMatrix::random_normal(2, 2, 1.0, &mut rng);
        let m = DenseMatrix::random_normal(2, 2, 1.0, &mut rng);
        let mut side = SideHolder::new(l.clone(), DenseMatrix::identity(2), None, rng.fork(1));
        let mut mid = MiddleHolder::new(m.clone(), MiddleCrypto::plaintext(), rng.fork(2));
        let (_, mem) = sandwich_multiply(&mut side, &mut mid).unwrap();

        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let side_rng = rng.fork(1);
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut side = SideHolder::new(l, DenseMatrix::identity(2), None, side_rng);
            serve(&mut side, &mut Session::server(TcpTransport::from_stream(stream))).unwrap();
        });
        let mut link = RemoteLink::new(TcpTransport::connect(addr).unwrap());
        let mut mid = MiddleHolder::new(m, MiddleCrypto::plaintext(), rng.fork(2));
        mid.run(&mut link).unwrap();
        link.exchange(Frame::empty(Tag::Bye)).unwrap();
        server.join().unwrap();
        assert_eq!(link.stats(), mem);
    }

    #[test]
    fn factorization_examples() {
        let l = DenseMatrix::from_rows(&[vec![1.0]]);
        let m = DenseMatrix::from_rows(&[vec![2.0]]);
        let n = DenseMatrix::from_rows(&[vec![3.0]]);
        let (l2, n2) = perturb_factorization(&l, &m, &n, (0, 0), 1.0).unwrap();
        assert_eq!(l2[(0, 0)], 2.0);
        assert!((n2[(0, 0)] - 1.5).abs() < 1e-12);

        let mut rng = RngState::new(12);
        let l = DenseMatrix::random_normal(3, 3, 1.0, &mut rng);
        let m = DenseMatrix::random_normal(3, 3, 1.0, &mut rng);
        let n = DenseMatrix::random_normal(3, 3, 1.0, &mut rng);
        let j = l.matmul(&m).unwrap().matmul(&n).unwrap();
        let (rl, nr) = (l.scale(7.0), n.scale(1.0 / 7.0));
        assert!(rl.matmul(&m).unwrap().matmul(&nr).unwrap().sub(&j).unwrap().max_abs() < 1e-12);

        let (l2, n2) = perturb_factorization(&l, &m, &n, (1, 2), 1e-6).unwrap();
        assert_ne!(l2, l);
        let res = l2.matmul(&m).unwrap().matmul(&n2).unwrap().sub(&j).unwrap().frobenius_norm();
        assert!(res <= 1e-8);

        // L′ = [[1,1],[1,1]] is singular while J = L has full rank
        let l = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        let m = DenseMatrix::identity(2);
        let n = DenseMatrix::identity(2);
        assert!(matches!(
            perturb_factorization(&l, &m, &n, (1, 0), 1.0),
            Err(ProtocolError::RankCondition { .. })
        ));
    }
}
