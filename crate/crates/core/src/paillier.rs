//! Paillier cryptosystem with a signed fixed-point codec.
//!
//! Real matrices travel as [`CipherMatrix`] values whose cells encrypt
//! `round(x · 2^scale_exp)` in the upper-half signed convention: a negative
//! integer `-v` is stored as `n - v`. Every plaintext-by-ciphertext product
//! adds the codec's fractional bits to `scale_exp`, so a left-then-right
//! triple product ends at three times the base scale.

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{FromPrimitive, One, Signed, ToPrimitive, Zero};
use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::numerics::DenseMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PaillierError {
    #[error("key size {0} bits is below the 256-bit minimum")]
    KeyTooSmall(usize),
    #[error("plaintext is outside [0, n)")]
    PlaintextOutOfRange,
    #[error("ciphertext is not an element of Z*_(n^2)")]
    InvalidCiphertext,
    #[error("ciphertext key {got:#018x} does not match key {expected:#018x}")]
    KeyMismatch { expected: u64, got: u64 },
    #[error("value {value} exceeds the signed fixed-point window at scale 2^{scale}")]
    EncodeOverflow { value: f64, scale: u32 },
    #[error("accumulated scale 2^{scale} with {magnitude_bits} magnitude bits does not fit a {modulus_bits}-bit modulus")]
    ScaleOverflow {
        scale: u32,
        magnitude_bits: u32,
        modulus_bits: u64,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed serialized data: {0}")]
    Malformed(&'static str),
}

pub type Result<T> = std::result::Result<T, PaillierError>;

/// Identifier derived from the modulus (FNV-1a over its big-endian bytes).
fn fingerprint(n: &BigUint) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in n.to_bytes_be() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    g: BigUint,
    key_id: u64,
}

impl PublicKey {
    /// Rebuilds a public key from its modulus, with `g = n + 1`.
    pub fn from_modulus(n: BigUint) -> Self {
        let n_squared = &n * &n;
        let g = &n + 1u32;
        let key_id = fingerprint(&n);
        Self {
            n,
            n_squared,
            g,
            key_id,
        }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn key_id(&self) -> u64 {
        self.key_id
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    fn random_unit<R: RngCore + CryptoRng>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_below(&self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// `c = g^m · r^n mod n²` with fresh `r ∈ Z*_n`.
    pub fn encrypt<R: RngCore + CryptoRng>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext> {
        if m >= &self.n {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        let r = self.random_unit(rng);
        let gm = if self.g == &self.n + 1u32 {
            // (n+1)^m = 1 + m·n (mod n²)
            (BigUint::one() + m * &self.n) % &self.n_squared
        } else {
            self.g.modpow(m, &self.n_squared)
        };
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(Ciphertext {
            value: gm * rn % &self.n_squared,
            key_id: self.key_id,
        })
    }

    /// Multiplies by a fresh encryption of zero.
    pub fn rerandomize<R: RngCore + CryptoRng>(&self, c: &Ciphertext, rng: &mut R) -> Result<Ciphertext> {
        self.check(c)?;
        let rn = self.random_unit(rng).modpow(&self.n, &self.n_squared);
        Ok(Ciphertext {
            value: &c.value * rn % &self.n_squared,
            key_id: self.key_id,
        })
    }

    fn check(&self, c: &Ciphertext) -> Result<()> {
        if c.key_id != self.key_id {
            return Err(PaillierError::KeyMismatch {
                expected: self.key_id,
                got: c.key_id,
            });
        }
        Ok(())
    }

    /// Homomorphic addition: `Dec(add(a, b)) = m_a + m_b mod n`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.check(a)?;
        self.check(b)?;
        Ok(Ciphertext {
            value: &a.value * &b.value % &self.n_squared,
            key_id: self.key_id,
        })
    }

    /// `Dec(scalar_mul(c, k)) = k · m mod n`.
    pub fn scalar_mul(&self, c: &Ciphertext, k: &BigUint) -> Result<Ciphertext> {
        self.check(c)?;
        Ok(Ciphertext {
            value: c.value.modpow(k, &self.n_squared),
            key_id: self.key_id,
        })
    }

    /// Ciphertext of `-m mod n`.
    pub fn negate(&self, c: &Ciphertext) -> Result<Ciphertext> {
        self.check(c)?;
        let inv = c
            .value
            .modinv(&self.n_squared)
            .ok_or(PaillierError::InvalidCiphertext)?;
        Ok(Ciphertext {
            value: inv,
            key_id: self.key_id,
        })
    }

    /// Scalar multiplication by a signed integer; negative factors go through
    /// the modular inverse so exponents stay short.
    pub fn scalar_mul_signed(&self, c: &Ciphertext, k: &BigInt) -> Result<Ciphertext> {
        let mag = k.magnitude();
        match k.sign() {
            Sign::Minus => self.scalar_mul(&self.negate(c)?, mag),
            _ => self.scalar_mul(c, mag),
        }
    }

    /// The deterministic encryption of zero (`1`), used as an empty sum.
    fn trivial_zero(&self) -> Ciphertext {
        Ciphertext {
            value: BigUint::one(),
            key_id: self.key_id,
        }
    }
}

#[derive(Clone)]
pub struct SecretKey {
    lambda: BigUint,
    mu: BigUint,
    public: PublicKey,
}

impl std::fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecretKey")
            .field("key_id", &self.public.key_id)
            .finish_non_exhaustive()
    }
}

impl SecretKey {
    fn l_function(&self, x: &BigUint) -> BigUint {
        (x - 1u32) / &self.public.n
    }

    /// `m = L(c^λ mod n²) · μ mod n`.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint> {
        self.public.check(c)?;
        if c.value.is_zero() || c.value >= self.public.n_squared {
            return Err(PaillierError::InvalidCiphertext);
        }
        let u = c.value.modpow(&self.lambda, &self.public.n_squared);
        Ok(self.l_function(&u) * &self.mu % &self.public.n)
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }
}

/// Paillier key pair. `p` and `q` are discarded after generation.
#[derive(Clone, Debug)]
pub struct KeyPair {
    secret: SecretKey,
    key_bits: usize,
}

impl KeyPair {
    /// Generates a key with an exactly `key_bits`-bit modulus from two
    /// primes of equal length, retrying until `gcd(pq, (p-1)(q-1)) = 1`.
    pub fn generate<R: RngCore + CryptoRng>(key_bits: usize, rng: &mut R) -> Result<Self> {
        if key_bits < 256 {
            return Err(PaillierError::KeyTooSmall(key_bits));
        }
        let half = key_bits / 2;
        loop {
            let p = glass_pumpkin::prime::from_rng(half, rng).expect("prime length is valid");
            let q = glass_pumpkin::prime::from_rng(key_bits - half, rng)
                .expect("prime length is valid");
            if p == q {
                continue;
            }
            let n = &p * &q;
            if n.bits() != key_bits as u64 {
                continue;
            }
            let p1 = &p - 1u32;
            let q1 = &q - 1u32;
            if !n.gcd(&(&p1 * &q1)).is_one() {
                continue;
            }
            let lambda = p1.lcm(&q1);
            let public = PublicKey::from_modulus(n);
            let u = public.g.modpow(&lambda, &public.n_squared);
            let l = (u - 1u32) / &public.n;
            let Some(mu) = l.modinv(&public.n) else {
                continue;
            };
            return Ok(Self {
                secret: SecretKey { lambda, mu, public },
                key_bits,
            });
        }
    }

    pub fn public(&self) -> &PublicKey {
        &self.secret.public
    }

    pub fn secret(&self) -> &SecretKey {
        &self.secret
    }

    pub fn key_bits(&self) -> usize {
        self.key_bits
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint> {
        self.secret.decrypt(c)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    key_id: u64,
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> u64 {
        self.key_id
    }

    /// 32-bit big-endian length followed by the big-endian magnitude.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        write_biguint(&self.value, out);
    }

    pub fn read_from(buf: &mut &[u8], key_id: u64) -> Result<Self> {
        Ok(Self {
            value: read_biguint(buf)?,
            key_id,
        })
    }
}

pub(crate) fn write_biguint(v: &BigUint, out: &mut Vec<u8>) {
    let bytes = if v.is_zero() { Vec::new() } else { v.to_bytes_be() };
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(&bytes);
}

pub(crate) fn read_biguint(buf: &mut &[u8]) -> Result<BigUint> {
    let len = read_u32(buf)? as usize;
    if buf.len() < len {
        return Err(PaillierError::Malformed("truncated big integer"));
    }
    let (head, tail) = buf.split_at(len);
    *buf = tail;
    Ok(BigUint::from_bytes_be(head))
}

pub(crate) fn read_u32(buf: &mut &[u8]) -> Result<u32> {
    if buf.len() < 4 {
        return Err(PaillierError::Malformed("truncated u32"));
    }
    let (head, tail) = buf.split_at(4);
    *buf = tail;
    Ok(u32::from_be_bytes(head.try_into().unwrap()))
}

pub(crate) fn read_u64(buf: &mut &[u8]) -> Result<u64> {
    if buf.len() < 8 {
        return Err(PaillierError::Malformed("truncated u64"));
    }
    let (head, tail) = buf.split_at(8);
    *buf = tail;
    Ok(u64::from_be_bytes(head.try_into().unwrap()))
}

/// Signed fixed-point codec over `Z_n`.
#[derive(Clone, Debug)]
pub struct FixedPointCodec {
    frac_bits: u32,
    magnitude_bits: u32,
    n: BigUint,
    half_n: BigUint,
}

pub const DEFAULT_FRAC_BITS: u32 = 40;
/// Assumed bound on `log2 |x|` of encrypted middle values, used by the
/// overflow check of plaintext-ciphertext products.
pub const DEFAULT_MAGNITUDE_BITS: u32 = 16;

impl FixedPointCodec {
    pub fn new(pk: &PublicKey, frac_bits: u32) -> Self {
        Self {
            frac_bits,
            magnitude_bits: DEFAULT_MAGNITUDE_BITS,
            n: pk.n.clone(),
            half_n: &pk.n >> 1,
        }
    }

    pub fn with_magnitude_bits(mut self, bits: u32) -> Self {
        self.magnitude_bits = bits;
        self
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn magnitude_bits(&self) -> u32 {
        self.magnitude_bits
    }

    pub fn modulus(&self) -> &BigUint {
        &self.n
    }

    /// `round(x · 2^scale)` as a signed integer.
    pub fn quantize(&self, x: f64, scale: u32) -> Result<BigInt> {
        let scaled = (x * 2f64.powi(scale as i32)).round();
        let v = BigInt::from_f64(scaled).ok_or(PaillierError::EncodeOverflow { value: x, scale })?;
        if v.magnitude() >= &self.half_n {
            return Err(PaillierError::EncodeOverflow { value: x, scale });
        }
        Ok(v)
    }

    /// Maps a signed integer with `|v| < n/2` into `Z_n`.
    pub fn to_residue(&self, v: &BigInt) -> BigUint {
        match v.sign() {
            Sign::Minus => &self.n - v.magnitude(),
            _ => v.magnitude().clone(),
        }
    }

    /// Inverse of [`to_residue`](Self::to_residue): residues above `n/2` are negative.
    pub fn from_residue(&self, v: &BigUint) -> BigInt {
        if v > &self.half_n {
            -BigInt::from_biguint(Sign::Plus, &self.n - v)
        } else {
            BigInt::from_biguint(Sign::Plus, v.clone())
        }
    }

    /// Encodes at the base scale `2^frac_bits`.
    pub fn encode(&self, x: f64) -> Result<BigUint> {
        self.encode_at(x, self.frac_bits)
    }

    pub fn encode_at(&self, x: f64, scale: u32) -> Result<BigUint> {
        Ok(self.to_residue(&self.quantize(x, scale)?))
    }

    pub fn decode(&self, v: &BigUint, scale_exp: u32) -> f64 {
        let signed = self.from_residue(v);
        let f = signed.to_f64().unwrap_or(f64::NAN);
        f * 2f64.powi(-(scale_exp as i32))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Output is `L · [M]`.
    Left,
    /// Output is `[M] · L`.
    Right,
}

/// Matrix of ciphertexts sharing one key and one power-of-two scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CipherMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<BigUint>,
    scale_exp: u32,
    key_id: u64,
}

impl CipherMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn scale_exp(&self) -> u32 {
        self.scale_exp
    }

    pub fn key_id(&self) -> u64 {
        self.key_id
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, r: usize, c: usize) -> Ciphertext {
        Ciphertext {
            value: self.cells[r * self.cols + c].clone(),
            key_id: self.key_id,
        }
    }

    pub fn row_cells(&self, r: usize) -> &[BigUint] {
        &self.cells[r * self.cols..(r + 1) * self.cols]
    }

    fn from_ciphertexts(rows: usize, cols: usize, cells: Vec<Ciphertext>, scale_exp: u32, key_id: u64) -> Self {
        debug_assert!(cells.iter().all(|c| c.key_id == key_id));
        Self {
            rows,
            cols,
            cells: cells.into_iter().map(|c| c.value).collect(),
            scale_exp,
            key_id,
        }
    }

    fn check_key(&self, pk: &PublicKey) -> Result<()> {
        if self.key_id != pk.key_id {
            return Err(PaillierError::KeyMismatch {
                expected: pk.key_id,
                got: self.key_id,
            });
        }
        Ok(())
    }

    /// Replaces the listed rows with the rows of `other`, in order.
    pub fn replace_rows(&mut self, idx: &[usize], other: &CipherMatrix) -> Result<()> {
        if other.rows != idx.len() || other.cols != self.cols {
            return Err(PaillierError::Shape("row replacement does not conform".into()));
        }
        if other.key_id != self.key_id || other.scale_exp != self.scale_exp {
            return Err(PaillierError::KeyMismatch {
                expected: self.key_id,
                got: other.key_id,
            });
        }
        for (k, &r) in idx.iter().enumerate() {
            let dst = r * self.cols;
            self.cells[dst..dst + self.cols].clone_from_slice(other.row_cells(k));
        }
        Ok(())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<CipherMatrix> {
        let mut cells = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            if r >= self.rows {
                return Err(PaillierError::Shape(format!("row {r} out of range")));
            }
            cells.extend_from_slice(self.row_cells(r));
        }
        Ok(Self {
            rows: idx.len(),
            cols: self.cols,
            cells,
            scale_exp: self.scale_exp,
            key_id: self.key_id,
        })
    }

    /// Header (rows, cols, scale_exp as u32; key_id as u64; all big-endian)
    /// followed by length-prefixed cells in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.cells.len() * 132);
        out.extend_from_slice(&(self.rows as u32).to_be_bytes());
        out.extend_from_slice(&(self.cols as u32).to_be_bytes());
        out.extend_from_slice(&self.scale_exp.to_be_bytes());
        out.extend_from_slice(&self.key_id.to_be_bytes());
        for c in &self.cells {
            write_biguint(c, &mut out);
        }
        out
    }

    pub fn from_bytes(mut buf: &[u8]) -> Result<Self> {
        let m = Self::read_from(&mut buf)?;
        if !buf.is_empty() {
            return Err(PaillierError::Malformed("trailing bytes after cipher matrix"));
        }
        Ok(m)
    }

    pub fn read_from(buf: &mut &[u8]) -> Result<Self> {
        let rows = read_u32(buf)? as usize;
        let cols = read_u32(buf)? as usize;
        let scale_exp = read_u32(buf)?;
        let key_id = read_u64(buf)?;
        let count = rows
            .checked_mul(cols)
            .ok_or(PaillierError::Malformed("cell count overflow"))?;
        // each cell needs at least its 4-byte length prefix
        if count > buf.len() / 4 {
            return Err(PaillierError::Malformed("cell count exceeds payload"));
        }
        let mut cells = Vec::with_capacity(count);
        for _ in 0..count {
            cells.push(read_biguint(buf)?);
        }
        Ok(Self {
            rows,
            cols,
            cells,
            scale_exp,
            key_id,
        })
    }
}

/// Encrypts every entry at the codec's base scale.
pub fn enc_matrix<R: RngCore + CryptoRng>(
    pk: &PublicKey,
    m: &DenseMatrix,
    codec: &FixedPointCodec,
    rng: &mut R,
) -> Result<CipherMatrix> {
    let mut cells = Vec::with_capacity(m.rows() * m.cols());
    for v in m.data() {
        cells.push(pk.encrypt(&codec.encode(*v)?, rng)?);
    }
    Ok(CipherMatrix::from_ciphertexts(
        m.rows(),
        m.cols(),
        cells,
        codec.frac_bits(),
        pk.key_id(),
    ))
}

/// Encrypts `m` at an explicit scale, e.g. noise that must match a product.
pub fn enc_matrix_at<R: RngCore + CryptoRng>(
    pk: &PublicKey,
    m: &DenseMatrix,
    codec: &FixedPointCodec,
    scale_exp: u32,
    rng: &mut R,
) -> Result<CipherMatrix> {
    let mut cells = Vec::with_capacity(m.rows() * m.cols());
    for v in m.data() {
        cells.push(pk.encrypt(&codec.encode_at(*v, scale_exp)?, rng)?);
    }
    Ok(CipherMatrix::from_ciphertexts(m.rows(), m.cols(), cells, scale_exp, pk.key_id()))
}

pub fn dec_matrix(sk: &SecretKey, cm: &CipherMatrix, codec: &FixedPointCodec) -> Result<DenseMatrix> {
    cm.check_key(sk.public())?;
    let mut data = Vec::with_capacity(cm.len());
    for r in 0..cm.rows {
        for c in 0..cm.cols {
            let m = sk.decrypt(&cm.cell(r, c))?;
            data.push(codec.decode(&m, cm.scale_exp));
        }
    }
    DenseMatrix::from_vec(cm.rows, cm.cols, data)
        .map_err(|_| PaillierError::Malformed("decoded value is not finite"))
}

fn bits_for(x: f64) -> u32 {
    if x <= 1.0 {
        0
    } else {
        x.log2().ceil() as u32
    }
}

/// Checks that a result at `scale` summing `terms` products with plaintext
/// factors bounded by `factor_max` fits below `n/2`.
fn check_window(codec: &FixedPointCodec, pk: &PublicKey, scale: u32, terms: usize, factor_max: f64) -> Result<()> {
    let need = u64::from(scale)
        + u64::from(codec.magnitude_bits)
        + u64::from(bits_for(terms as f64))
        + u64::from(bits_for(factor_max + 1.0));
    if need + 1 >= pk.bits() {
        return Err(PaillierError::ScaleOverflow {
            scale,
            magnitude_bits: codec.magnitude_bits,
            modulus_bits: pk.bits(),
        });
    }
    Ok(())
}

/// Computes `L·[M]` (left) or `[M]·L` (right) under encryption. The plaintext
/// factor is quantized at `frac_bits`, so the output scale grows by that much.
pub fn plain_cipher_product(
    pk: &PublicKey,
    plain: &DenseMatrix,
    cm: &CipherMatrix,
    side: Side,
    codec: &FixedPointCodec,
) -> Result<CipherMatrix> {
    cm.check_key(pk)?;
    let (out_rows, out_cols, inner) = match side {
        Side::Left => {
            if plain.cols() != cm.rows {
                return Err(PaillierError::Shape(format!(
                    "left factor {:?} does not conform with {:?}",
                    plain.shape(),
                    cm.shape()
                )));
            }
            (plain.rows(), cm.cols, cm.rows)
        }
        Side::Right => {
            if cm.cols != plain.rows() {
                return Err(PaillierError::Shape(format!(
                    "{:?} does not conform with right factor {:?}",
                    cm.shape(),
                    plain.shape()
                )));
            }
            (cm.rows, plain.cols(), cm.cols)
        }
    };
    let scale = cm.scale_exp + codec.frac_bits;
    check_window(codec, pk, scale, inner, plain.max_abs())?;

    let weights: Vec<BigInt> = plain
        .data()
        .iter()
        .map(|v| codec.quantize(*v, codec.frac_bits))
        .collect::<Result<_>>()?;
    let weight = |r: usize, c: usize| &weights[r * plain.cols() + c];

    // Inverses are computed once per input cell, only if a negative weight needs them.
    let mut inverses: Vec<Option<BigUint>> = vec![None; cm.cells.len()];
    let n2 = pk.n_squared();
    let term = |idx: usize, w: &BigInt, inverses: &mut Vec<Option<BigUint>>| -> Result<Option<BigUint>> {
        if w.is_zero() {
            return Ok(None);
        }
        let base = if w.is_negative() {
            if inverses[idx].is_none() {
                inverses[idx] = Some(
                    cm.cells[idx]
                        .modinv(n2)
                        .ok_or(PaillierError::InvalidCiphertext)?,
                );
            }
            inverses[idx].as_ref().unwrap()
        } else {
            &cm.cells[idx]
        };
        Ok(Some(base.modpow(w.magnitude(), n2)))
    };

    let mut cells = Vec::with_capacity(out_rows * out_cols);
    for i in 0..out_rows {
        for j in 0..out_cols {
            let mut acc = pk.trivial_zero().value;
            for k in 0..inner {
                let (idx, w) = match side {
                    Side::Left => (k * cm.cols + j, weight(i, k)),
                    Side::Right => (i * cm.cols + k, weight(k, j)),
                };
                if let Some(t) = term(idx, w, &mut inverses)? {
                    acc = acc * t % n2;
                }
            }
            cells.push(acc);
        }
    }
    Ok(CipherMatrix {
        rows: out_rows,
        cols: out_cols,
        cells,
        scale_exp: scale,
        key_id: cm.key_id,
    })
}

/// Multiplies every cell by `2^shift`, raising the scale exactly.
pub fn raise_scale(pk: &PublicKey, cm: &CipherMatrix, shift: u32) -> Result<CipherMatrix> {
    cm.check_key(pk)?;
    if shift == 0 {
        return Ok(cm.clone());
    }
    let k = BigUint::one() << shift;
    let cells = cm
        .cells
        .iter()
        .map(|c| c.modpow(&k, pk.n_squared()))
        .collect();
    Ok(CipherMatrix {
        cells,
        scale_exp: cm.scale_exp + shift,
        ..cm.clone()
    })
}

/// Cellwise homomorphic sum; scales are aligned by raising the smaller one.
pub fn add_matrices(pk: &PublicKey, a: &CipherMatrix, b: &CipherMatrix) -> Result<CipherMatrix> {
    combine(pk, a, b, false)
}

/// Cellwise homomorphic difference `a - b`.
pub fn sub_matrices(pk: &PublicKey, a: &CipherMatrix, b: &CipherMatrix) -> Result<CipherMatrix> {
    combine(pk, a, b, true)
}

fn combine(pk: &PublicKey, a: &CipherMatrix, b: &CipherMatrix, subtract: bool) -> Result<CipherMatrix> {
    a.check_key(pk)?;
    b.check_key(pk)?;
    if a.shape() != b.shape() {
        return Err(PaillierError::Shape(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let scale = a.scale_exp.max(b.scale_exp);
    let a = raise_scale(pk, a, scale - a.scale_exp)?;
    let b = raise_scale(pk, b, scale - b.scale_exp)?;
    let n2 = pk.n_squared();
    let cells = a
        .cells
        .iter()
        .zip(&b.cells)
        .map(|(x, y)| {
            let y = if subtract {
                y.modinv(n2).ok_or(PaillierError::InvalidCiphertext)?
            } else {
                y.clone()
            };
            Ok(x * y % n2)
        })
        .collect::<Result<_>>()?;
    Ok(CipherMatrix { cells, ..a })
}

/// Refreshes ciphertext randomness of every cell.
pub fn rerandomize_matrix<R: RngCore + CryptoRng>(pk: &PublicKey, cm: &CipherMatrix, rng: &mut R) -> Result<CipherMatrix> {
    cm.check_key(pk)?;
    let cells = cm
        .cells
        .iter()
        .map(|c| {
            pk.rerandomize(
                &Ciphertext {
                    value: c.clone(),
                    key_id: cm.key_id,
                },
                rng,
            )
            .map(|c| c.value)
        })
        .collect::<Result<_>>()?;
    Ok(CipherMatrix { cells, ..cm.clone() })
}

/// Multiplies every cell by the same plaintext real, quantized at `frac_bits`.
pub fn scale_by_real(pk: &PublicKey, cm: &CipherMatrix, factor: f64, codec: &FixedPointCodec) -> Result<CipherMatrix> {
    cm.check_key(pk)?;
    let scale = cm.scale_exp + codec.frac_bits;
    check_window(codec, pk, scale, 1, factor.abs())?;
    let w = codec.quantize(factor, codec.frac_bits)?;
    let n2 = pk.n_squared();
    let cells = cm
        .cells
        .iter()
        .map(|c| {
            if w.is_zero() {
                return Ok(BigUint::one());
            }
            let base = if w.is_negative() {
                c.modinv(n2).ok_or(PaillierError::InvalidCiphertext)?
            } else {
                c.clone()
            };
            Ok(base.modpow(w.magnitude(), n2))
        })
        .collect::<Result<_>>()?;
    Ok(CipherMatrix {
        cells,
        scale_exp: scale,
        ..cm.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use std::sync::OnceLock;

    fn key() -> &'static KeyPair {
        static KEY: OnceLock<KeyPair> = OnceLock::new();
        KEY.get_or_init(|| KeyPair::generate(512, &mut RngState::new(1)).unwrap())
    }

    #[test]
    fn keygen_properties() {
        let kp = key();
        assert_eq!(kp.public().bits(), 512);
        assert_eq!(kp.public().g(), &(kp.public().n() + 1u32));
        assert!(matches!(
            KeyPair::generate(128, &mut RngState::new(0)),
            Err(PaillierError::KeyTooSmall(128))
        ));
    }

    #[test]
    fn boundary_roundtrips() {
        let kp = key();
        let pk = kp.public();
        let mut rng = RngState::new(2);
        let zero = BigUint::zero();
        assert_eq!(kp.decrypt(&pk.encrypt(&zero, &mut rng).unwrap()).unwrap(), zero);
        let top = pk.n() - 1u32;
        assert_eq!(kp.decrypt(&pk.encrypt(&top, &mut rng).unwrap()).unwrap(), top);
        assert_eq!(
            pk.encrypt(pk.n(), &mut rng),
            Err(PaillierError::PlaintextOutOfRange)
        );
    }

    #[test]
    fn random_roundtrips() {
        let kp = key();
        let pk = kp.public();
        let mut rng = RngState::new(3);
        for _ in 0..100 {
            let m = rng.gen_biguint_below(pk.n());
            assert_eq!(kp.decrypt(&pk.encrypt(&m, &mut rng).unwrap()).unwrap(), m);
        }
    }

    #[test]
    fn encryption_is_probabilistic() {
        let kp = key();
        let pk = kp.public();
        let mut rng = RngState::new(4);
        let five = BigUint::from(5u32);
        let a = pk.encrypt(&five, &mut rng).unwrap();
        let b = pk.encrypt(&five, &mut rng).unwrap();
        assert_ne!(a, b);
        assert_eq!(kp.decrypt(&a).unwrap(), five);
    }

    #[test]
    fn homomorphic_examples() {
        let kp = key();
        let pk = kp.public();
        let mut rng = RngState::new(5);
        let enc = |v: u32, rng: &mut RngState| pk.encrypt(&BigUint::from(v), rng).unwrap();
        let c3 = enc(3, &mut rng);
        let c4 = enc(4, &mut rng);
        assert_eq!(kp.decrypt(&pk.add(&c3, &c4).unwrap()).unwrap(), BigUint::from(7u32));
        let c5 = enc(5, &mut rng);
        let s = |k: u32| kp.decrypt(&pk.scalar_mul(&c5, &BigUint::from(k)).unwrap()).unwrap();
        assert_eq!(s(3), BigUint::from(15u32));
        assert_eq!(s(0), BigUint::zero());
        assert_eq!(s(1), BigUint::from(5u32));
        let neg = pk.scalar_mul_signed(&c5, &BigInt::from(-2)).unwrap();
        assert_eq!(kp.decrypt(&neg).unwrap(), pk.n() - 10u32);
    }

    #[test]
    fn distributivity() {
        let kp = key();
        let pk = kp.public();
        let mut rng = RngState::new(6);
        for _ in 0..20 {
            let m = rng.gen_biguint_below(pk.n());
            let a = rng.gen_biguint_below(pk.n());
            let b = rng.gen_biguint_below(pk.n());
            let c = pk.encrypt(&m, &mut rng).unwrap();
            let lhs = pk
                .add(&pk.scalar_mul(&c, &a).unwrap(), &pk.scalar_mul(&c, &b).unwrap())
                .unwrap();
            let expected = (&a + &b) * &m % pk.n();
            assert_eq!(kp.decrypt(&lhs).unwrap(), expected);
        }
    }

    #[test]
    fn key_mismatch_detected() {
        let kp = key();
        let other = KeyPair::generate(256, &mut RngState::new(77)).unwrap();
        let mut rng = RngState::new(7);
        let c = other.public().encrypt(&BigUint::one(), &mut rng).unwrap();
        let d = kp.public().encrypt(&BigUint::one(), &mut rng).unwrap();
        assert!(matches!(
            kp.public().add(&c, &d),
            Err(PaillierError::KeyMismatch { .. })
        ));
        assert!(kp.decrypt(&c).is_err());
    }

    #[test]
    fn invalid_ciphertext_rejected() {
        let kp = key();
        let bad = Ciphertext {
            value: kp.public().n_squared().clone(),
            key_id: kp.public().key_id(),
        };
        assert_eq!(kp.decrypt(&bad), Err(PaillierError::InvalidCiphertext));
    }

    #[test]
    fn codec_examples() {
        let kp = key();
        let codec = FixedPointCodec::new(kp.public(), 16);
        assert_eq!(codec.encode(-1.5).unwrap(), kp.public().n() - 98304u32);
        assert_eq!(codec.encode(0.0).unwrap(), BigUint::zero());
        assert!(matches!(
            codec.encode_at(1.0, 600),
            Err(PaillierError::EncodeOverflow { .. })
        ));
    }

    #[test]
    fn codec_roundtrip_error_bound() {
        let kp = key();
        let codec = FixedPointCodec::new(kp.public(), 16);
        let mut rng = RngState::new(8);
        let tol = 2f64.powi(-16);
        for _ in 0..10_000 {
            let x = (rng.uniform() * 2.0 - 1.0) * 1e3;
            let d = codec.decode(&codec.encode(x).unwrap(), 16);
            assert!((d - x).abs() <= tol, "{x} -> {d}");
        }
    }

    #[test]
    fn matrix_roundtrip() {
        let kp = key();
        let pk = kp.public();
        let codec = FixedPointCodec::new(pk, DEFAULT_FRAC_BITS);
        let mut rng = RngState::new(9);
        let m = DenseMatrix::random_normal(3, 4, 2.0, &mut rng);
        let cm = enc_matrix(pk, &m, &codec, &mut rng).unwrap();
        assert_eq!(cm.scale_exp(), DEFAULT_FRAC_BITS);
        let back = dec_matrix(kp.secret(), &cm, &codec).unwrap();
        for (a, b) in m.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 2f64.powi(-40));
        }
        let z = DenseMatrix::zeros(2, 2);
        let zc = enc_matrix(pk, &z, &codec, &mut rng).unwrap();
        assert_eq!(dec_matrix(kp.secret(), &zc, &codec).unwrap(), z);
    }

    #[test]
    fn triple_product_matches_plaintext() {
        let kp = key();
        let pk = kp.public();
        let codec = FixedPointCodec::new(pk, DEFAULT_FRAC_BITS);
        let mut rng = RngState::new(10);
        let l = DenseMatrix::random_normal(4, 3, 1.0, &mut rng);
        let m = DenseMatrix::random_normal(3, 3, 1.0, &mut rng);
        let n = DenseMatrix::random_normal(3, 2, 1.0, &mut rng);
        let cm = enc_matrix(pk, &m, &codec, &mut rng).unwrap();
        let left = plain_cipher_product(pk, &l, &cm, Side::Left, &codec).unwrap();
        assert_eq!(left.scale_exp(), 80);
        let both = plain_cipher_product(pk, &n, &left, Side::Right, &codec).unwrap();
        assert_eq!(both.scale_exp(), 120);
        let got = dec_matrix(kp.secret(), &both, &codec).unwrap();
        let want = l.matmul(&m).unwrap().matmul(&n).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn identity_and_zero_rows() {
        let kp = key();
        let pk = kp.public();
        let codec = FixedPointCodec::new(pk, DEFAULT_FRAC_BITS);
        let mut rng = RngState::new(11);
        let m = DenseMatrix::random_normal(3, 2, 1.0, &mut rng);
        let cm = enc_matrix(pk, &m, &codec, &mut rng).unwrap();
        let id = plain_cipher_product(pk, &DenseMatrix::identity(3), &cm, Side::Left, &codec).unwrap();
        let got = dec_matrix(kp.secret(), &id, &codec).unwrap();
        for (a, b) in got.data().iter().zip(m.data()) {
            assert!((a - b).abs() <= 2f64.powi(-39));
        }
        let mut l = DenseMatrix::random_normal(2, 3, 1.0, &mut rng);
        l.row_mut(1).iter_mut().for_each(|v| *v = 0.0);
        let p = plain_cipher_product(pk, &l, &cm, Side::Left, &codec).unwrap();
        let got = dec_matrix(kp.secret(), &p, &codec).unwrap();
        assert_eq!(got.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn shape_and_scale_overflow_errors() {
        let kp = key();
        let pk = kp.public();
        let codec = FixedPointCodec::new(pk, DEFAULT_FRAC_BITS);
        let mut rng = RngState::new(12);
        let cm = enc_matrix(pk, &DenseMatrix::zeros(2, 2), &codec, &mut rng).unwrap();
        assert!(matches!(
            plain_cipher_product(pk, &DenseMatrix::zeros(3, 3), &cm, Side::Left, &codec),
            Err(PaillierError::Shape(_))
        ));
        let mut c = cm;
        let eye = DenseMatrix::identity(2);
        let mut err = None;
        for _ in 0..20 {
            match plain_cipher_product(pk, &eye, &c, Side::Left, &codec) {
                Ok(next) => c = next,
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        assert!(matches!(err, Some(PaillierError::ScaleOverflow { .. })));
    }

    #[test]
    fn add_sub_align_scales() {
        let kp = key();
        let pk = kp.public();
        let codec = FixedPointCodec::new(pk, DEFAULT_FRAC_BITS);
        let mut rng = RngState::new(13);
        let a = DenseMatrix::random_normal(2, 3, 1.0, &mut rng);
        let b = DenseMatrix::random_normal(2, 3, 1.0, &mut rng);
        let ca = enc_matrix(pk, &a, &codec, &mut rng).unwrap();
        let cb = enc_matrix_at(pk, &b, &codec, 100, &mut rng).unwrap();
        let diff = sub_matrices(pk, &ca, &cb).unwrap();
        assert_eq!(diff.scale_exp(), 100);
        let got = dec_matrix(kp.secret(), &diff, &codec).unwrap();
        let want = a.sub(&b).unwrap();
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() <= 1e-11);
        }
        let scaled = scale_by_real(pk, &ca, -0.25, &codec).unwrap();
        let got = dec_matrix(kp.secret(), &scaled, &codec).unwrap();
        for (x, y) in got.data().iter().zip(a.data()) {
            assert!((x + 0.25 * y).abs() <= 1e-11);
        }
    }

    #[test]
    fn serialization_roundtrip() {
        let kp = key();
        let pk = kp.public();
        let codec = FixedPointCodec::new(pk, DEFAULT_FRAC_BITS);
        let mut rng = RngState::new(14);
        let cm = enc_matrix(pk, &DenseMatrix::random_normal(2, 3, 1.0, &mut rng), &codec, &mut rng).unwrap();
        let bytes = cm.to_bytes();
        assert_eq!(CipherMatrix::from_bytes(&bytes).unwrap(), cm);
        assert!(CipherMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(CipherMatrix::from_bytes(&extra).is_err());
        let mut buf = Vec::new();
        let c = cm.cell(0, 0);
        c.write_to(&mut buf);
        assert_eq!(&buf[..4], &(c.value().to_bytes_be().len() as u32).to_be_bytes());
        let mut slice = &buf[..];
        assert_eq!(Ciphertext::read_from(&mut slice, c.key_id()).unwrap(), c);
    }
}
