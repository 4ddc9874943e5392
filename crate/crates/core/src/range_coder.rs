//! Range coding of integer symbols against per-symbol quantized CDFs.
//!
//! 32-bit range, 16-bit frequency precision, byte-wise big-endian output
//! with carry propagation through a one-byte cache. Interval bounds are
//! computed as `floor(range * cum / 2^16)` with a 64-bit product, so the
//! truncation loss per symbol is at most one unit of a >= 2^24 range.
//!
//! Tables cover a finite window around the predicted mean. The two boundary
//! symbols carry the whole tail mass and act as escapes: after coding one,
//! the distance past the boundary follows as an order-0 Exp-Golomb code on
//! the coder's raw-bit path.

use crate::entropy_models::{gu_likelihood, normal_cdf, normal_sf, GaussianParams, SIGMA_MIN};
use crate::error::{Error, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;
/// Minimum half-width of a coding window.
pub const MIN_HALF_WIDTH: i64 = 16;
/// Keeps `2W + 1` well below `TOTAL_FREQ` so every symbol can get freq >= 1.
pub const MAX_HALF_WIDTH: i64 = 16_384;

const TOP: u32 = 1 << 24;
const MAX_GOLOMB_ZEROS: u32 = 40;

/// Quantized distribution over `offset .. offset + freqs.len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    pub offset: i64,
    pub freqs: Vec<u32>,
    pub escape_low: bool,
    pub escape_high: bool,
    cum: Vec<u32>,
}

impl CdfTable {
    pub fn new(offset: i64, freqs: Vec<u32>, escape_low: bool, escape_high: bool) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::InvalidArgument("empty frequency table".into()));
        }
        if freqs.contains(&0) {
            return Err(Error::InvalidArgument("zero frequency in table".into()));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for &f in &freqs {
            acc += u64::from(f);
            if acc > u64::from(TOTAL_FREQ) {
                break;
            }
            cum.push(acc as u32);
        }
        if acc != u64::from(TOTAL_FREQ) {
            return Err(Error::InvalidArgument(format!(
                "frequencies sum to {acc}, expected {TOTAL_FREQ}"
            )));
        }
        Ok(Self {
            offset,
            freqs,
            escape_low,
            escape_high,
            cum,
        })
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn low(&self) -> i64 {
        self.offset
    }

    pub fn high(&self) -> i64 {
        self.offset + self.freqs.len() as i64 - 1
    }

    /// Probability the table assigns to in-window symbol index `i`.
    pub fn prob(&self, i: usize) -> f64 {
        f64::from(self.freqs[i]) / f64::from(TOTAL_FREQ)
    }
}

/// Window half-width for a given scale.
pub fn half_width(sigma: f64) -> i64 {
    ((8.0 * sigma).ceil() as i64).clamp(MIN_HALF_WIDTH, MAX_HALF_WIDTH)
}

/// Discretizes one Gaussian-convolved-with-uniform element.
pub fn build_table(mu: f64, sigma: f64) -> Result<CdfTable> {
    if !(sigma >= SIGMA_MIN * (1.0 - 1e-9)) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::ScaleBelowFloor {
            sigma,
            floor: SIGMA_MIN,
        });
    }
    let centre = mu.round() as i64;
    let w = half_width(sigma);
    let lo = centre - w;
    let hi = centre + w;
    let n = (2 * w + 1) as usize;
    let mut freqs = Vec::with_capacity(n);
    for i in 0..n {
        let k = lo + i as i64;
        let p = if k == lo {
            normal_cdf((k as f64 + 0.5 - mu) / sigma)
        } else if k == hi {
            normal_sf((k as f64 - 0.5 - mu) / sigma)
        } else {
            gu_likelihood(k as f64, mu, sigma)
        };
        let f = (p * f64::from(TOTAL_FREQ)).floor() as u64;
        freqs.push(f.clamp(1, u64::from(TOTAL_FREQ)) as u32);
    }
    repair_total(&mut freqs);
    CdfTable::new(lo, freqs, true, true)
}

/// Forces `sum(freqs) == TOTAL_FREQ` while keeping each entry >= 1: a deficit
/// goes to the most probable symbol, a surplus is taken from the largest
/// entries.
fn repair_total(freqs: &mut [u32]) {
    let sum: i64 = freqs.iter().map(|&f| i64::from(f)).sum();
    let mut diff = i64::from(TOTAL_FREQ) - sum;
    let argmax = |f: &[u32]| {
        f.iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap()
    };
    if diff > 0 {
        let i = argmax(freqs);
        freqs[i] += diff as u32;
        return;
    }
    while diff < 0 {
        let i = argmax(freqs);
        let avail = i64::from(freqs[i]) - 1;
        debug_assert!(avail > 0, "window wider than the frequency budget");
        let take = (-diff).min((avail / 2).max(1));
        freqs[i] -= take as u32;
        diff += take;
    }
}

/// Ideal code length of `x` under `table`: its share of the frequency
/// budget plus any Exp-Golomb bypass bits.
pub fn symbol_bits(x: i64, table: &CdfTable) -> f64 {
    let (idx, overflow) = if x <= table.low() && table.escape_low {
        (0, Some(table.low() - x))
    } else if x >= table.high() && table.escape_high {
        (table.len() - 1, Some(x - table.high()))
    } else {
        ((x - table.low()) as usize, None)
    };
    let golomb = overflow.map_or(0.0, |n| f64::from(2 * (64 - (n as u64 + 1).leading_zeros()) - 1));
    f64::from(PRECISION_BITS) - f64::from(table.freqs[idx]).log2() + golomb
}

/// Sum of [`symbol_bits`] over a feature: what the coder spends before its
/// flush bytes.
pub fn feature_code_bits(values: &[i32], params: &GaussianParams) -> Result<f64> {
    if values.len() != params.len() {
        return Err(Error::LengthMismatch {
            what: "feature/parameter count".into(),
            expected: params.len(),
            actual: values.len(),
        });
    }
    let (mu, sigma) = (params.mu.data(), params.sigma.data());
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| Ok(symbol_bits(i64::from(v), &build_table(mu[i], sigma[i])?)))
        .sum()
}

pub fn build_coding_tables(params: &GaussianParams) -> Result<Vec<CdfTable>> {
    params
        .mu
        .data()
        .iter()
        .zip(params.sigma.data())
        .map(|(&m, &s)| build_table(m, s))
        .collect()
}

/// Encoded bytes. The stream is not self-delimiting; the symbol count and
/// byte length travel in the enclosing container.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bitstream {
    pub bytes: Vec<u8>,
}

impl Bitstream {
    pub fn bit_len(&self) -> usize {
        self.bytes.len() * 8
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    skip_leading: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            skip_leading: true,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, b: u8) {
        // The first cached byte is always zero; both sides drop it.
        if self.skip_leading {
            self.skip_leading = false;
            debug_assert_eq!(b, 0);
        } else {
            self.out.push(b);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn encode_interval(&mut self, cum: u32, freq: u32, shift: u32) {
        let r = u64::from(self.range);
        let lo = (r * u64::from(cum)) >> shift;
        let hi = (r * u64::from(cum + freq)) >> shift;
        self.low += lo;
        self.range = (hi - lo) as u32;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Up to 16 equiprobable bits.
    pub fn encode_bits(&mut self, value: u32, nbits: u32) {
        debug_assert!(nbits <= 16 && (nbits == 16 || value < (1 << nbits)));
        if nbits == 0 {
            return;
        }
        self.encode_interval(value, 1, nbits);
    }

    fn encode_bits_wide(&mut self, value: u64, nbits: u32) {
        let mut remaining = nbits;
        while remaining > 0 {
            let take = remaining.min(16);
            remaining -= take;
            let chunk = ((value >> remaining) & ((1u64 << take) - 1)) as u32;
            self.encode_bits(chunk, take);
        }
    }

    pub fn encode_golomb(&mut self, n: u64) {
        let m = n + 1;
        let len = 64 - m.leading_zeros();
        // The decoder reads the prefix bit by bit, so it is coded that way.
        for _ in 1..len {
            self.encode_bits(0, 1);
        }
        self.encode_bits(1, 1);
        self.encode_bits_wide(m & !(1u64 << (len - 1)), len - 1);
    }

    pub fn encode_symbol(&mut self, x: i64, table: &CdfTable) -> Result<()> {
        let last = table.len() - 1;
        let (idx, overflow) = if x <= table.low() && table.escape_low {
            (0, Some((table.low() - x) as u64))
        } else if x >= table.high() && table.escape_high {
            (last, Some((x - table.high()) as u64))
        } else if x < table.low() || x > table.high() {
            return Err(Error::InvalidArgument(format!(
                "symbol {x} outside table window [{}, {}] without escape",
                table.low(),
                table.high()
            )));
        } else {
            ((x - table.low()) as usize, None)
        };
        self.encode_interval(table.cum[idx], table.freqs[idx], PRECISION_BITS);
        if let Some(n) = overflow {
            self.encode_golomb(n);
        }
        Ok(())
    }

    pub fn finish(mut self) -> Bitstream {
        for _ in 0..5 {
            self.shift_low();
        }
        Bitstream { bytes: self.out }
    }
}

pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            bytes,
            pos: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte()?);
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = self.bytes.get(self.pos).copied().ok_or_else(|| {
            Error::Truncated(format!("range decoder ran out of input after {} bytes", self.pos))
        })?;
        self.pos += 1;
        Ok(b)
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }

    fn target(&self, shift: u32) -> u64 {
        let x = u64::from(self.code);
        (((x + 1) << shift) - 1) / u64::from(self.range)
    }

    fn consume(&mut self, cum: u32, freq: u32, shift: u32) -> Result<()> {
        let r = u64::from(self.range);
        let lo = (r * u64::from(cum)) >> shift;
        let hi = (r * u64::from(cum + freq)) >> shift;
        self.code -= lo as u32;
        self.range = (hi - lo) as u32;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
        }
        Ok(())
    }

    pub fn decode_bits(&mut self, nbits: u32) -> Result<u32> {
        if nbits == 0 {
            return Ok(0);
        }
        let v = self.target(nbits) as u32;
        self.consume(v, 1, nbits)?;
        Ok(v)
    }

    fn decode_bits_wide(&mut self, nbits: u32) -> Result<u64> {
        let mut v = 0u64;
        let mut remaining = nbits;
        while remaining > 0 {
            let take = remaining.min(16);
            remaining -= take;
            v = (v << take) | u64::from(self.decode_bits(take)?);
        }
        Ok(v)
    }

    pub fn decode_golomb(&mut self) -> Result<u64> {
        let mut zeros = 0;
        while self.decode_bits(1)? == 0 {
            zeros += 1;
            if zeros > MAX_GOLOMB_ZEROS {
                return Err(Error::InvalidArgument("corrupt Exp-Golomb prefix".into()));
            }
        }
        let rest = self.decode_bits_wide(zeros)?;
        Ok(((1u64 << zeros) | rest) - 1)
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<i64> {
        let t = self.target(PRECISION_BITS) as u32;
        // largest index with cum[idx] <= t
        let idx = table.cum.partition_point(|&c| c <= t) - 1;
        self.consume(table.cum[idx], table.freqs[idx], PRECISION_BITS)?;
        let last = table.len() - 1;
        let value = if idx == 0 && table.escape_low {
            table.low() - self.decode_golomb()? as i64
        } else if idx == last && table.escape_high {
            table.high() + self.decode_golomb()? as i64
        } else {
            table.low() + idx as i64
        };
        Ok(value)
    }
}

/// Encodes `symbols[i]` with `tables[i]`.
pub fn rc_encode(symbols: &[i32], tables: &[CdfTable]) -> Result<Bitstream> {
    if symbols.len() != tables.len() {
        return Err(Error::LengthMismatch {
            what: "symbol/table count".into(),
            expected: tables.len(),
            actual: symbols.len(),
        });
    }
    rc_encode_with(symbols, |i, _| Ok(tables[i].clone()))
}

/// Encodes with tables produced on demand; the provider sees the index and
/// every symbol already coded, so tables may depend on the decoded prefix.
pub fn rc_encode_with<F>(symbols: &[i32], mut provider: F) -> Result<Bitstream>
where
    F: FnMut(usize, &[i32]) -> Result<CdfTable>,
{
    let mut enc = RangeEncoder::new();
    for (i, &x) in symbols.iter().enumerate() {
        let table = provider(i, &symbols[..i])?;
        enc.encode_symbol(i64::from(x), &table)?;
    }
    Ok(enc.finish())
}

pub fn rc_decode(stream: &Bitstream, tables: &[CdfTable], n: usize) -> Result<Vec<i32>> {
    if n > tables.len() {
        return Err(Error::LengthMismatch {
            what: "symbol/table count".into(),
            expected: tables.len(),
            actual: n,
        });
    }
    rc_decode_with(stream, n, |i, _| Ok(tables[i].clone()))
}

pub fn rc_decode_with<F>(stream: &Bitstream, n: usize, mut provider: F) -> Result<Vec<i32>>
where
    F: FnMut(usize, &[i32]) -> Result<CdfTable>,
{
    let mut dec = RangeDecoder::new(&stream.bytes)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let table = provider(i, &out)?;
        let v = dec.decode_symbol(&table)?;
        let v = i32::try_from(v)
            .map_err(|_| Error::InvalidArgument(format!("decoded value {v} exceeds 32 bits")))?;
        out.push(v);
    }
    Ok(out)
}

/// Encodes a feature under per-element Gaussian parameters.
pub fn encode_feature(values: &[i32], params: &GaussianParams) -> Result<Bitstream> {
    if values.len() != params.len() {
        return Err(Error::LengthMismatch {
            what: "feature/parameter count".into(),
            expected: params.len(),
            actual: values.len(),
        });
    }
    let (mu, sigma) = (params.mu.data(), params.sigma.data());
    rc_encode_with(values, |i, _| build_table(mu[i], sigma[i]))
}

pub fn decode_feature(stream: &Bitstream, params: &GaussianParams) -> Result<Vec<i32>> {
    let (mu, sigma) = (params.mu.data(), params.sigma.data());
    rc_decode_with(stream, params.len(), |i, _| build_table(mu[i], sigma[i]))
}
