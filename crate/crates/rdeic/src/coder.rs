//! Lossless range coding of quantized symbols.
//!
//! A carry-less range coder with 64-bit state, 16-bit probability
//! precision and byte-wise renormalization. The coder state math is
//! integer-only, so emitted bytes are identical on every platform.
//!
//! Symbols outside the modeled support are coded through an escape
//! symbol followed by the raw 16-bit value, which keeps the stream
//! lossless for arbitrary integers. Each coded section carries two
//! trailing CRC32 words: one over the coded bytes (any corruption is
//! detected before decoding) and one over the decoded symbols (an
//! encoder/decoder model mismatch is detected even with intact bytes).

use crate::element::phi;
use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 48;
const FLUSH_BYTES: usize = 8;

/// Default symbol support for quantized latent residuals.
pub const SUPPORT_LO: i32 = -64;
pub const SUPPORT_HI: i32 = 63;

/// Probability floor applied per modeled symbol before quantization.
pub const P_MIN: f64 = 1.0 / (1u64 << 16) as f64;

// ---------------------------------------------------------------------------
// CRC32 (IEEE), bitwise.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Crc32(u32);

impl Crc32 {
    pub fn new() -> Self {
        Crc32(0xFFFF_FFFF)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        let mut crc = self.0;
        for &b in bytes {
            crc ^= b as u32;
            for _ in 0..8 {
                crc = if crc & 1 != 0 {
                    (crc >> 1) ^ 0xEDB8_8320
                } else {
                    crc >> 1
                };
            }
        }
        self.0 = crc;
    }

    pub fn finish(&self) -> u32 {
        self.0 ^ 0xFFFF_FFFF
    }
}

impl Default for Crc32 {
    fn default() -> Self {
        Self::new()
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut c = Crc32::new();
    c.update(bytes);
    c.finish()
}

// ---------------------------------------------------------------------------
// CDF tables
// ---------------------------------------------------------------------------

/// Quantized cumulative frequencies over a bounded integer support, with
/// an optional escape slot appended after the last in-support symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    lo: i32,
    /// Cumulative frequencies; `cum[0] = 0`, `cum[len-1] = PROB_TOTAL`.
    cum: Vec<u32>,
    has_escape: bool,
}

impl CdfTable {
    /// Quantize a probability vector to integer frequencies summing to
    /// `PROB_TOTAL` with every entry >= 1 (largest-remainder rounding).
    fn from_pmf(lo: i32, pmf: &[f64], has_escape: bool) -> Result<Self> {
        let n = pmf.len();
        if n == 0 {
            return Err(Error::Coder("empty support".into()));
        }
        if n as u32 >= PROB_TOTAL {
            return Err(Error::Coder("support too large for precision".into()));
        }
        let sum: f64 = pmf.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::Coder("invalid probability mass".into()));
        }
        let ideal: Vec<f64> = pmf
            .iter()
            .map(|p| p / sum * PROB_TOTAL as f64)
            .collect();
        let mut freq: Vec<u32> = ideal.iter().map(|&x| (x.floor() as u32).max(1)).collect();
        let mut total: i64 = freq.iter().map(|&f| f as i64).sum();
        let target = PROB_TOTAL as i64;
        if total < target {
            // Hand out the deficit to the largest fractional remainders.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let ra = ideal[a] - ideal[a].floor();
                let rb = ideal[b] - ideal[b].floor();
                rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
            });
            let mut i = 0;
            while total < target {
                freq[order[i % n]] += 1;
                total += 1;
                i += 1;
            }
        } else if total > target {
            // Reclaim the overshoot from the smallest remainders first,
            // never dropping a frequency below 1.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let ra = ideal[a] - ideal[a].floor();
                let rb = ideal[b] - ideal[b].floor();
                ra.partial_cmp(&rb).unwrap().then(a.cmp(&b))
            });
            let mut i = 0;
            while total > target {
                let j = order[i % n];
                if freq[j] > 1 {
                    freq[j] -= 1;
                    total -= 1;
                }
                i += 1;
            }
        }
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in &freq {
            acc += f;
            cum.push(acc);
        }
        debug_assert_eq!(acc, PROB_TOTAL);
        Ok(CdfTable {
            lo,
            cum,
            has_escape,
        })
    }

    /// Discretized-Gaussian table over `[lo, hi]` with an escape slot
    /// carrying the tail mass.
    pub fn gaussian(mu: f64, sigma: f64, lo: i32, hi: i32) -> Result<Self> {
        if hi < lo {
            return Err(Error::Coder("empty support".into()));
        }
        if !(sigma > 0.0) || !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::Coder("invalid entropy parameters".into()));
        }
        let n = (hi - lo + 1) as usize;
        let mut pmf = Vec::with_capacity(n + 1);
        let mut in_support = 0.0;
        for s in lo..=hi {
            let x = s as f64 - mu;
            let mass = (phi((x + 0.5) / sigma) - phi((x - 0.5) / sigma)).max(P_MIN);
            in_support += mass;
            pmf.push(mass);
        }
        let tail = (1.0 - in_support).max(P_MIN);
        pmf.push(tail);
        Self::from_pmf(lo, &pmf, true)
    }

    /// Uniform table over `[0, n)` without escape (codebook indices).
    pub fn uniform(n: usize) -> Result<Self> {
        let pmf = vec![1.0; n];
        Self::from_pmf(0, &pmf, false)
    }

    pub fn support(&self) -> (i32, i32) {
        let regular = self.cum.len() - 1 - self.has_escape as usize;
        (self.lo, self.lo + regular as i32 - 1)
    }

    fn num_slots(&self) -> usize {
        self.cum.len() - 1
    }

    fn escape_slot(&self) -> Option<usize> {
        self.has_escape.then(|| self.num_slots() - 1)
    }

    fn slot_of_value(&self, v: i32) -> Option<usize> {
        let (lo, hi) = self.support();
        (v >= lo && v <= hi).then(|| (v - lo) as usize)
    }

    fn range_of_slot(&self, slot: usize) -> (u32, u32) {
        (self.cum[slot], self.cum[slot + 1] - self.cum[slot])
    }

    fn slot_of_cum(&self, target: u32) -> usize {
        // Largest slot whose cumulative start is <= target.
        match self.cum.binary_search(&target) {
            Ok(i) => i.min(self.num_slots() - 1),
            Err(i) => i - 1,
        }
    }

    /// Frequency of an in-support value divided by the total (diagnostics
    /// and table-accuracy tests).
    pub fn slot_probability(&self, v: i32) -> Option<f64> {
        self.slot_of_value(v)
            .map(|s| self.range_of_slot(s).1 as f64 / PROB_TOTAL as f64)
    }

    pub fn escape_probability(&self) -> Option<f64> {
        self.escape_slot()
            .map(|s| self.range_of_slot(s).1 as f64 / PROB_TOTAL as f64)
    }
}

fn uniform256() -> &'static CdfTable {
    use std::sync::OnceLock;
    static TABLE: OnceLock<CdfTable> = OnceLock::new();
    TABLE.get_or_init(|| CdfTable::uniform(256).expect("static table"))
}

// ---------------------------------------------------------------------------
// Core coder
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u64::MAX,
            out: Vec::new(),
        }
    }

    fn encode_span(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0 && cum + freq <= total);
        let r = self.range / total as u64;
        self.low = self.low.wrapping_add(r * cum as u64);
        self.range = r * freq as u64;
        self.normalize();
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                // Straddling a carry boundary with a small range: truncate
                // the range up to the next boundary so the top byte settles.
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range = self.range.wrapping_shl(8);
        }
    }

    pub fn encode(&mut self, table: &CdfTable, value: i32) -> Result<()> {
        if let Some(slot) = table.slot_of_value(value) {
            let (cum, freq) = table.range_of_slot(slot);
            self.encode_span(cum, freq, PROB_TOTAL);
            return Ok(());
        }
        let esc = table.escape_slot().ok_or_else(|| {
            Error::Coder(format!("value {value} outside support and no escape"))
        })?;
        let raw = i16::try_from(value)
            .map_err(|_| Error::Coder(format!("value {value} exceeds raw escape width")))?;
        let (cum, freq) = table.range_of_slot(esc);
        self.encode_span(cum, freq, PROB_TOTAL);
        let bytes = (raw as u16).to_le_bytes();
        for b in bytes {
            let (c, f) = uniform256().range_of_slot(b as usize);
            self.encode_span(c, f, PROB_TOTAL);
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..FLUSH_BYTES {
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            low: 0,
            range: u64::MAX,
            code: 0,
            input,
            pos: 0,
        };
        for _ in 0..FLUSH_BYTES {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        // Exhausted input feeds zeros; the section byte-CRC catches any
        // stream that was truncated or tampered with.
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn decode_slot(&mut self, table: &CdfTable) -> usize {
        let r = self.range / PROB_TOTAL as u64;
        let off = self.code.wrapping_sub(self.low) / r;
        let target = (off as u32).min(PROB_TOTAL - 1);
        let slot = table.slot_of_cum(target);
        let (cum, freq) = table.range_of_slot(slot);
        self.low = self.low.wrapping_add(r * cum as u64);
        self.range = r * freq as u64;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte() as u64;
            self.low <<= 8;
            self.range = self.range.wrapping_shl(8);
        }
        slot
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i32> {
        let slot = self.decode_slot(table);
        if Some(slot) == table.escape_slot() {
            let b0 = self.decode_slot(uniform256()) as u16;
            let b1 = self.decode_slot(uniform256()) as u16;
            let raw = u16::from_le_bytes([b0 as u8, b1 as u8]);
            return Ok(raw as i16 as i32);
        }
        Ok(table.lo + slot as i32)
    }

    pub fn consumed(&self) -> usize {
        self.pos.min(self.input.len())
    }
}

// ---------------------------------------------------------------------------
// Integrity-checked sections
// ---------------------------------------------------------------------------

fn symbol_crc(crc: &mut Crc32, s: i32) {
    crc.update(&s.to_le_bytes());
}

/// Streaming encoder for one payload section.
pub struct SectionEncoder {
    rc: RangeEncoder,
    crc_syms: Crc32,
}

impl SectionEncoder {
    pub fn new() -> Self {
        SectionEncoder {
            rc: RangeEncoder::new(),
            crc_syms: Crc32::new(),
        }
    }

    pub fn encode(&mut self, table: &CdfTable, value: i32) -> Result<()> {
        symbol_crc(&mut self.crc_syms, value);
        self.rc.encode(table, value)
    }

    /// Coded bytes followed by CRC32(coded bytes) and CRC32(symbols).
    pub fn finish(self) -> Vec<u8> {
        let mut bytes = self.rc.finish();
        let byte_crc = crc32(&bytes);
        bytes.extend_from_slice(&byte_crc.to_le_bytes());
        bytes.extend_from_slice(&self.crc_syms.finish().to_le_bytes());
        bytes
    }
}

impl Default for SectionEncoder {
    fn default() -> Self {
        Self::new()
    }
}

/// Streaming decoder for one payload section. The byte CRC is verified
/// up front; the symbol CRC is verified by [`SectionDecoder::finish`].
pub struct SectionDecoder<'a> {
    rc: RangeDecoder<'a>,
    crc_syms: Crc32,
    stored_sym_crc: u32,
}

impl<'a> SectionDecoder<'a> {
    pub fn new(section: &'a [u8]) -> Result<Self> {
        if section.len() < 8 {
            return Err(Error::CorruptBitstream("section too short".into()));
        }
        let (body, trailer) = section.split_at(section.len() - 8);
        let stored_byte_crc = u32::from_le_bytes(trailer[0..4].try_into().unwrap());
        let stored_sym_crc = u32::from_le_bytes(trailer[4..8].try_into().unwrap());
        if crc32(body) != stored_byte_crc {
            return Err(Error::CorruptBitstream("section byte checksum failed".into()));
        }
        Ok(SectionDecoder {
            rc: RangeDecoder::new(body),
            crc_syms: Crc32::new(),
            stored_sym_crc,
        })
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i32> {
        let v = self.rc.decode(table)?;
        symbol_crc(&mut self.crc_syms, v);
        Ok(v)
    }

    pub fn finish(self) -> Result<()> {
        if self.crc_syms.finish() != self.stored_sym_crc {
            return Err(Error::CorruptBitstream(
                "decoded symbols fail integrity check".into(),
            ));
        }
        Ok(())
    }
}

/// One-shot section encode with one table per symbol.
pub fn encode_stream(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::Coder("one table per symbol required".into()));
    }
    let mut enc = SectionEncoder::new();
    for (&s, &t) in symbols.iter().zip(tables.iter()) {
        enc.encode(t, s)?;
    }
    Ok(enc.finish())
}

/// One-shot section decode; `decode(encode(s)) == s` exactly.
pub fn decode_stream(bytes: &[u8], tables: &[&CdfTable], count: usize) -> Result<Vec<i32>> {
    if tables.len() != count {
        return Err(Error::Coder("one table per symbol required".into()));
    }
    let mut dec = SectionDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for &t in tables.iter() {
        out.push(dec.decode(t)?);
    }
    dec.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn crc32_known_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn gaussian_table_shape() {
        let t = CdfTable::gaussian(0.0, 1.0, -8, 8).unwrap();
        assert_eq!(t.support(), (-8, 8));
        // Mode bin at zero.
        let p0 = t.slot_probability(0).unwrap();
        for v in -8..=8 {
            assert!(t.slot_probability(v).unwrap() <= p0);
        }
        // Monotone cumulative values; exact total.
        assert!(t.cum.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*t.cum.last().unwrap(), PROB_TOTAL);
        // Symmetry up to integer rounding of frequencies.
        for v in 1..=8 {
            let a = t.slot_probability(v).unwrap();
            let b = t.slot_probability(-v).unwrap();
            assert!((a - b).abs() <= 2.0 / PROB_TOTAL as f64, "v={v}");
        }
    }

    #[test]
    fn table_pmf_accuracy_against_cdf_oracle() {
        for &(mu, sigma) in &[(0.0, 1.0), (0.3, 0.5), (-1.7, 3.0), (0.0, 0.11)] {
            let t = CdfTable::gaussian(mu, sigma, SUPPORT_LO, SUPPORT_HI).unwrap();
            // Oracle: the real-valued floored/normalized PMF.
            let mut pmf = Vec::new();
            let mut total = 0.0;
            for s in SUPPORT_LO..=SUPPORT_HI {
                let x = s as f64 - mu;
                let m = (phi((x + 0.5) / sigma) - phi((x - 0.5) / sigma)).max(P_MIN);
                total += m;
                pmf.push(m);
            }
            let tail = (1.0 - total).max(P_MIN);
            let norm = total + tail;
            for (i, s) in (SUPPORT_LO..=SUPPORT_HI).enumerate() {
                let got = t.slot_probability(s).unwrap();
                let want = pmf[i] / norm;
                assert!(
                    (got - want).abs() <= 2.0 / PROB_TOTAL as f64,
                    "mu={mu} sigma={sigma} s={s}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn near_certain_symbol_costs_only_flush() {
        let t = CdfTable::gaussian(0.0, 0.11, -64, 63).unwrap();
        let mut enc = RangeEncoder::new();
        enc.encode(&t, 0).unwrap();
        let bytes = enc.finish();
        assert!(bytes.len() <= 8, "len = {}", bytes.len());
    }

    #[test]
    fn uniform_symbols_hit_entropy_bound() {
        let t = CdfTable::uniform(256).unwrap();
        let n = 1_000_000usize;
        let mut rng = rng::seeded(99);
        let mut enc = RangeEncoder::new();
        let mut syms = Vec::with_capacity(n);
        for _ in 0..n {
            let s = rng::uniform_step(&mut rng, 0, 255) as i32;
            syms.push(s);
            enc.encode(&t, s).unwrap();
        }
        let bytes = enc.finish();
        assert!(bytes.len() >= n, "impossibly small: {}", bytes.len());
        assert!(
            bytes.len() <= n + n / 100 + 8,
            "too large: {}",
            bytes.len()
        );
        // And it must round-trip.
        let mut dec = RangeDecoder::new(&bytes);
        for (i, &s) in syms.iter().enumerate().take(4096) {
            assert_eq!(dec.decode(&t).unwrap(), s, "at {i}");
        }
    }

    #[test]
    fn escape_path_round_trips() {
        let t = CdfTable::gaussian(0.0, 2.0, -8, 8).unwrap();
        let values = [-3000, -65, -8, 0, 8, 64, 20000, 5, -1];
        let tables: Vec<&CdfTable> = values.iter().map(|_| &t).collect();
        let bytes = encode_stream(&values, &tables).unwrap();
        let back = decode_stream(&bytes, &tables, values.len()).unwrap();
        assert_eq!(back, values);
    }

    #[test]
    fn gaussian_round_trip_many_seeds() {
        for seed in 0..40u64 {
            let mut rng = rng::seeded(seed);
            let sigma = 0.3 + 3.0 * rng::uniform_f64(&mut rng);
            let t = CdfTable::gaussian(0.0, sigma, SUPPORT_LO, SUPPORT_HI).unwrap();
            let n = 2000;
            let mut syms = Vec::with_capacity(n);
            for _ in 0..n {
                let v = (rng::normal_f64(&mut rng) * sigma).round() as i32;
                syms.push(v);
            }
            let tables: Vec<&CdfTable> = syms.iter().map(|_| &t).collect();
            let bytes = encode_stream(&syms, &tables).unwrap();
            let back = decode_stream(&bytes, &tables, n).unwrap();
            assert_eq!(back, syms, "seed {seed}");
        }
    }

    #[test]
    fn corruption_is_detected() {
        let t = CdfTable::gaussian(0.0, 1.0, SUPPORT_LO, SUPPORT_HI).unwrap();
        let mut rng = rng::seeded(4);
        let syms: Vec<i32> = (0..500)
            .map(|_| rng::normal_f64(&mut rng).round() as i32)
            .collect();
        let tables: Vec<&CdfTable> = syms.iter().map(|_| &t).collect();
        let bytes = encode_stream(&syms, &tables).unwrap();
        for trial in 0..64 {
            let mut bad = bytes.clone();
            let pos = (trial * 7919) % bad.len();
            bad[pos] ^= 1 << (trial % 8);
            let r = decode_stream(&bad, &tables, syms.len());
            assert!(r.is_err(), "corruption at {pos} went undetected");
        }
    }

    #[test]
    fn mismatched_tables_fail_symbol_crc() {
        let t1 = CdfTable::gaussian(0.0, 1.0, -8, 8).unwrap();
        let t2 = CdfTable::gaussian(0.0, 2.5, -8, 8).unwrap();
        let mut rng = rng::seeded(11);
        let syms: Vec<i32> = (0..200)
            .map(|_| rng::normal_f64(&mut rng).round() as i32)
            .collect();
        let enc_tables: Vec<&CdfTable> = syms.iter().map(|_| &t1).collect();
        let bytes = encode_stream(&syms, &enc_tables).unwrap();
        let dec_tables: Vec<&CdfTable> = syms.iter().map(|_| &t2).collect();
        let r = decode_stream(&bytes, &dec_tables, syms.len());
        match r {
            Ok(decoded) => assert_ne!(decoded, syms, "silent wrong decode"),
            Err(Error::CorruptBitstream(_)) => {}
            Err(e) => panic!("unexpected error {e:?}"),
        }
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_arbitrary_symbols(
            values in prop::collection::vec(-200i32..200, 1..400),
            sigma in 0.2f64..5.0,
        ) {
            let t = CdfTable::gaussian(0.0, sigma, -32, 31).unwrap();
            let tables: Vec<&CdfTable> = values.iter().map(|_| &t).collect();
            let bytes = encode_stream(&values, &tables).unwrap();
            let back = decode_stream(&bytes, &tables, values.len()).unwrap();
            prop_assert_eq!(back, values);
        }

        #[test]
        fn table_masses_conserved(mu in -4.0f64..4.0, sigma in 0.11f64..6.0) {
            let t = CdfTable::gaussian(mu, sigma, SUPPORT_LO, SUPPORT_HI).unwrap();
            prop_assert_eq!(*t.cum.last().unwrap(), PROB_TOTAL);
            prop_assert!(t.cum.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
