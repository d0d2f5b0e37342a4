//! Carry-propagating range coder with a 32-bit state and big-endian output.
//!
//! The encoder keeps a 33-bit `low` and a 32-bit `range`. Each symbol
//! narrows the interval by `range / 2^16` times its integer frequency; once
//! the top byte of `range` is zero the coder shifts a byte out. A pending
//! `0xFF` run is held back until a possible carry resolves. `finish` writes
//! five bytes so the decoder can always prime its 32-bit window.

use super::cdf::{CdfTable, CDF_PRECISION};
use crate::error::{Error, Result};
use crate::transforms::LatentTensor;

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
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
            out: Vec::new(),
        }
    }

    /// Encodes the interval `[start, start + size)` of a `2^16` total.
    pub fn encode(&mut self, start: u32, size: u32) {
        debug_assert!(size > 0 && start + size <= 1 << CDF_PRECISION);
        let r = self.range >> CDF_PRECISION;
        self.low += u64::from(r) * u64::from(start);
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
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

    pub fn encode_symbol(&mut self, table: &CdfTable, value: i32) -> Result<()> {
        let idx = i64::from(value) - i64::from(table.offset);
        if idx < 0 || idx as usize >= table.alphabet_size() {
            return Err(Error::OutOfSupport {
                value: f64::from(value),
                low: f64::from(table.offset),
                high: (i64::from(table.offset) + table.alphabet_size() as i64 - 1) as f64,
            });
        }
        let idx = idx as usize;
        self.encode(table.cum[idx], table.freq(idx));
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            input,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | u32::from(d.next_byte()?);
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::Decode("range coder payload ended early".into()))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<i32> {
        let r = self.range >> CDF_PRECISION;
        let target = self.code / r;
        if target >= 1 << CDF_PRECISION {
            return Err(Error::Decode("range coder state outside the table".into()));
        }
        let idx = table.lookup(target);
        self.code -= r * table.cum[idx];
        self.range = r * table.freq(idx);
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
        }
        Ok(table.offset + idx as i32)
    }

    /// Bytes not yet consumed. A well-formed payload is consumed exactly.
    pub fn remaining(&self) -> usize {
        self.input.len() - self.pos
    }
}

/// Encodes `symbols` where symbol `i` uses `tables[table_of(i)]`.
pub fn range_encode(symbols: &[i32], tables: &[CdfTable], table_of: impl Fn(usize) -> usize) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        enc.encode_symbol(&tables[table_of(i)], s)?;
    }
    Ok(enc.finish())
}

pub fn range_decode(
    payload: &[u8],
    tables: &[CdfTable],
    count: usize,
    table_of: impl Fn(usize) -> usize,
) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(payload)?;
    let out = (0..count)
        .map(|i| dec.decode_symbol(&tables[table_of(i)]))
        .collect::<Result<Vec<_>>>()?;
    if dec.remaining() != 0 {
        return Err(Error::Decode(format!("{} trailing payload bytes", dec.remaining())));
    }
    Ok(out)
}

/// Channel-major coding of an integer-valued latent stack, one table per
/// channel.
pub fn encode_latent(y_hat: &LatentTensor, tables: &[CdfTable]) -> Result<Vec<u8>> {
    if tables.len() != y_hat.channels {
        return Err(Error::Dimension(format!(
            "{} tables for {} latent channels",
            tables.len(),
            y_hat.channels
        )));
    }
    let plane = y_hat.width * y_hat.height;
    let symbols = y_hat
        .data
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || !v.is_finite() {
                Err(Error::Invalid(format!("latent value {v} is not an integer")))
            } else {
                Ok(v as i32)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    range_encode(&symbols, tables, |i| i / plane)
}

pub fn decode_latent(
    payload: &[u8],
    tables: &[CdfTable],
    width: usize,
    height: usize,
) -> Result<LatentTensor> {
    let plane = width * height;
    let count = plane * tables.len();
    let symbols = range_decode(payload, tables, count, |i| i / plane.max(1))?;
    LatentTensor::new(width, height, tables.len(), symbols.into_iter().map(f64::from).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_model::{build_cdf_tables, EntropyConfig, FactorizedModel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(table: &CdfTable, rng: &mut ChaCha8Rng) -> i32 {
        table.offset + table.lookup(rng.gen_range(0..1 << CDF_PRECISION)) as i32
    }

    #[test]
    fn empty_input_round_trips() {
        let tables = build_cdf_tables(&FactorizedModel::init(EntropyConfig::default(), 1, 0).unwrap());
        let bytes = range_encode(&[], &tables, |_| 0).unwrap();
        assert!(bytes.len() <= 8);
        assert!(range_decode(&bytes, &tables, 0, |_| 0).unwrap().is_empty());
    }

    #[test]
    fn model_samples_round_trip_near_estimated_length() {
        let model = FactorizedModel::logistic(EntropyConfig::default(), 1, 1.8, -0.4).unwrap();
        let tables = build_cdf_tables(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let symbols: Vec<i32> = (0..100_000).map(|_| sample(&tables[0], &mut rng)).collect();
        let bytes = range_encode(&symbols, &tables, |_| 0).unwrap();
        assert_eq!(range_decode(&bytes, &tables, symbols.len(), |_| 0).unwrap(), symbols);
        let values: Vec<f64> = symbols.iter().map(|&s| f64::from(s)).collect();
        let estimate: f64 = model.channel_rates(&values, values.len()).unwrap()[0];
        assert!(
            (bytes.len() as f64) <= estimate / 8.0 * 1.01 + 64.0,
            "{} bytes vs estimate {} bits",
            bytes.len(),
            estimate
        );
    }

    #[test]
    fn degenerate_all_zero_payload_is_tiny() {
        let model = FactorizedModel::logistic(EntropyConfig::default(), 1, 1.0 / 60.0, 0.0).unwrap();
        let tables = build_cdf_tables(&model);
        // Symbol 0 gets 65536 - 63 counts, about 0.0014 bits each.
        let bytes = range_encode(&vec![0; 100_000], &tables, |_| 0).unwrap();
        assert!(bytes.len() < 200, "{}", bytes.len());
    }

    #[test]
    fn latent_round_trip_uses_one_table_per_channel() {
        let model = FactorizedModel::init(EntropyConfig::default(), 3, 5).unwrap();
        let tables = build_cdf_tables(&model);
        let y = LatentTensor::new(4, 2, 3, (0..24).map(|i| ((i * 5) % 11) as f64 - 5.0).collect()).unwrap();
        let bytes = encode_latent(&y, &tables).unwrap();
        assert_eq!(decode_latent(&bytes, &tables, 4, 2).unwrap(), y);
    }

    #[test]
    fn concatenated_payloads_decode_independently() {
        let tables = build_cdf_tables(&FactorizedModel::init(EntropyConfig::default(), 1, 5).unwrap());
        let a: Vec<i32> = (0..300).map(|i| (i % 9) - 4).collect();
        let b: Vec<i32> = (0..77).map(|i| (i % 3) - 1).collect();
        let pa = range_encode(&a, &tables, |_| 0).unwrap();
        let pb = range_encode(&b, &tables, |_| 0).unwrap();
        let joined = [pa.clone(), pb.clone()].concat();
        assert_eq!(range_decode(&joined[..pa.len()], &tables, a.len(), |_| 0).unwrap(), a);
        assert_eq!(range_decode(&joined[pa.len()..], &tables, b.len(), |_| 0).unwrap(), b);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let tables = build_cdf_tables(&FactorizedModel::init(EntropyConfig::default(), 1, 5).unwrap());
        let s: Vec<i32> = (0..500).map(|i| (i % 13) - 6).collect();
        let bytes = range_encode(&s, &tables, |_| 0).unwrap();
        assert!(range_decode(&bytes[..bytes.len() - 3], &tables, s.len(), |_| 0).is_err());
    }

    #[test]
    fn symbols_outside_alphabet_are_rejected() {
        let tables = build_cdf_tables(&FactorizedModel::init(EntropyConfig::default(), 1, 5).unwrap());
        assert!(matches!(range_encode(&[32], &tables, |_| 0), Err(Error::OutOfSupport { .. })));
    }

    proptest! {
        #[test]
        fn arbitrary_sequences_round_trip(seed in any::<u64>(), symbols in proptest::collection::vec(-32i32..32, 0..2000)) {
            let model = FactorizedModel::init(EntropyConfig::default(), 2, seed).unwrap();
            let tables = build_cdf_tables(&model);
            let bytes = range_encode(&symbols, &tables, |i| i % 2).unwrap();
            prop_assert_eq!(range_decode(&bytes, &tables, symbols.len(), |i| i % 2).unwrap(), symbols);
        }
    }
}
