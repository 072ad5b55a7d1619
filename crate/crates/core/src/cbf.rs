//! Counting Bloom filter keyed by packed bit signatures.
//!
//! Each of the `k` hash functions is MurmurHash3 (x86, 32-bit) over the packed
//! signature bytes with its own seed, reduced modulo the counter count. Counters
//! saturate at `2^counter_bits - 1`. There is no removal, so an inserted
//! signature always checks true.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::embedding_io::BitSignature;
use crate::error::{Error, Result};
use crate::murmur3::murmur3_x86_32;

pub const CBF_MAGIC: [u8; 4] = *b"CBF1";
pub const CBF_VERSION: u32 = 1;

pub const DEFAULT_NUM_HASHES: usize = 10;
pub const DEFAULT_COUNTER_BITS: u32 = 32;

/// Counters per downstream item at the reference point: 10 000 counters for 3 500 items.
const SIZING_COUNTERS: f64 = 10_000.0;
const SIZING_ITEMS: f64 = 3_500.0;

/// Number of counters for a fingerprint of `downstream_count` items:
/// `round(10000 * n / 3500)`, rounded half away from zero and clamped to at least 1.
pub fn sized_for(downstream_count: usize) -> usize {
    let m = (SIZING_COUNTERS * downstream_count as f64 / SIZING_ITEMS).round();
    (m as usize).max(1)
}

/// Seeded MurmurHash3 variants, one per seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashFamily {
    seeds: Vec<u32>,
}

impl HashFamily {
    pub fn new(seeds: Vec<u32>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::Config("hash family needs at least one seed".into()));
        }
        for (i, s) in seeds.iter().enumerate() {
            if seeds[..i].contains(s) {
                return Err(Error::Config(format!("duplicate hash seed {s}")));
            }
        }
        Ok(HashFamily { seeds })
    }

    /// Seeds `0..k`.
    pub fn sequential(k: usize) -> Result<Self> {
        let k = u32::try_from(k).map_err(|_| Error::Config("too many hash functions".into()))?;
        Self::new((0..k).collect())
    }

    pub fn num_hashes(&self) -> usize {
        self.seeds.len()
    }

    pub fn seeds(&self) -> &[u32] {
        &self.seeds
    }

    #[inline]
    pub fn index(&self, bytes: &[u8], i: usize, m: usize) -> usize {
        murmur3_x86_32(bytes, self.seeds[i]) as usize % m
    }
}

impl Default for HashFamily {
    fn default() -> Self {
        HashFamily {
            seeds: (0..DEFAULT_NUM_HASHES as u32).collect(),
        }
    }
}

/// Index of the `i`-th hash of `signature` in a filter of `m` counters.
pub fn hash_index(family: &HashFamily, signature: &BitSignature, i: usize, m: usize) -> usize {
    family.index(signature.as_bytes(), i, m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FilterStats {
    pub size: usize,
    pub num_hashes: usize,
    pub counter_bits: u32,
    pub dim: usize,
    pub inserted: u64,
    pub occupied: usize,
    pub fpr_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountingBloomFilter {
    counter_bits: u32,
    dim: usize,
    counters: Vec<u32>,
    inserted: u64,
    family: HashFamily,
}

impl CountingBloomFilter {
    pub fn new(size: usize, counter_bits: u32, dim: usize, family: HashFamily) -> Result<Self> {
        if size == 0 || size > u32::MAX as usize {
            return Err(Error::Config(format!("filter size {size} out of range")));
        }
        if !(1..=32).contains(&counter_bits) {
            return Err(Error::Config(format!(
                "counter width {counter_bits} must be in 1..=32"
            )));
        }
        if dim == 0 {
            return Err(Error::Config("signature width must be positive".into()));
        }
        Ok(CountingBloomFilter {
            counter_bits,
            dim,
            counters: vec![0; size],
            inserted: 0,
            family,
        })
    }

    /// 32-bit counters and the default ten-seed family.
    pub fn with_size(size: usize, dim: usize) -> Result<Self> {
        Self::new(size, DEFAULT_COUNTER_BITS, dim, HashFamily::default())
    }

    pub fn size(&self) -> usize {
        self.counters.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn counter_bits(&self) -> u32 {
        self.counter_bits
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn family(&self) -> &HashFamily {
        &self.family
    }

    pub fn counters(&self) -> &[u32] {
        &self.counters
    }

    pub fn counter_max(&self) -> u32 {
        if self.counter_bits == 32 {
            u32::MAX
        } else {
            (1u32 << self.counter_bits) - 1
        }
    }

    fn check_dim(&self, signature: &BitSignature) -> Result<()> {
        if signature.dim() != self.dim {
            return Err(Error::Dim {
                expected: self.dim,
                actual: signature.dim(),
            });
        }
        Ok(())
    }

    pub fn update(&mut self, signature: &BitSignature) -> Result<()> {
        self.check_dim(signature)?;
        self.update_packed(signature.as_bytes());
        Ok(())
    }

    /// Inserts already-packed signature bytes. The caller guarantees the width.
    pub fn update_packed(&mut self, bytes: &[u8]) {
        let m = self.counters.len();
        let max = self.counter_max();
        for i in 0..self.family.num_hashes() {
            let c = &mut self.counters[self.family.index(bytes, i, m)];
            if *c < max {
                *c += 1;
            }
        }
        self.inserted += 1;
    }

    pub fn check(&self, signature: &BitSignature) -> Result<bool> {
        self.check_dim(signature)?;
        Ok(self.check_packed(signature.as_bytes()))
    }

    #[inline]
    pub fn check_packed(&self, bytes: &[u8]) -> bool {
        let m = self.counters.len();
        (0..self.family.num_hashes()).all(|i| self.counters[self.family.index(bytes, i, m)] > 0)
    }

    /// Minimum over the signature's counters; never below its true insertion count
    /// unless that count exceeds the counter capacity.
    pub fn estimate_frequency(&self, signature: &BitSignature) -> Result<u32> {
        self.check_dim(signature)?;
        let bytes = signature.as_bytes();
        let m = self.counters.len();
        Ok((0..self.family.num_hashes())
            .map(|i| self.counters[self.family.index(bytes, i, m)])
            .min()
            .unwrap_or(0))
    }

    pub fn stats(&self) -> FilterStats {
        let occupied = self.counters.iter().filter(|&&c| c > 0).count();
        let k = self.family.num_hashes();
        let fill = occupied as f64 / self.counters.len() as f64;
        FilterStats {
            size: self.counters.len(),
            num_hashes: k,
            counter_bits: self.counter_bits,
            dim: self.dim,
            inserted: self.inserted,
            occupied,
            fpr_estimate: fill.powi(k as i32),
        }
    }

    /// CBF1 encoding: magic, then little-endian `u32` version, size, hash count,
    /// counter width and signature width, the seeds as `u32`, `u64` insert count,
    /// and finally the counters as `u32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.family.num_hashes();
        let mut out = Vec::with_capacity(4 + 20 + 4 * k + 8 + 4 * self.counters.len());
        out.extend_from_slice(&CBF_MAGIC);
        for v in [
            CBF_VERSION,
            self.counters.len() as u32,
            k as u32,
            self.counter_bits,
            self.dim as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in self.family.seeds() {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.inserted.to_le_bytes());
        for c in &self.counters {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CBF_MAGIC {
            return Err(Error::format("missing CBF1 magic"));
        }
        let version = r.u32()?;
        if version != CBF_VERSION {
            return Err(Error::format(format!("unsupported CBF1 version {version}")));
        }
        let size = r.u32()? as usize;
        let k = r.u32()? as usize;
        let counter_bits = r.u32()?;
        let dim = r.u32()? as usize;
        // bound k by the bytes actually present before allocating
        if k == 0 || k > r.remaining() / 4 {
            return Err(Error::format(format!("implausible hash count {k}")));
        }
        let seeds = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let inserted = r.u64()?;
        if size > r.remaining() / 4 {
            return Err(Error::format(format!(
                "stream holds {} bytes, {size} counters need {}",
                r.remaining(),
                size * 4
            )));
        }
        let family = HashFamily::new(seeds).map_err(|e| Error::format(e.to_string()))?;
        let mut filter = CountingBloomFilter::new(size, counter_bits, dim, family)
            .map_err(|e| Error::format(e.to_string()))?;
        let max = filter.counter_max();
        for c in filter.counters.iter_mut() {
            *c = r.u32()?;
            if *c > max {
                return Err(Error::format(format!(
                    "counter value {c} exceeds {counter_bits}-bit width"
                )));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::format(format!("{} trailing bytes", r.remaining())));
        }
        filter.inserted = inserted;
        Ok(filter)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(format!(
                "truncated CBF1 stream at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
