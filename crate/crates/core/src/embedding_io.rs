//! Embedding matrices, the BCF1 on-disk format, and sign binarization.
//!
//! A BCF1 file is the 4-byte magic `BCF1`, a little-endian `u32` row count,
//! a little-endian `u32` width, then `count * dim` little-endian `f32` values
//! in row-major order. There is no padding and no footer.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const BCF_MAGIC: [u8; 4] = *b"BCF1";
pub const BCF_HEADER_LEN: usize = 12;

/// Feature width produced by the usual CLIP image towers.
pub const DEFAULT_DIM: usize = 512;

/// Rows whose norm is this close to 1 are not rescaled, so normalizing twice is exact.
const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// `count` rows of `dim` floats, stored row-major.
///
/// Construction only checks the shape. Finiteness is enforced at the I/O
/// boundary ([`load_matrix`], [`write_matrix`]) and by [`EmbeddingMatrix::normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    count: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(count: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        let expected = count
            .checked_mul(dim)
            .ok_or_else(|| Error::Config(format!("{count} x {dim} overflows")))?;
        if data.len() != expected {
            return Err(Error::Config(format!(
                "data length {} does not match {count} x {dim}",
                data.len()
            )));
        }
        Ok(EmbeddingMatrix { count, dim, data })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(0, dim, Vec::new())
    }

    /// Builds a matrix from equal-length rows. `dim` is only consulted when `rows` is empty.
    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::Data {
                    row: i,
                    reason: format!("row has {} entries, expected {dim}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, data)
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Returns the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            count: indices.len(),
            dim: self.dim,
            data,
        }
    }

    /// Fails with the index of the first row holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for (i, row) in self.rows().enumerate() {
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data {
                    row: i,
                    reason: format!("non-finite value {} at column {j}", row[j]),
                });
            }
        }
        Ok(())
    }

    /// Scales every row to unit L2 norm. Rows already within 1e-6 of unit norm
    /// are kept bit-for-bit.
    pub fn normalize(mut self) -> Result<Self> {
        self.check_finite()?;
        for (i, row) in self.data.chunks_exact_mut(self.dim).enumerate() {
            let norm = row
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(Error::Data {
                    row: i,
                    reason: "all-zero row cannot be normalized".into(),
                });
            }
            // already unit length: leave the stored floats untouched
            if (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE {
                continue;
            }
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
        Ok(self)
    }

    pub fn signature(&self, i: usize) -> BitSignature {
        binarize(self.row(i))
    }
}

/// Shorthand for [`EmbeddingMatrix::normalize`].
pub fn normalize(matrix: EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    matrix.normalize()
}

pub fn decode_matrix(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < BCF_MAGIC.len() || bytes[..4] != BCF_MAGIC {
        return Err(Error::format("missing BCF1 magic"));
    }
    if bytes.len() < BCF_HEADER_LEN {
        return Err(Error::Truncation {
            expected: BCF_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::format("BCF1 header declares zero width"));
    }

    let payload = &bytes[BCF_HEADER_LEN..];
    let expected = (count as u64) * (dim as u64) * 4;
    if (payload.len() as u64) < expected {
        return Err(Error::Truncation {
            expected: BCF_HEADER_LEN as u64 + expected,
            found: bytes.len() as u64,
        });
    }
    if (payload.len() as u64) > expected {
        return Err(Error::format(format!(
            "{} trailing bytes after {count} x {dim} payload",
            payload.len() as u64 - expected
        )));
    }

    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let matrix = EmbeddingMatrix::new(count, dim, data)?;
    matrix.check_finite()?;
    Ok(matrix)
}

pub fn encode_matrix(matrix: &EmbeddingMatrix) -> Result<Vec<u8>> {
    matrix.check_finite()?;
    let count =
        u32::try_from(matrix.count).map_err(|_| Error::format("row count exceeds u32 range"))?;
    let dim = u32::try_from(matrix.dim).map_err(|_| Error::format("width exceeds u32 range"))?;
    let mut out = Vec::with_capacity(BCF_HEADER_LEN + matrix.data.len() * 4);
    out.extend_from_slice(&BCF_MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for v in &matrix.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes)
}

/// Writes `matrix` as BCF1. Nothing is written if the matrix holds non-finite values.
pub fn write_matrix(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_matrix(matrix)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes)
        .and_then(|_| file.flush())
        .map_err(|e| Error::io(path, e))
}

/// Sign pattern of an embedding, packed LSB-first: bit `j` lives at byte `j / 8`,
/// position `j % 8`. Pad bits past `dim` are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitSignature {
    dim: usize,
    bits: Vec<u8>,
}

impl BitSignature {
    pub fn from_bytes(dim: usize, bits: Vec<u8>) -> Result<Self> {
        if dim == 0 || bits.len() != signature_len(dim) {
            return Err(Error::Config(format!(
                "{} bytes cannot hold a {dim}-bit signature",
                bits.len()
            )));
        }
        let used = dim % 8;
        if used != 0 && bits[bits.len() - 1] >> used != 0 {
            return Err(Error::Config("signature pad bits must be zero".into()));
        }
        Ok(BitSignature { dim, bits })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn bit(&self, j: usize) -> bool {
        assert!(
            j < self.dim,
            "bit {j} out of range for {}-bit signature",
            self.dim
        );
        self.bits[j / 8] >> (j % 8) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.bits.iter().map(|b| b.count_ones()).sum()
    }
}

#[inline]
pub fn signature_len(dim: usize) -> usize {
    dim.div_ceil(8)
}

/// Bit `j` is 0 when `z[j] < 0` and 1 otherwise, so zeros map to 1.
pub fn binarize(embedding: &[f32]) -> BitSignature {
    let mut bits = vec![0u8; signature_len(embedding.len())];
    binarize_into(embedding, &mut bits);
    BitSignature {
        dim: embedding.len(),
        bits,
    }
}

/// Allocation-free [`binarize`] for hot loops. `out` must hold exactly
/// `signature_len(embedding.len())` bytes.
#[inline]
pub fn binarize_into(embedding: &[f32], out: &mut [u8]) {
    debug_assert_eq!(out.len(), signature_len(embedding.len()));
    for (byte, chunk) in out.iter_mut().zip(embedding.chunks(8)) {
        let mut b = 0u8;
        for (j, &z) in chunk.iter().enumerate() {
            b |= u8::from(z >= 0.0) << j;
        }
        *byte = b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_matrix_is_header_only() {
        let m = EmbeddingMatrix::empty(512).unwrap();
        let bytes = encode_matrix(&m).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"BCF1");
        let back = decode_matrix(&bytes).unwrap();
        assert_eq!(back.count(), 0);
        assert_eq!(back.dim(), 512);
    }

    #[test]
    fn small_matrix_echoes_rows() {
        let m =
            EmbeddingMatrix::from_rows(4, &[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap();
        let back = decode_matrix(&encode_matrix(&m).unwrap()).unwrap();
        assert_eq!(back.row(0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(back.row(1), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn one_float_short_is_truncation() {
        let m = EmbeddingMatrix::from_rows(4, &[[1.0f32, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
            .unwrap();
        let mut bytes = encode_matrix(&m).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            decode_matrix(&bytes),
            Err(Error::Truncation { .. })
        ));
    }

    #[test]
    fn short_header_and_bad_magic() {
        assert!(matches!(
            decode_matrix(b"BCF1\x01\x00"),
            Err(Error::Truncation { .. })
        ));
        assert!(matches!(
            decode_matrix(b"BCF2\0\0\0\0\x04\0\0\0"),
            Err(Error::Format(_))
        ));
        assert!(matches!(decode_matrix(b"BC"), Err(Error::Format(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let m = EmbeddingMatrix::from_rows(2, &[[1.0f32, 0.0]]).unwrap();
        let mut bytes = encode_matrix(&m).unwrap();
        bytes.push(0);
        assert!(matches!(decode_matrix(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_load_reports_row() {
        let mut bytes = encode_matrix(
            &EmbeddingMatrix::from_rows(2, &[[1.0f32, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap(),
        )
        .unwrap();
        // row 1, column 1
        bytes[12 + 12..12 + 16].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_matrix(&bytes) {
            Err(Error::Data { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn write_refuses_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bcf");
        let m = EmbeddingMatrix::from_rows(2, &[[1.0f32, f32::INFINITY]]).unwrap();
        assert!(matches!(
            write_matrix(&m, &path),
            Err(Error::Data { row: 0, .. })
        ));
        assert!(!path.exists());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bcf");
        let m = EmbeddingMatrix::from_rows(3, &[[0.5f32, -1.25, 3.0], [-0.0, 7.5, 1e-30]]).unwrap();
        write_matrix(&m, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 12 + 6 * 4);
        assert_eq!(load_matrix(&path).unwrap(), m);
    }

    #[test]
    fn missing_file_is_io_error_with_path() {
        let err = load_matrix("/definitely/not/here.bcf").unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.bcf"));
    }

    #[test]
    fn normalize_three_four_five() {
        let m = EmbeddingMatrix::from_rows(2, &[[3.0f32, 4.0]])
            .unwrap()
            .normalize()
            .unwrap();
        assert!((m.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((m.row(0)[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let m = EmbeddingMatrix::from_rows(2, &[[1.0f32, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(m.normalize(), Err(Error::Data { row: 1, .. })));
    }

    #[test]
    fn binarize_maps_zero_to_one() {
        let s = binarize(&[-0.5, 0.2, 0.0, -0.1]);
        let bits: Vec<bool> = (0..4).map(|j| s.bit(j)).collect();
        assert_eq!(bits, [false, true, true, false]);
        assert_eq!(s.as_bytes(), &[0b0110]);
        // negative zero is not < 0
        assert!(binarize(&[-0.0]).bit(0));
    }

    #[test]
    fn all_negative_is_all_zero() {
        let s = binarize(&[-1.0; 13]);
        assert_eq!(s.as_bytes(), &[0, 0]);
    }

    #[test]
    fn pad_bits_stay_zero() {
        let s = binarize(&[1.0; 13]);
        assert_eq!(s.as_bytes(), &[0xff, 0x1f]);
        assert!(BitSignature::from_bytes(13, vec![0xff, 0x3f]).is_err());
        assert!(BitSignature::from_bytes(13, vec![0xff, 0x1f]).is_ok());
    }

    fn rows_strategy() -> impl Strategy<Value = (usize, Vec<f32>)> {
        (1usize..40, 0usize..6)
            .prop_flat_map(|(dim, n)| (Just(dim), prop::collection::vec(-1e6f32..1e6, dim * n)))
    }

    proptest! {
        #[test]
        fn encode_decode_identity((dim, data) in rows_strategy()) {
            let m = EmbeddingMatrix::new(data.len() / dim, dim, data).unwrap();
            let back = decode_matrix(&encode_matrix(&m).unwrap()).unwrap();
            prop_assert_eq!(back.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.count(), m.count());
        }

        #[test]
        fn binarize_scale_invariant(z in prop::collection::vec(-10f32..10.0, 1..80), c in 1e-3f32..1e3) {
            let scaled: Vec<f32> = z.iter().map(|v| v * c).collect();
            prop_assert_eq!(binarize(&z), binarize(&scaled));
        }

        #[test]
        fn normalize_idempotent_and_sign_preserving(z in prop::collection::vec(-10f32..10.0, 1..80)) {
            prop_assume!(z.iter().any(|&v| v != 0.0));
            let m = EmbeddingMatrix::from_rows(z.len(), std::slice::from_ref(&z)).unwrap();
            let once = m.normalize().unwrap();
            let norm: f64 = once.row(0).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-4);
            let twice = once.clone().normalize().unwrap();
            for (a, b) in once.row(0).iter().zip(twice.row(0)) {
                prop_assert!((a - b).abs() < 1e-7);
            }
            prop_assert_eq!(binarize(once.row(0)), binarize(&z));
        }
    }
}
