use std::collections::HashSet;
use std::io::{self, Read, Write};

use super::AnalyticsError;

/// Magic bytes opening an `embeddings.bin` file.
pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"CREM";
pub const EMBEDDINGS_VERSION: u32 = 1;
/// Dimension produced by the reference embedding model.
pub const DEFAULT_EMBEDDING_DIMS: usize = 1536;

/// N x D row-major matrix of embeddings with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dims: usize,
    values: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dims: usize, values: Vec<f64>) -> Result<Self, AnalyticsError> {
        if ids.is_empty() {
            return Err(AnalyticsError::EmptyCorpus);
        }
        if dims == 0 || values.len() != ids.len() * dims {
            return Err(AnalyticsError::DimensionMismatch {
                expected: dims,
                got: if ids.is_empty() { 0 } else { values.len() / ids.len() },
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(AnalyticsError::NonFinite { row: pos / dims });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(AnalyticsError::DuplicateRowId(dup.clone()));
        }
        Ok(EmbeddingMatrix { ids, dims, values })
    }

    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, AnalyticsError> {
        let dims = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dims) {
            return Err(AnalyticsError::DimensionMismatch {
                expected: dims,
                got: bad.len(),
            });
        }
        if ids.len() != rows.len() {
            return Err(AnalyticsError::Format(format!("{} ids for {} rows", ids.len(), rows.len())));
        }
        EmbeddingMatrix::new(ids, dims, rows.into_iter().flatten().collect())
    }

    /// Rows with generated ids `0`, `1`, ...
    pub fn from_points(rows: Vec<Vec<f64>>) -> Result<Self, AnalyticsError> {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::from_rows(ids, rows)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dims)
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self, AnalyticsError> {
        if ids.len() != self.ids.len() {
            return Err(AnalyticsError::Format(format!("{} ids for {} rows", ids.len(), self.ids.len())));
        }
        self.ids = ids;
        Self::new(self.ids, self.dims, self.values)
    }

    /// Scales every row to unit L2 norm; zero rows are left unchanged.
    pub fn l2_normalized(mut self) -> Self {
        for row in self.values.chunks_exact_mut(self.dims) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        self
    }

    /// Writes the binary form: magic, version (u32), N (u64), D (u64), then
    /// little-endian f32 values row-major.
    pub fn write_bin(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(EMBEDDINGS_MAGIC)?;
        w.write_all(&EMBEDDINGS_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_rows() as u64).to_le_bytes())?;
        w.write_all(&(self.dims as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads the binary form; ids are not stored in the file and are supplied.
    pub fn read_bin(mut r: impl Read, ids: Vec<String>) -> Result<Self, AnalyticsError> {
        let mut header = [0u8; 24];
        r.read_exact(&mut header)
            .map_err(|e| AnalyticsError::Format(format!("embeddings header: {e}")))?;
        if &header[..4] != EMBEDDINGS_MAGIC {
            return Err(AnalyticsError::Format("bad embeddings magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != EMBEDDINGS_VERSION {
            return Err(AnalyticsError::Format(format!("unsupported embeddings version {version}")));
        }
        let n = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
        if n != ids.len() {
            return Err(AnalyticsError::Format(format!("file has {n} rows, {} ids supplied", ids.len())));
        }
        let mut raw = vec![0u8; n.checked_mul(d).and_then(|x| x.checked_mul(4)).ok_or_else(|| {
            AnalyticsError::Format("embeddings size overflows".into())
        })?];
        r.read_exact(&mut raw)
            .map_err(|e| AnalyticsError::Format(format!("embeddings body: {e}")))?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        EmbeddingMatrix::new(ids, d, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_ragged_nonfinite_duplicate_and_empty() {
        assert!(matches!(
            EmbeddingMatrix::from_points(vec![vec![1.0, 2.0], vec![1.0]]),
            Err(AnalyticsError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            EmbeddingMatrix::from_points(vec![vec![f64::NAN]]),
            Err(AnalyticsError::NonFinite { row: 0 })
        ));
        assert!(matches!(
            EmbeddingMatrix::from_rows(vec!["a".into(), "a".into()], vec![vec![1.0], vec![2.0]]),
            Err(AnalyticsError::DuplicateRowId(_))
        ));
        assert!(matches!(EmbeddingMatrix::from_points(vec![]), Err(AnalyticsError::EmptyCorpus)));
    }

    #[test]
    fn header_layout_is_fixed() {
        let m = EmbeddingMatrix::from_points(vec![vec![1.0, -2.0, 0.5]]).unwrap();
        let mut buf = Vec::new();
        m.write_bin(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CREM");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &3u64.to_le_bytes());
        assert_eq!(&buf[24..28], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 24 + 12);
    }

    #[test]
    fn read_rejects_bad_magic_and_row_count() {
        let m = EmbeddingMatrix::from_points(vec![vec![1.0]]).unwrap();
        let mut buf = Vec::new();
        m.write_bin(&mut buf).unwrap();
        assert!(EmbeddingMatrix::read_bin(&buf[..], vec![]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(EmbeddingMatrix::read_bin(&bad[..], vec!["0".into()]).is_err());
        assert!(EmbeddingMatrix::read_bin(&buf[..20], vec!["0".into()]).is_err());
    }

    #[test]
    fn normalization_gives_unit_rows() {
        let m = EmbeddingMatrix::from_points(vec![vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap().l2_normalized();
        assert_eq!(m.row(0), &[0.6, 0.8]);
        assert_eq!(m.row(1), &[0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn binary_roundtrip_preserves_f32_values(rows in proptest::collection::vec(proptest::collection::vec(-1e6f32..1e6, 4), 1..20)) {
            let rows64: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| f64::from(*v)).collect()).collect();
            let m = EmbeddingMatrix::from_points(rows64).unwrap();
            let mut buf = Vec::new();
            m.write_bin(&mut buf).unwrap();
            let back = EmbeddingMatrix::read_bin(&buf[..], m.ids().to_vec()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
