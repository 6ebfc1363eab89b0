use crate::{Error, Result};

/// What a feature sequence carries. The discriminant is the on-disk kind code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FeatureKind {
    Mel = 0,
    Upstream = 1,
    Stage = 2,
    Embedding = 3,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::Mel),
            1 => Some(FeatureKind::Upstream),
            2 => Some(FeatureKind::Stage),
            3 => Some(FeatureKind::Embedding),
            _ => None,
        }
    }
}

/// A `T x D` row-major matrix of frames with a frame shift in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f64>,
    dim: usize,
    frame_shift_ms: f64,
    kind: FeatureKind,
}

impl FeatureSequence {
    pub fn new(data: Vec<f64>, dim: usize, frame_shift_ms: f64, kind: FeatureKind) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("feature dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidInput(format!(
                "{} values do not form whole frames of dimension {dim}",
                data.len()
            )));
        }
        if !(frame_shift_ms.is_finite() && frame_shift_ms > 0.0) {
            return Err(Error::InvalidInput(format!("frame shift must be positive, got {frame_shift_ms}")));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at frame {}, dim {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self { data, dim, frame_shift_ms, kind })
    }

    pub fn from_rows<R: AsRef<[f64]>>(
        rows: &[R],
        dim: usize,
        frame_shift_ms: f64,
        kind: FeatureKind,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (t, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "frame {t} has dimension {}, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(data, dim, frame_shift_ms, kind)
    }

    pub fn empty(dim: usize, frame_shift_ms: f64, kind: FeatureKind) -> Result<Self> {
        Self::new(Vec::new(), dim, frame_shift_ms, kind)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_shift_ms(&self) -> f64 {
        self.frame_shift_ms
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: FeatureKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> Rows<'_> {
        Rows { data: &self.data, dim: self.dim }
    }

    pub(crate) fn same_shape(&self, other: &FeatureSequence, what: &str) -> Result<()> {
        if self.len() != other.len() || self.dim != other.dim {
            return Err(Error::InvalidInput(format!(
                "{what}: shape {}x{} does not match {}x{}",
                self.len(),
                self.dim,
                other.len(),
                other.dim
            )));
        }
        Ok(())
    }
}

/// Borrowed view of a set of equal-length vectors stored contiguously.
#[derive(Debug, Clone, Copy)]
pub struct Rows<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Rows<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidInput(format!(
                "{} values cannot be split into rows of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'a, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &'a [f64] {
        self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        let err = FeatureSequence::new(vec![0.0, f64::NAN], 2, 10.0, FeatureKind::Mel).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn rejects_ragged_rows() {
        let rows = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(FeatureSequence::from_rows(&rows, 2, 10.0, FeatureKind::Mel).is_err());
    }

    #[test]
    fn frame_access() {
        let seq = FeatureSequence::new((0..6).map(f64::from).collect(), 3, 12.5, FeatureKind::Stage).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.frame(1), &[3.0, 4.0, 5.0]);
        assert_eq!(seq.rows().row(0), &[0.0, 1.0, 2.0]);
    }
}
