use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A named contiguous slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub len: usize,
}

impl Segment {
    pub fn new(name: impl Into<String>, len: usize) -> Self {
        Segment { name: name.into(), len }
    }
}

/// Flat vector of real parameters with a named segment layout so nets and
/// coupling blocks can be reassembled from slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    /// All-zero vector with the given layout.
    pub fn zeros(segments: Vec<Segment>) -> Self {
        let len = segments.iter().map(|s| s.len).sum();
        ParamVector { values: vec![0.0; len], segments }
    }

    pub fn from_values(segments: Vec<Segment>, values: Vec<f64>) -> Result<Self> {
        let want: usize = segments.iter().map(|s| s.len).sum();
        if values.len() != want {
            return Err(Error::DimMismatch(format!(
                "param vector has {} values but layout wants {want}",
                values.len()
            )));
        }
        Ok(ParamVector { values, segments })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Zero vector with the same layout (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        ParamVector {
            values: vec![0.0; self.values.len()],
            segments: self.segments.clone(),
        }
    }

    /// Byte range of a named segment.
    pub fn segment_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut start = 0;
        for s in &self.segments {
            if s.name == name {
                return Some(start..start + s.len);
            }
            start += s.len;
        }
        None
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f64]> {
        self.segment_range(name).map(|r| &self.values[r])
    }

    /// Name of the segment holding flat index `idx`.
    pub fn segment_of(&self, idx: usize) -> &str {
        let mut start = 0;
        for s in &self.segments {
            if idx < start + s.len {
                return &s.name;
            }
            start += s.len;
        }
        "<out of range>"
    }

    /// Errors with the offending segment name if any value is non-finite.
    pub fn check_finite(&self) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(self.segment_of(i).to_string()));
            }
        }
        Ok(())
    }
}
