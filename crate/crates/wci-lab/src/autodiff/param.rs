//! Flat parameter storage partitioned into per-layer weight and bias blocks.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// One contiguous block of the flat vector: layer `layer`'s weight matrix
/// (rows×cols) or bias row (1×cols).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub layer: usize,
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous, non-overlapping partition of a flat array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    len: usize,
}

impl Layout {
    pub fn new(entries: Vec<LayoutEntry>) -> Result<Self> {
        let mut expected = 0;
        for e in &entries {
            if e.offset != expected {
                return Err(Error::Layout(format!(
                    "entry for layer {} ({:?}) starts at {} but previous block ends at {}",
                    e.layer, e.kind, e.offset, expected
                )));
            }
            if e.len() == 0 {
                return Err(Error::Layout(format!(
                    "entry for layer {} ({:?}) is empty",
                    e.layer, e.kind
                )));
            }
            expected += e.len();
        }
        Ok(Layout {
            entries,
            len: expected,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, layer: usize, kind: ParamKind) -> Option<&LayoutEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.kind == kind)
    }

    /// Number of distinct layers.
    pub fn layer_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.layer + 1)
            .max()
            .unwrap_or(0)
    }
}

/// Dense 64-bit parameter vector with an attached layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Layout,
    flat: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        let n = layout.len();
        ParamVector {
            layout,
            flat: vec![0.0; n],
        }
    }

    pub fn from_flat(layout: Layout, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != layout.len() {
            return Err(Error::Layout(format!(
                "flat length {} does not cover layout length {}",
                flat.len(),
                layout.len()
            )));
        }
        Ok(ParamVector { layout, flat })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn block(&self, entry: &LayoutEntry) -> &[f64] {
        &self.flat[entry.range()]
    }

    pub fn block_mut(&mut self, entry: &LayoutEntry) -> &mut [f64] {
        &mut self.flat[entry.range()]
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        debug_assert!(self.same_layout(other));
        self.flat
            .iter()
            .zip(other.flat.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_block_layout() -> Layout {
        Layout::new(vec![
            LayoutEntry {
                layer: 0,
                kind: ParamKind::Weight,
                rows: 2,
                cols: 3,
                offset: 0,
            },
            LayoutEntry {
                layer: 1,
                kind: ParamKind::Weight,
                rows: 3,
                cols: 1,
                offset: 6,
            },
        ])
        .unwrap()
    }

    #[test]
    fn blocks_cover_flat_exactly() {
        let layout = two_block_layout();
        assert_eq!(layout.len(), 9);
        assert_eq!(layout.layer_count(), 2);
    }

    #[test]
    fn gap_in_offsets_is_rejected() {
        let err = Layout::new(vec![LayoutEntry {
            layer: 0,
            kind: ParamKind::Weight,
            rows: 1,
            cols: 2,
            offset: 1,
        }]);
        assert!(err.is_err());
    }

    #[test]
    fn flatten_unflatten_round_trips_exactly() {
        let layout = two_block_layout();
        let flat: Vec<f64> = (0..9).map(|i| i as f64 * 0.5 - 2.0).collect();
        let pv = ParamVector::from_flat(layout.clone(), flat.clone()).unwrap();
        // Unflatten into per-entry blocks, then flatten back.
        let mut rebuilt = vec![0.0; layout.len()];
        for e in layout.entries() {
            rebuilt[e.range()].copy_from_slice(pv.block(e));
        }
        assert_eq!(rebuilt, flat);
    }

    #[test]
    fn wrong_flat_length_is_layout_error() {
        let layout = two_block_layout();
        assert!(ParamVector::from_flat(layout, vec![0.0; 5]).is_err());
    }
}
