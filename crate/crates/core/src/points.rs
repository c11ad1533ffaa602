use crate::error::{arg, Result};

/// A list of points in `R^d`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Points {
    dim: usize,
    coords: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return arg("point dimension must be positive");
        }
        if !coords.len().is_multiple_of(dim) {
            return arg(format!(
                "{} coordinates do not split into points of dimension {dim}",
                coords.len()
            ));
        }
        Ok(Self { dim, coords })
    }

    /// One-dimensional points.
    pub fn from_scalars(xs: Vec<f64>) -> Self {
        Self { dim: 1, coords: xs }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim: dim.max(1),
            coords: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Points `start..end` as a new list.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            dim: self.dim,
            coords: self.coords[start * self.dim..end * self.dim].to_vec(),
        }
    }

    pub fn push(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.dim, "dimension mismatch");
        self.coords.extend_from_slice(p);
    }

    /// Concatenation of several lists sharing one dimension.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Points>) -> Result<Self> {
        let mut out: Option<Points> = None;
        for p in parts {
            match out.as_mut() {
                None => out = Some(p.clone()),
                Some(acc) => {
                    if acc.dim != p.dim {
                        return arg("cannot concatenate points of different dimensions");
                    }
                    acc.coords.extend_from_slice(&p.coords);
                }
            }
        }
        out.ok_or_else(|| crate::Error::Argument("nothing to concatenate".into()))
    }
}
