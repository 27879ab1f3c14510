//! Named traversal over parameter tensors.
//!
//! Every parameter container implements [`ParamSet`]. The optimizer,
//! checkpoint writer, freeze checksums and parameter accounting all walk
//! tensors through this one trait, so they agree on names and order.

use crate::numerics::{Matrix, Vector};

pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, data| n += data.len());
        n
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, _, data| data.fill(value));
    }

    /// Every tensor name with its shape, in traversal order.
    fn shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, shape, _| out.push((name.to_string(), shape.to_vec())));
        out
    }

    /// Flattened copy of every scalar in traversal order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, data| out.extend_from_slice(data));
        out
    }

    /// Order-sensitive 64-bit FNV-1a hash of the raw bit patterns.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit("", &mut |_, _, data| {
            for v in data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        });
        h
    }

    /// `self += alpha · other`; both sides must have identical structure.
    fn add_scaled(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        let src = other.flatten();
        let mut offset = 0;
        self.visit_mut("", &mut |_, _, data| {
            for (d, s) in data.iter_mut().zip(&src[offset..]) {
                *d += alpha * s;
            }
            offset += data.len();
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl ParamSet for Vector {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(prefix, &[self.dim()], self.as_slice());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let dim = self.dim();
        f(prefix, &[dim], self.as_mut_slice());
    }
}

impl ParamSet for Matrix {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(prefix, &[self.rows(), self.cols()], self.as_slice());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = [self.rows(), self.cols()];
        f(prefix, &shape, self.as_mut_slice());
    }
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
