//! Product-form basis inverse: `B⁻¹ = Eₖ ⋯ E₁` where each `E` is an
//! elementary column ("eta") matrix.

#[derive(Debug, Clone)]
pub(crate) struct Eta {
    pivot: usize,
    pivot_val: f64,
    others: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct EtaFile {
    etas: Vec<Eta>,
    nnz: usize,
}

impl EtaFile {
    pub fn clear(&mut self) {
        self.etas.clear();
        self.nnz = 0;
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    /// Appends the eta that pivots the transformed column `alpha` on row `pivot`.
    pub fn push_from_column(&mut self, alpha: &[f64], pivot: usize) {
        let ap = alpha[pivot];
        debug_assert!(ap != 0.0);
        let others: Vec<(usize, f64)> = alpha
            .iter()
            .enumerate()
            .filter(|&(i, &v)| i != pivot && v != 0.0)
            .map(|(i, &v)| (i, -v / ap))
            .collect();
        self.push(pivot, 1.0 / ap, others);
    }

    /// Same as [`push_from_column`] for a column given sparsely.
    pub fn push_from_sparse(&mut self, alpha: &[(usize, f64)], pivot: usize, ap: f64) {
        let others: Vec<(usize, f64)> = alpha
            .iter()
            .filter(|&&(i, v)| i != pivot && v != 0.0)
            .map(|&(i, v)| (i, -v / ap))
            .collect();
        self.push(pivot, 1.0 / ap, others);
    }

    fn push(&mut self, pivot: usize, pivot_val: f64, others: Vec<(usize, f64)>) {
        self.nnz += others.len() + 1;
        self.etas.push(Eta { pivot, pivot_val, others });
    }

    /// `v ← B⁻¹ v`.
    pub fn ftran(&self, v: &mut [f64]) {
        for eta in &self.etas {
            let t = v[eta.pivot];
            if t != 0.0 {
                v[eta.pivot] = eta.pivot_val * t;
                for &(i, e) in &eta.others {
                    v[i] += e * t;
                }
            }
        }
    }

    /// FTRAN that records newly nonzero positions in `touched`.
    pub fn ftran_tracked(&self, v: &mut [f64], marker: &mut [bool], touched: &mut Vec<usize>) {
        for eta in &self.etas {
            let t = v[eta.pivot];
            if t != 0.0 {
                v[eta.pivot] = eta.pivot_val * t;
                for &(i, e) in &eta.others {
                    v[i] += e * t;
                    if !marker[i] {
                        marker[i] = true;
                        touched.push(i);
                    }
                }
            }
        }
    }

    /// `wᵀ ← wᵀ B⁻¹`.
    pub fn btran(&self, w: &mut [f64]) {
        for eta in self.etas.iter().rev() {
            let mut s = eta.pivot_val * w[eta.pivot];
            for &(i, e) in &eta.others {
                s += e * w[i];
            }
            w[eta.pivot] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_small_matrix() {
        // B = [[2, 1], [1, 3]] with columns pivoted on rows 0 then 1.
        let cols = [[2.0, 1.0], [1.0, 3.0]];
        let mut f = EtaFile::default();
        let mut a0 = cols[0].to_vec();
        f.ftran(&mut a0);
        f.push_from_column(&a0, 0);
        let mut a1 = cols[1].to_vec();
        f.ftran(&mut a1);
        f.push_from_column(&a1, 1);

        let mut v = vec![3.0, 4.0]; // B x = v  ->  x = (1, 1)
        f.ftran(&mut v);
        assert!((v[0] - 1.0).abs() < 1e-14 && (v[1] - 1.0).abs() < 1e-14);

        let mut w = vec![3.0, 4.0]; // yᵀ B = w  ->  y = (1, 1)
        f.btran(&mut w);
        assert!((w[0] - 1.0).abs() < 1e-14 && (w[1] - 1.0).abs() < 1e-14);
    }
}
