//! Time-delay (Hankel) embedding and snapshot-matrix construction for the
//! linear system-identification path.
//!
//! A scalar sequence of length `N` embeds into an `m × (N − m + 1)` Hankel
//! matrix whose column `j` stacks samples `j … j+m−1`. The snapshot triple
//! `(X, X′, U)` aligns voltage columns with their one-step-ahead shifts and a
//! `d_u`-deep current history whose newest sample coincides with the newest
//! voltage sample of the same column — the input at the *predicted* time is
//! deliberately not visible to the regression.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding dimension m = {m} out of range for a sequence of length {n} (need 1 <= m <= {n})")]
    BadEmbeddingDim { m: usize, n: usize },
    #[error("series of length {n} too short for snapshots with m = {m} (need at least m + 1 samples)")]
    TooShort { n: usize, m: usize },
    #[error("input embedding depth d_u = {d_u} out of range (need 1 <= d_u <= m = {m})")]
    BadInputDim { d_u: usize, m: usize },
}

/// Dense time-delay embedding of a scalar sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelMatrix {
    pub m: usize,
    pub n_cols: usize,
    pub source_len: usize,
    pub data: DMatrix<f64>,
}

/// Embed `seq` with window `m`: column `j` holds `seq[j..j+m]`, giving
/// `N − m + 1` columns with constant skew-diagonals.
pub fn hankel(seq: &[f64], m: usize) -> Result<HankelMatrix, EmbedError> {
    let n = seq.len();
    if m < 1 || m > n {
        return Err(EmbedError::BadEmbeddingDim { m, n });
    }
    let n_cols = n - m + 1;
    let data = DMatrix::from_fn(m, n_cols, |r, c| seq[c + r]);
    Ok(HankelMatrix {
        m,
        n_cols,
        source_len: n,
        data,
    })
}

impl HankelMatrix {
    /// Rebuild the source sequence from the first row plus the last column.
    pub fn reconstruct_source(&self) -> Vec<f64> {
        let mut seq = Vec::with_capacity(self.source_len);
        for c in 0..self.n_cols {
            seq.push(self.data[(0, c)]);
        }
        for r in 1..self.m {
            seq.push(self.data[(r, self.n_cols - 1)]);
        }
        seq
    }
}

/// Aligned snapshot matrices for the controlled linear regression.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotTriple {
    /// `m × K` delay-embedded voltage states.
    pub x: DMatrix<f64>,
    /// `m × K` one-step-ahead shifts of `x`.
    pub xp: DMatrix<f64>,
    /// `d_u × K` current histories; row `d_u − 1` of column `k` is the
    /// current at the newest source index of column `k` of `x`.
    pub u: DMatrix<f64>,
    pub m: usize,
    pub d_u: usize,
    pub k: usize,
}

/// Build `(X, X′, U)` from a series: `K = N − m` columns, with
/// `X[:, j] = v[j..j+m]`, `X′[:, j] = v[j+1..j+m+1]` and
/// `U[:, j] = i[j+m−d_u..j+m]`.
pub fn snapshots(
    series: &crate::dataio::SampleSeries,
    m: usize,
    d_u: usize,
) -> Result<SnapshotTriple, EmbedError> {
    snapshots_from_slices(&series.v, &series.i, m, d_u)
}

/// [`snapshots`] on raw sequences, for callers whose signals are not a
/// measured series (synthetic oracles, predicted continuations).
pub fn snapshots_from_slices(
    v: &[f64],
    i: &[f64],
    m: usize,
    d_u: usize,
) -> Result<SnapshotTriple, EmbedError> {
    let n = v.len().min(i.len());
    if m < 1 || m + 1 > n {
        return Err(EmbedError::TooShort { n, m });
    }
    if d_u < 1 || d_u > m {
        return Err(EmbedError::BadInputDim { d_u, m });
    }
    let k = n - m;
    let x = DMatrix::from_fn(m, k, |r, c| v[c + r]);
    let xp = DMatrix::from_fn(m, k, |r, c| v[c + r + 1]);
    let u = DMatrix::from_fn(d_u, k, |r, c| i[c + m - d_u + r]);
    Ok(SnapshotTriple {
        x,
        xp,
        u,
        m,
        d_u,
        k,
    })
}

/// Input-only Hankel aligned like [`snapshots`]: column `k` holds
/// `i[k+m−d_u..k+m]`, suitable as the input sequence for a rollout that
/// predicts samples `m..n`.
pub fn input_matrix(i: &[f64], m: usize, d_u: usize) -> Result<DMatrix<f64>, EmbedError> {
    let n = i.len();
    if m < 1 || m + 1 > n {
        return Err(EmbedError::TooShort { n, m });
    }
    if d_u < 1 || d_u > m {
        return Err(EmbedError::BadInputDim { d_u, m });
    }
    Ok(DMatrix::from_fn(d_u, n - m, |r, c| i[c + m - d_u + r]))
}

impl SnapshotTriple {
    /// Restrict all three matrices to the given columns (indices must be in
    /// range; order and duplicates are preserved).
    pub fn select_columns(&self, cols: &[usize]) -> SnapshotTriple {
        assert!(
            cols.iter().all(|&c| c < self.k),
            "column index out of range"
        );
        let take = |mat: &DMatrix<f64>| {
            DMatrix::from_fn(mat.nrows(), cols.len(), |r, j| mat[(r, cols[j])])
        };
        SnapshotTriple {
            x: take(&self.x),
            xp: take(&self.xp),
            u: take(&self.u),
            m: self.m,
            d_u: self.d_u,
            k: cols.len(),
        }
    }

    /// Keep only the leading `k` columns — the snapshot set a training prefix
    /// of `k + m` samples would generate.
    pub fn first_columns(&self, k: usize) -> SnapshotTriple {
        assert!(k <= self.k, "cannot take {k} of {} columns", self.k);
        SnapshotTriple {
            x: self.x.columns(0, k).into_owned(),
            xp: self.xp.columns(0, k).into_owned(),
            u: self.u.columns(0, k).into_owned(),
            m: self.m,
            d_u: self.d_u,
            k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::SampleSeries;
    use proptest::prelude::*;

    fn series(v: Vec<f64>, i: Vec<f64>) -> SampleSeries {
        let t: Vec<f64> = (0..v.len()).map(|k| k as f64).collect();
        // Scale voltages into the valid band; tests on snapshots use raw
        // patterns, so map {1..9} onto small offsets around 4.0 V instead.
        SampleSeries::new("t", 0, t, i, v).unwrap()
    }

    #[test]
    fn hankel_examples() {
        let h = hankel(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(h.n_cols, 3);
        assert_eq!(
            h.data,
            DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0])
        );

        let row = hankel(&[1.0, 2.0, 3.0, 4.0], 1).unwrap();
        assert_eq!(row.data, DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]));

        let h3 = hankel(&[1.0, 2.0, 3.0, 4.0, 5.0], 3).unwrap();
        assert_eq!(
            h3.data,
            DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0])
        );
    }

    #[test]
    fn hankel_dimension_errors() {
        assert!(matches!(
            hankel(&[1.0, 2.0], 3),
            Err(EmbedError::BadEmbeddingDim { m: 3, n: 2 })
        ));
        assert!(matches!(
            hankel(&[1.0, 2.0], 0),
            Err(EmbedError::BadEmbeddingDim { m: 0, .. })
        ));
    }

    #[test]
    fn snapshot_examples() {
        // Voltages/currents shifted into the valid measurement band but with
        // the documented integer pattern intact in the fractional part.
        let v: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|x| 3.0 + x * 0.1).collect();
        let i = vec![9.0, 8.0, 7.0, 6.0];
        let s = series(v.clone(), i.clone());

        let t1 = snapshots(&s, 2, 1).unwrap();
        assert_eq!(t1.k, 2);
        assert_eq!(
            t1.x,
            DMatrix::from_row_slice(2, 2, &[v[0], v[1], v[1], v[2]])
        );
        assert_eq!(
            t1.xp,
            DMatrix::from_row_slice(2, 2, &[v[1], v[2], v[2], v[3]])
        );
        assert_eq!(t1.u, DMatrix::from_row_slice(1, 2, &[8.0, 7.0]));

        let t2 = snapshots(&s, 2, 2).unwrap();
        assert_eq!(t2.u, DMatrix::from_row_slice(2, 2, &[9.0, 8.0, 8.0, 7.0]));
    }

    #[test]
    fn input_matrix_matches_snapshot_u_and_selection_works() {
        let v: Vec<f64> = (0..12).map(|k| 3.5 + 0.01 * k as f64).collect();
        let i: Vec<f64> = (0..12).map(|k| (k as f64) * 0.5 - 2.0).collect();
        let t: Vec<f64> = (0..12).map(|k| k as f64).collect();
        let s = SampleSeries::new("t", 0, t, i.clone(), v).unwrap();
        let trip = snapshots(&s, 4, 3).unwrap();
        assert_eq!(input_matrix(&i, 4, 3).unwrap(), trip.u);

        let sel = trip.select_columns(&[1, 5, 2]);
        assert_eq!(sel.k, 3);
        for (j, &src) in [1usize, 5, 2].iter().enumerate() {
            for r in 0..4 {
                assert_eq!(sel.x[(r, j)], trip.x[(r, src)]);
                assert_eq!(sel.xp[(r, j)], trip.xp[(r, src)]);
            }
        }
        let head = trip.first_columns(2);
        assert_eq!(head.k, 2);
        assert_eq!(head.x, trip.x.columns(0, 2).into_owned());
    }

    #[test]
    fn snapshot_errors() {
        let v = vec![4.0, 4.0, 4.0];
        let s = series(v, vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            snapshots(&s, 3, 1),
            Err(EmbedError::TooShort { n: 3, m: 3 })
        ));
        assert!(matches!(
            snapshots(&s, 2, 3),
            Err(EmbedError::BadInputDim { d_u: 3, m: 2 })
        ));
    }

    proptest! {
        #[test]
        fn hankel_skew_diagonals_constant(seq in proptest::collection::vec(-10.0f64..10.0, 3..40),
                                          m_frac in 0.0f64..1.0) {
            let n = seq.len();
            let m = 1 + ((n - 1) as f64 * m_frac) as usize;
            let h = hankel(&seq, m).unwrap();
            prop_assert_eq!(h.n_cols, n - m + 1);
            for r in 0..m.saturating_sub(1) {
                for c in 1..h.n_cols {
                    prop_assert_eq!(h.data[(r, c)], h.data[(r + 1, c - 1)]);
                }
            }
        }

        #[test]
        fn hankel_is_linear(s1 in proptest::collection::vec(-5.0f64..5.0, 6..20),
                            a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let s2: Vec<f64> = s1.iter().rev().cloned().collect();
            let m = 3;
            let combined: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
            let h = hankel(&combined, m).unwrap();
            let expected = hankel(&s1, m).unwrap().data * a + hankel(&s2, m).unwrap().data * b;
            for r in 0..m {
                for c in 0..h.n_cols {
                    prop_assert!((h.data[(r, c)] - expected[(r, c)]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn hankel_reconstructs_source(seq in proptest::collection::vec(-10.0f64..10.0, 2..30),
                                      m_frac in 0.0f64..1.0) {
            let n = seq.len();
            let m = 1 + ((n - 1) as f64 * m_frac) as usize;
            let h = hankel(&seq, m).unwrap();
            prop_assert_eq!(h.reconstruct_source(), seq);
        }

        #[test]
        fn snapshot_shift_identity_and_alignment(n in 6usize..40, m in 2usize..5, du in 1usize..5) {
            prop_assume!(m + 1 <= n);
            let du = du.min(m);
            let v: Vec<f64> = (0..n).map(|k| 3.5 + 0.4 * ((k as f64) * 0.7).sin()).collect();
            let i: Vec<f64> = (0..n).map(|k| ((k as f64) * 1.3).cos()).collect();
            let t: Vec<f64> = (0..n).map(|k| k as f64).collect();
            let s = SampleSeries::new("p", 0, t, i.clone(), v).unwrap();
            let trip = snapshots(&s, m, du).unwrap();
            prop_assert_eq!(trip.k, n - m);
            for c in 1..trip.k {
                // Column c of Xp equals column c+1 of X (where it exists).
                for r in 0..m {
                    prop_assert_eq!(trip.xp[(r, c - 1)], trip.x[(r, c)]);
                }
            }
            for c in 0..trip.k {
                // Newest input sample aligns with the newest observed voltage.
                prop_assert_eq!(trip.u[(du - 1, c)], i[c + m - 1]);
            }
        }
    }
}
