//! Acquisition schemes: gradient directions with their b-values, FSL
//! `bvec`/`bval` text I/O, and the built-in six-direction preset.

use std::path::Path;

use crate::error::{DtiError, Result};
use crate::scalar::{norm3, Real};

/// Entries with a b-value at or below this (s/mm^2) count as unweighted.
pub const B0_THRESHOLD: f64 = 50.0;

/// Six directions minimising the condition number of the tensor design
/// matrix, as listed to three decimals; renormalized on construction.
pub const SKARE6_DIRECTIONS: [[f64; 3]; 6] = [
    [0.910, 0.416, 0.0],
    [0.910, -0.416, 0.0],
    [0.416, 0.0, 0.910],
    [-0.416, 0.0, 0.910],
    [0.0, 0.910, 0.416],
    [0.0, 0.910, -0.416],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement<T> {
    pub direction: [T; 3],
    pub bvalue: T,
}

impl<T: Real> Measurement<T> {
    pub fn is_weighted(&self) -> bool {
        self.bvalue > T::lit(B0_THRESHOLD)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientScheme<T> {
    entries: Vec<Measurement<T>>,
    b0_index: Option<usize>,
}

impl<T: Real> GradientScheme<T> {
    /// Builds a scheme, renormalizing every diffusion-weighted direction.
    /// The first unweighted entry becomes the normalization measurement.
    pub fn new(directions: &[[T; 3]], bvalues: &[T]) -> Result<Self> {
        if directions.len() != bvalues.len() {
            return Err(DtiError::InvalidScheme(format!(
                "{} directions but {} b-values",
                directions.len(),
                bvalues.len()
            )));
        }
        let mut entries = Vec::with_capacity(bvalues.len());
        for (i, (g, &b)) in directions.iter().zip(bvalues).enumerate() {
            if !b.is_finite() || b < T::zero() {
                return Err(DtiError::InvalidScheme(format!("entry {i}: b-value {b}")));
            }
            let m = Measurement {
                direction: *g,
                bvalue: b,
            };
            let direction = if m.is_weighted() {
                let n = norm3(g);
                if !(n > T::lit(1e-3)) || !n.is_finite() {
                    return Err(DtiError::InvalidScheme(format!(
                        "entry {i}: direction norm {n} cannot be renormalized"
                    )));
                }
                g.map(|x| x / n)
            } else {
                *g
            };
            entries.push(Measurement {
                direction,
                bvalue: b,
            });
        }
        let b0_index = entries.iter().position(|m| !m.is_weighted());
        Ok(Self { entries, b0_index })
    }

    /// One b=0 entry followed by the six optimized directions at `bvalue`.
    pub fn skare6(bvalue: T) -> Self {
        let mut dirs = vec![[T::zero(); 3]];
        let mut bvals = vec![T::zero()];
        for d in SKARE6_DIRECTIONS {
            dirs.push(d.map(T::lit));
            bvals.push(bvalue);
        }
        Self::new(&dirs, &bvals).expect("preset is valid")
    }

    /// One b=0 entry followed by `n` near-uniform directions on the
    /// hemisphere (Fibonacci lattice).
    pub fn uniform(n: usize, bvalue: T) -> Self {
        let mut dirs = vec![[T::zero(); 3]];
        let mut bvals = vec![T::zero()];
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        for i in 0..n {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            dirs.push([T::lit(r * phi.cos()), T::lit(r * phi.sin()), T::lit(z)]);
            bvals.push(bvalue);
        }
        Self::new(&dirs, &bvals).expect("lattice is valid")
    }

    /// Parses FSL text: `bvec` has three rows (x, y, z) with one column per
    /// measurement, `bval` a single row. Columns pair positionally.
    pub fn from_fsl_text(bvec: &str, bval: &str) -> Result<Self> {
        let parse_row = |line: &str| -> Result<Vec<T>> {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map(T::lit)
                        .map_err(|e| DtiError::InvalidScheme(format!("bad number '{tok}': {e}")))
                })
                .collect()
        };
        let rows: Vec<Vec<T>> = bvec
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(parse_row)
            .collect::<Result<_>>()?;
        if rows.len() != 3 {
            return Err(DtiError::InvalidScheme(format!(
                "bvec must have 3 rows, found {}",
                rows.len()
            )));
        }
        let bvals: Vec<T> = bval
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(parse_row)
            .collect::<Result<Vec<_>>>()?
            .concat();
        let m = bvals.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(DtiError::InvalidScheme(format!(
                "bvec rows have {:?} columns, bval has {m}",
                rows.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        let dirs: Vec<[T; 3]> = (0..m).map(|j| [rows[0][j], rows[1][j], rows[2][j]]).collect();
        Self::new(&dirs, &bvals)
    }

    pub fn load_fsl(bvec: impl AsRef<Path>, bval: impl AsRef<Path>) -> Result<Self> {
        let bvec = std::fs::read_to_string(bvec)?;
        let bval = std::fs::read_to_string(bval)?;
        Self::from_fsl_text(&bvec, &bval)
    }

    /// Inverse of [`from_fsl_text`](Self::from_fsl_text).
    pub fn to_fsl_text(&self) -> (String, String) {
        let row = |f: &dyn Fn(&Measurement<T>) -> T| {
            self.entries
                .iter()
                .map(|m| format!("{}", f(m).as_f64()))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let bvec = format!(
            "{}\n{}\n{}\n",
            row(&|m| m.direction[0]),
            row(&|m| m.direction[1]),
            row(&|m| m.direction[2])
        );
        let bval = format!("{}\n", row(&|m| m.bvalue));
        (bvec, bval)
    }

    pub fn save_fsl(&self, bvec: impl AsRef<Path>, bval: impl AsRef<Path>) -> Result<()> {
        let (v, b) = self.to_fsl_text();
        std::fs::write(bvec, v)?;
        std::fs::write(bval, b)?;
        Ok(())
    }

    /// Designates which unweighted entry normalizes the others.
    pub fn with_b0_index(mut self, index: usize) -> Result<Self> {
        match self.entries.get(index) {
            Some(m) if !m.is_weighted() => {
                self.b0_index = Some(index);
                Ok(self)
            }
            _ => Err(DtiError::InvalidScheme(format!(
                "entry {index} is not an unweighted measurement"
            ))),
        }
    }

    pub fn entries(&self) -> &[Measurement<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn b0_index(&self) -> Option<usize> {
        self.b0_index
    }

    /// Positions of diffusion-weighted entries, in scheme order.
    pub fn weighted_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_weighted())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn weighted_count(&self) -> usize {
        self.entries.iter().filter(|m| m.is_weighted()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skare6_is_unit_and_has_b0_first() {
        let s = GradientScheme::<f64>::skare6(1000.0);
        assert_eq!(s.len(), 7);
        assert_eq!(s.b0_index(), Some(0));
        assert_eq!(s.weighted_indices(), vec![1, 2, 3, 4, 5, 6]);
        for m in &s.entries()[1..] {
            assert!((norm3(&m.direction) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fsl_round_trip() {
        let s = GradientScheme::<f64>::uniform(12, 1000.0);
        let (v, b) = s.to_fsl_text();
        let back = GradientScheme::<f64>::from_fsl_text(&v, &b).unwrap();
        assert_eq!(back.len(), s.len());
        for (a, b) in back.entries().iter().zip(s.entries()) {
            assert_eq!(a.bvalue, b.bvalue);
            for k in 0..3 {
                assert!((a.direction[k] - b.direction[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fsl_parses_whitespace_columns_and_renormalizes() {
        let bvec = "0 2 0\n0 0 0.5\n0  0 0\n";
        let bval = "0 1000 1000\n";
        let s = GradientScheme::<f64>::from_fsl_text(bvec, bval).unwrap();
        assert_eq!(s.entries()[1].direction, [1.0, 0.0, 0.0]);
        assert_eq!(s.entries()[2].direction, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn fsl_rejects_mismatch_and_zero_direction() {
        assert!(GradientScheme::<f64>::from_fsl_text("1 0\n0 1\n0 0\n", "1000\n").is_err());
        assert!(GradientScheme::<f64>::from_fsl_text("1\n0\n", "1000\n").is_err());
        let err = GradientScheme::<f64>::from_fsl_text("0\n0\n0\n", "1000\n").unwrap_err();
        assert!(matches!(err, DtiError::InvalidScheme(_)));
    }

    #[test]
    fn b0_designation_must_be_unweighted() {
        let s = GradientScheme::<f64>::new(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0; 3]], &[0.0, 1000.0, 5.0])
            .unwrap();
        assert_eq!(s.b0_index(), Some(0));
        assert_eq!(s.clone().with_b0_index(2).unwrap().b0_index(), Some(2));
        assert!(s.with_b0_index(1).is_err());
    }
}
