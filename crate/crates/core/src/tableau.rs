//! Butcher tableaux of s-stage stochastic Runge-Kutta methods and their
//! structural classification.
//!
//! A method is described by drift coefficients `(A, b)`, diffusion
//! coefficients `(Ã, b̃)` and abscissae `c`. Classification covers
//! algebraic stability (`b_i >= 0` and the stability matrix
//! `m_ij = b_i a_ij + b_j a_ji - b_i b_j` positive semidefinite),
//! the symplectic condition (`m_ij = 0`), coercivity of `A`, and weight
//! consistency (`sum b_i = sum b̃_i = 1`).

use nalgebra::{DMatrix, DVector};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-12;

/// Coefficients of an s-stage stochastic Runge-Kutta method.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    pub s: usize,
    /// Drift coefficients a_ij (s x s).
    pub a: DMatrix<f64>,
    /// Drift weights b_i.
    pub b: DVector<f64>,
    /// Diffusion coefficients ã_ij (s x s).
    pub atilde: DMatrix<f64>,
    /// Diffusion weights b̃_i.
    pub btilde: DVector<f64>,
    /// Abscissae c_i; stage times are t_n + c_i τ.
    pub c: DVector<f64>,
}

/// Outcome of the coercivity search over candidate diagonal matrices K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Coercivity {
    /// A diagonal positive K and alpha > 0 were found with
    /// u'K A^{-1} u >= alpha u'K u.
    Coercive { k: Vec<f64>, alpha: f64 },
    /// No candidate succeeded. The condition is existential over all
    /// diagonal positive K, so this is not a definitive negative.
    Unknown,
    /// A is (numerically) singular, so the condition cannot hold.
    SingularA,
}

/// Classification summary for one tableau.
#[derive(Debug, Clone, Serialize)]
pub struct TableauReport {
    pub stage_count: usize,
    /// The symmetric stability matrix M of the algebraic stability test.
    pub stability_matrix: Vec<Vec<f64>>,
    pub algebraically_stable: bool,
    pub symplectic: bool,
    pub coercivity: Coercivity,
    pub consistent_weights: bool,
}

/// Names of the built-in tableaux.
pub const BUILTIN_NAMES: [&str; 4] = ["implicit_euler", "midpoint", "explicit_euler", "gauss2"];

impl ButcherTableau {
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        atilde: DMatrix<f64>,
        btilde: DVector<f64>,
        c: DVector<f64>,
    ) -> Result<Self> {
        let s = b.len();
        if s == 0 {
            return Err(Error::InvalidTableau("stage count must be positive".into()));
        }
        if a.nrows() != s || a.ncols() != s {
            return Err(Error::InvalidTableau(format!(
                "A is {}x{}, expected {s}x{s}",
                a.nrows(),
                a.ncols()
            )));
        }
        if atilde.nrows() != s || atilde.ncols() != s {
            return Err(Error::InvalidTableau(format!(
                "Atilde is {}x{}, expected {s}x{s}",
                atilde.nrows(),
                atilde.ncols()
            )));
        }
        if btilde.len() != s || c.len() != s {
            return Err(Error::InvalidTableau(
                "b, btilde and c must all have length s".into(),
            ));
        }
        let finite = a.iter().all(|x| x.is_finite())
            && b.iter().all(|x| x.is_finite())
            && atilde.iter().all(|x| x.is_finite())
            && btilde.iter().all(|x| x.is_finite())
            && c.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidTableau("non-finite coefficient".into()));
        }
        Ok(Self {
            s,
            a,
            b,
            atilde,
            btilde,
            c,
        })
    }

    /// Drift-only constructor: Ã = A, b̃ = b, c_i = sum_j a_ij.
    pub fn from_drift(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let c = DVector::from_iterator(a.nrows(), a.row_iter().map(|r| r.sum()));
        Self::new(a.clone(), b.clone(), a, b, c)
    }

    /// Returns a named builtin tableau. All builtins use Ã = A, b̃ = b.
    pub fn builtin(name: &str) -> Result<Self> {
        let (a, b): (DMatrix<f64>, DVector<f64>) = match name {
            "implicit_euler" => (DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0)),
            "midpoint" => (DMatrix::from_element(1, 1, 0.5), DVector::from_element(1, 1.0)),
            "explicit_euler" => (DMatrix::from_element(1, 1, 0.0), DVector::from_element(1, 1.0)),
            "gauss2" => {
                let r = 3f64.sqrt() / 6.0;
                (
                    DMatrix::from_row_slice(2, 2, &[0.25, 0.25 - r, 0.25 + r, 0.25]),
                    DVector::from_element(2, 0.5),
                )
            }
            other => return Err(Error::UnknownTableau(other.into())),
        };
        Self::from_drift(a, b)
    }

    /// The stability matrix M with m_ij = b_i a_ij + b_j a_ji - b_i b_j.
    /// Symmetric by construction.
    pub fn stability_matrix(&self) -> DMatrix<f64> {
        let s = self.s;
        DMatrix::from_fn(s, s, |i, j| {
            self.b[i] * self.a[(i, j)] + self.b[j] * self.a[(j, i)] - self.b[i] * self.b[j]
        })
    }

    /// Algebraic stability: all b_i >= -tol and M positive semidefinite
    /// (eigenvalues >= -tol).
    pub fn is_algebraically_stable(&self, tol: f64) -> bool {
        if self.b.iter().any(|&bi| bi < -tol) {
            return false;
        }
        let m = self.stability_matrix();
        let eig = m.symmetric_eigenvalues();
        eig.iter().all(|&lambda| lambda >= -tol)
    }

    /// Symplectic condition: m_ij identically zero (to tol).
    pub fn is_symplectic(&self, tol: f64) -> bool {
        self.stability_matrix().iter().all(|&m| m.abs() <= tol)
    }

    /// Weight consistency: sum b_i = 1 and sum b̃_i = 1 (to tol).
    pub fn consistency_check(&self, tol: f64) -> bool {
        (self.b.sum() - 1.0).abs() <= tol && (self.btilde.sum() - 1.0).abs() <= tol
    }

    /// Searches for a diagonal positive K certifying the coercivity
    /// condition u'K A^{-1} u >= alpha u'K u. Candidates are K = I and,
    /// when all b_i > 0, K = diag(b). Reports the first success.
    pub fn check_coercivity(&self) -> Coercivity {
        let scale = self.a.iter().map(|x| x.abs()).fold(1.0f64, f64::max);
        let lu = self.a.clone().lu();
        let det = lu.determinant();
        if det.abs() < 1e-14 * scale.powi(self.s as i32) {
            return Coercivity::SingularA;
        }
        let Some(a_inv) = lu.try_inverse() else {
            return Coercivity::SingularA;
        };

        let mut candidates: Vec<DVector<f64>> = vec![DVector::from_element(self.s, 1.0)];
        if self.b.iter().all(|&bi| bi > 0.0) {
            candidates.push(self.b.clone());
        }
        for k in candidates {
            if let Some(alpha) = coercivity_constant(&a_inv, &k) {
                return Coercivity::Coercive {
                    k: k.iter().copied().collect(),
                    alpha,
                };
            }
        }
        Coercivity::Unknown
    }

    /// Full classification at the default tolerance.
    pub fn report(&self) -> TableauReport {
        let m = self.stability_matrix();
        TableauReport {
            stage_count: self.s,
            stability_matrix: (0..self.s)
                .map(|i| (0..self.s).map(|j| m[(i, j)]).collect())
                .collect(),
            algebraically_stable: self.is_algebraically_stable(DEFAULT_TOL),
            symplectic: self.is_symplectic(DEFAULT_TOL),
            coercivity: self.check_coercivity(),
            consistent_weights: self.consistency_check(DEFAULT_TOL),
        }
    }
}

/// Smallest generalized eigenvalue of sym(K A^{-1}) with respect to K,
/// returned only when strictly positive.
fn coercivity_constant(a_inv: &DMatrix<f64>, k: &DVector<f64>) -> Option<f64> {
    let s = k.len();
    let ka = DMatrix::from_fn(s, s, |i, j| k[i] * a_inv[(i, j)]);
    let sym = (&ka + ka.transpose()) * 0.5;
    // Generalized problem sym(KA^{-1}) v = lambda K v with K diagonal
    // positive: transform with K^{-1/2}.
    let ks: Vec<f64> = k.iter().map(|ki| ki.sqrt()).collect();
    let transformed = DMatrix::from_fn(s, s, |i, j| sym[(i, j)] / (ks[i] * ks[j]));
    let lambda_min = transformed
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    (lambda_min > 0.0).then_some(lambda_min)
}

// --- JSON round-trip -------------------------------------------------------
//
// Wire form: {"s": 1, "A": [["1/2"]], "b": [1.0], "Atilde": ..., "btilde":
// ..., "c": ["1/2"]}. Coefficients are numbers or strings; strings may be
// decimals or fractions like "1/2".

#[derive(Serialize, Deserialize)]
struct TableauWire {
    s: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<Coeff>>,
    b: Vec<Coeff>,
    #[serde(rename = "Atilde")]
    atilde: Vec<Vec<Coeff>>,
    btilde: Vec<Coeff>,
    c: Vec<Coeff>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Coeff {
    Num(f64),
    Text(String),
}

impl Coeff {
    fn value(&self) -> Result<f64> {
        match self {
            Coeff::Num(x) => Ok(*x),
            Coeff::Text(s) => parse_coefficient(s),
        }
    }
}

/// Parses a decimal or a fraction string like "1/2" or "-√3/6" is not
/// supported; use decimals for irrational entries.
pub fn parse_coefficient(text: &str) -> Result<f64> {
    let t = text.trim();
    if let Some((num, den)) = t.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad fraction numerator in `{text}`")))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad fraction denominator in `{text}`")))?;
        if d == 0.0 {
            return Err(Error::Parse(format!("zero denominator in `{text}`")));
        }
        Ok(n / d)
    } else {
        t.parse()
            .map_err(|_| Error::Parse(format!("bad coefficient `{text}`")))
    }
}

impl Serialize for ButcherTableau {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<Coeff>> {
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| Coeff::Num(m[(i, j)])).collect())
                .collect()
        };
        let vec = |v: &DVector<f64>| -> Vec<Coeff> { v.iter().map(|&x| Coeff::Num(x)).collect() };
        TableauWire {
            s: self.s,
            a: rows(&self.a),
            b: vec(&self.b),
            atilde: rows(&self.atilde),
            btilde: vec(&self.btilde),
            c: vec(&self.c),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ButcherTableau {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let wire = TableauWire::deserialize(deserializer)?;
        let s = wire.s;
        let matrix = |rows: &[Vec<Coeff>], name: &str| -> std::result::Result<DMatrix<f64>, D::Error> {
            if rows.len() != s || rows.iter().any(|r| r.len() != s) {
                return Err(D::Error::custom(format!("{name} must be {s}x{s}")));
            }
            let mut m = DMatrix::zeros(s, s);
            for (i, row) in rows.iter().enumerate() {
                for (j, coeff) in row.iter().enumerate() {
                    m[(i, j)] = coeff.value().map_err(D::Error::custom)?;
                }
            }
            Ok(m)
        };
        let vector = |vals: &[Coeff], name: &str| -> std::result::Result<DVector<f64>, D::Error> {
            if vals.len() != s {
                return Err(D::Error::custom(format!("{name} must have length {s}")));
            }
            let mut v = DVector::zeros(s);
            for (i, coeff) in vals.iter().enumerate() {
                v[i] = coeff.value().map_err(D::Error::custom)?;
            }
            Ok(v)
        };
        ButcherTableau::new(
            matrix(&wire.a, "A")?,
            vector(&wire.b, "b")?,
            matrix(&wire.atilde, "Atilde")?,
            vector(&wire.btilde, "btilde")?,
            vector(&wire.c, "c")?,
        )
        .map_err(D::Error::custom)
    }
}
