//! Graded-lexicographic monomial bases and Vandermonde assembly.
//!
//! Indices are ordered by total degree; within one degree the first coordinate
//! is most significant and larger exponents come first, so in two dimensions
//! the order is `1, x, y, x², xy, y², …`. Every prefix of the enumeration is a
//! valid basis, which is what makes rules of growing exactness comparable.

use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BasisError {
    #[error("dimension mismatch: basis has dimension {expected}, point has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no points given")]
    EmptyPoints,
    #[error("invalid box: lower bound must be strictly below upper bound in every coordinate")]
    InvalidBox,
}

/// Exponent tuple of one monomial.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(exponents: Vec<u32>) -> Self {
        Self(exponents)
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0; d])
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }
}

/// `∏ point[i]^exponents[i]`.
pub fn evaluate_monomial<T: Scalar>(index: &MultiIndex, point: &[T]) -> Result<T, BasisError> {
    if index.dimension() != point.len() {
        return Err(BasisError::DimensionMismatch {
            expected: index.dimension(),
            found: point.len(),
        });
    }
    Ok(index
        .exponents()
        .iter()
        .zip(point)
        .fold(T::one(), |acc, (&e, &x)| acc * x.powi(e as i32)))
}

/// Number of monomials of total degree at most `degree` in `d` variables.
pub fn total_degree_count(d: usize, degree: usize) -> usize {
    // C(d + degree, d), computed incrementally to stay exact.
    let mut c: usize = 1;
    for k in 1..=d {
        c = c * (degree + k) / k;
    }
    c
}

/// The first `count` monomials in graded-lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiIndexBasis {
    dimension: usize,
    indices: Vec<MultiIndex>,
    // φ_j = φ_strip[j] · (factor of coordinate var[j] with exponent var_exp[j]),
    // where strip[j] is index j with that coordinate's exponent set to zero.
    strip: Vec<usize>,
    var: Vec<usize>,
    var_exp: Vec<u32>,
}

fn push_degree(d: usize, degree: u32, prefix: &mut Vec<u32>, out: &mut Vec<MultiIndex>, limit: usize) {
    if out.len() >= limit {
        return;
    }
    if prefix.len() + 1 == d {
        prefix.push(degree);
        out.push(MultiIndex(prefix.clone()));
        prefix.pop();
        return;
    }
    for first in (0..=degree).rev() {
        prefix.push(first);
        push_degree(d, degree - first, prefix, out, limit);
        prefix.pop();
        if out.len() >= limit {
            return;
        }
    }
}

impl MultiIndexBasis {
    /// Enumerates the first `count` multi-indices in dimension `d`.
    ///
    /// Panics when `d` or `count` is zero.
    pub fn enumerate(d: usize, count: usize) -> Self {
        assert!(d >= 1, "basis dimension must be positive");
        assert!(count >= 1, "basis size must be positive");
        let mut indices = Vec::with_capacity(count);
        let mut degree = 0u32;
        let mut prefix = Vec::with_capacity(d);
        while indices.len() < count {
            push_degree(d, degree, &mut prefix, &mut indices, count);
            degree += 1;
        }
        let mut strip = vec![0; count];
        let mut var = vec![0; count];
        let mut var_exp = vec![0; count];
        let lookup: std::collections::HashMap<&MultiIndex, usize> =
            indices.iter().enumerate().map(|(j, m)| (m, j)).collect();
        for (j, m) in indices.iter().enumerate().skip(1) {
            let i = m.0.iter().position(|&e| e > 0).expect("nonzero index");
            let mut p = m.clone();
            p.0[i] = 0;
            strip[j] = lookup[&p];
            var[j] = i;
            var_exp[j] = m.0[i];
        }
        Self {
            dimension: d,
            indices,
            strip,
            var,
            var_exp,
        }
    }

    /// Basis spanning all polynomials of total degree at most `degree`.
    pub fn total_degree(d: usize, degree: usize) -> Self {
        Self::enumerate(d, total_degree_count(d, degree))
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// `D + 1`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn max_degree(&self) -> u32 {
        self.indices.last().map_or(0, MultiIndex::degree)
    }

    /// Evaluates every basis monomial at `point`.
    pub fn eval_into<T: Scalar>(&self, point: &[T], out: &mut [T]) {
        let mut table = vec![T::zero(); self.table_len()];
        self.fill_table(BasisFamily::Monomial, point, &mut table);
        self.eval_from_table(&table, out);
    }

    fn table_len(&self) -> usize {
        self.dimension * (self.max_degree() as usize + 1)
    }

    fn fill_table<T: Scalar>(&self, family: BasisFamily, t: &[T], table: &mut [T]) {
        let stride = self.max_degree() as usize + 1;
        let two = T::lit(2.0);
        for (i, &x) in t.iter().enumerate() {
            let row = &mut table[i * stride..(i + 1) * stride];
            row[0] = T::one();
            if stride > 1 {
                row[1] = x;
            }
            for k in 2..stride {
                row[k] = match family {
                    BasisFamily::Monomial => row[k - 1] * x,
                    BasisFamily::Chebyshev => two * x * row[k - 1] - row[k - 2],
                };
            }
        }
    }

    fn eval_from_table<T: Scalar>(&self, table: &[T], out: &mut [T]) {
        debug_assert_eq!(out.len(), self.len());
        let stride = self.max_degree() as usize + 1;
        out[0] = T::one();
        for j in 1..out.len() {
            out[j] = out[self.strip[j]] * table[self.var[j] * stride + self.var_exp[j] as usize];
        }
    }
}

/// Univariate factor used for each coordinate of a basis function.
///
/// Products of Chebyshev polynomials `∏ T_{α_i}(t_i)` differ from `t^α` only by
/// terms of lower total degree, all of which precede `α` in graded order; any
/// prefix of the enumeration therefore spans the same space in both families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    #[default]
    Monomial,
    Chebyshev,
}

/// Affine map from a box onto `[-1, 1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap<T> {
    center: Vec<T>,
    inv_half_width: Vec<T>,
}

impl<T: Scalar> AffineMap<T> {
    pub fn from_box(lower: &[T], upper: &[T]) -> Result<Self, BasisError> {
        if lower.len() != upper.len() {
            return Err(BasisError::DimensionMismatch {
                expected: lower.len(),
                found: upper.len(),
            });
        }
        let two = T::lit(2.0);
        let mut center = Vec::with_capacity(lower.len());
        let mut inv = Vec::with_capacity(lower.len());
        for (&lo, &hi) in lower.iter().zip(upper) {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(BasisError::InvalidBox);
            }
            center.push((lo + hi) / two);
            inv.push(two / (hi - lo));
        }
        Ok(Self {
            center,
            inv_half_width: inv,
        })
    }

    pub fn apply_into(&self, x: &[T], out: &mut [T]) {
        for i in 0..x.len() {
            out[i] = (x[i] - self.center[i]) * self.inv_half_width[i];
        }
    }
}

/// A basis together with the coordinates and univariate family it is evaluated in.
///
/// With a map present, basis functions are evaluated in box-normalized
/// coordinates. That is a change of basis within the same polynomial space, so
/// exactness is unaffected while Vandermonde conditioning improves considerably.
#[derive(Debug, Clone)]
pub struct PolynomialSpace<T> {
    basis: MultiIndexBasis,
    map: Option<AffineMap<T>>,
    family: BasisFamily,
}

impl<T: Scalar> PolynomialSpace<T> {
    pub fn raw(basis: MultiIndexBasis) -> Self {
        Self {
            basis,
            map: None,
            family: BasisFamily::Monomial,
        }
    }

    pub fn mapped(basis: MultiIndexBasis, lower: &[T], upper: &[T]) -> Result<Self, BasisError> {
        if lower.len() != basis.dimension() {
            return Err(BasisError::DimensionMismatch {
                expected: basis.dimension(),
                found: lower.len(),
            });
        }
        let map = AffineMap::from_box(lower, upper)?;
        Ok(Self {
            basis,
            map: Some(map),
            family: BasisFamily::Monomial,
        })
    }

    pub fn with_family(mut self, family: BasisFamily) -> Self {
        self.family = family;
        self
    }

    pub fn family(&self) -> BasisFamily {
        self.family
    }

    pub fn basis(&self) -> &MultiIndexBasis {
        &self.basis
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.basis.dimension()
    }

    /// Reusable evaluation buffers.
    pub fn evaluator(&self) -> SpaceEvaluator<'_, T> {
        SpaceEvaluator {
            space: self,
            mapped: vec![T::zero(); self.dimension()],
            table: vec![T::zero(); self.basis.table_len()],
            out: vec![T::zero(); self.len()],
        }
    }

    pub fn eval(&self, x: &[T]) -> Result<Vec<T>, BasisError> {
        if x.len() != self.dimension() {
            return Err(BasisError::DimensionMismatch {
                expected: self.dimension(),
                found: x.len(),
            });
        }
        Ok(self.evaluator().eval(x).to_vec())
    }

    /// `(D+1) × (N+1)` matrix with entry `(j, k) = φ_j(x_k)`.
    pub fn vandermonde(&self, points: &[Vec<T>]) -> Result<Matrix<T>, BasisError> {
        if points.is_empty() {
            return Err(BasisError::EmptyPoints);
        }
        let mut m = Matrix::zeros(self.len(), points.len());
        let mut ev = self.evaluator();
        for (k, p) in points.iter().enumerate() {
            if p.len() != self.dimension() {
                return Err(BasisError::DimensionMismatch {
                    expected: self.dimension(),
                    found: p.len(),
                });
            }
            for (j, &v) in ev.eval(p).iter().enumerate() {
                m[(j, k)] = v;
            }
        }
        Ok(m)
    }
}

/// Evaluates a [`PolynomialSpace`] without allocating per point.
#[derive(Debug)]
pub struct SpaceEvaluator<'a, T> {
    space: &'a PolynomialSpace<T>,
    mapped: Vec<T>,
    table: Vec<T>,
    out: Vec<T>,
}

impl<T: Scalar> SpaceEvaluator<'_, T> {
    /// All basis values at `x`; `x` must have the space's dimension.
    pub fn eval(&mut self, x: &[T]) -> &[T] {
        let s = self.space;
        let t: &[T] = match &s.map {
            Some(m) => {
                m.apply_into(x, &mut self.mapped);
                &self.mapped
            }
            None => x,
        };
        s.basis.fill_table(s.family, t, &mut self.table);
        s.basis.eval_from_table(&self.table, &mut self.out);
        &self.out
    }
}

/// Vandermonde matrix of raw (unmapped) monomials.
pub fn vandermonde<T: Scalar>(basis: &MultiIndexBasis, points: &[Vec<T>]) -> Result<Matrix<T>, BasisError> {
    PolynomialSpace::raw(basis.clone()).vandermonde(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Lu;
    use proptest::prelude::*;

    fn exps(b: &MultiIndexBasis) -> Vec<Vec<u32>> {
        b.indices().iter().map(|m| m.exponents().to_vec()).collect()
    }

    #[test]
    fn enumeration_examples() {
        assert_eq!(exps(&MultiIndexBasis::enumerate(1, 3)), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(
            exps(&MultiIndexBasis::enumerate(2, 6)),
            vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]
        );
        assert_eq!(exps(&MultiIndexBasis::enumerate(3, 1)), vec![vec![0, 0, 0]]);
        assert_eq!(
            exps(&MultiIndexBasis::enumerate(3, 7))[4..],
            [vec![2, 0, 0], vec![1, 1, 0], vec![1, 0, 1]]
        );
    }

    #[test]
    fn total_degree_counts() {
        assert_eq!(total_degree_count(7, 3), 120);
        assert_eq!(total_degree_count(2, 10), 66);
        assert_eq!(MultiIndexBasis::total_degree(7, 3).len(), 120);
        assert_eq!(MultiIndexBasis::total_degree(7, 3).max_degree(), 3);
    }

    #[test]
    fn monomial_examples() {
        let m = MultiIndex::new(vec![2, 1]);
        assert_eq!(evaluate_monomial(&m, &[2.0, 3.0]).unwrap(), 12.0);
        assert_eq!(evaluate_monomial(&MultiIndex::zeros(2), &[-7.5, 1e300]).unwrap(), 1.0);
        assert_eq!(evaluate_monomial(&MultiIndex::new(vec![3]), &[-2.0]).unwrap(), -8.0);
        assert!(matches!(
            evaluate_monomial(&m, &[1.0]),
            Err(BasisError::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn vandermonde_examples() {
        let b = MultiIndexBasis::enumerate(1, 2);
        let v = vandermonde(&b, &[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(v, Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap());

        let b = MultiIndexBasis::enumerate(2, 3);
        let v = vandermonde(&b, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(v.column(0), vec![1.0, 0.0, 0.0]);

        let b = MultiIndexBasis::enumerate(1, 3);
        let v = vandermonde(&b, &[vec![-1.0], vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(
            v,
            Matrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![-1.0, 0.0, 1.0], vec![1.0, 0.0, 1.0]])
                .unwrap()
        );

        assert!(matches!(vandermonde::<f64>(&b, &[]), Err(BasisError::EmptyPoints)));
        assert!(vandermonde(&b, &[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn mapped_space_sends_box_to_unit_cube() {
        let b = MultiIndexBasis::enumerate(2, 3);
        let s = PolynomialSpace::mapped(b, &[0.0, 10.0], &[1.0, 20.0]).unwrap();
        assert_eq!(s.eval(&[0.0, 20.0]).unwrap(), vec![1.0, -1.0, 1.0]);
        assert_eq!(s.eval(&[0.5, 15.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(PolynomialSpace::mapped(MultiIndexBasis::enumerate(1, 2), &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn chebyshev_family_values() {
        let b = MultiIndexBasis::enumerate(2, 6);
        let s = PolynomialSpace::mapped(b, &[-1.0, -1.0], &[1.0, 1.0])
            .unwrap()
            .with_family(BasisFamily::Chebyshev);
        let (x, y): (f64, f64) = (0.3, -0.6);
        let v = s.eval(&[x, y]).unwrap();
        let expect: [f64; 6] = [1.0, x, y, 2.0 * x * x - 1.0, x * y, 2.0 * y * y - 1.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn distinct_univariate_points_give_nonsingular_square_vandermonde() {
        let b = MultiIndexBasis::enumerate(1, 6);
        let pts: Vec<Vec<f64>> = (0..6).map(|k| vec![-1.0 + 0.4 * k as f64]).collect();
        let v = vandermonde(&b, &pts).unwrap();
        assert!(Lu::factor(&v).is_ok());
    }

    proptest! {
        #[test]
        fn prefix_and_degree_monotone(d in 1usize..5, n in 1usize..60) {
            let small = MultiIndexBasis::enumerate(d, n);
            let big = MultiIndexBasis::enumerate(d, n + 1);
            prop_assert_eq!(small.indices(), &big.indices()[..n]);
            prop_assert!(big.indices().windows(2).all(|w| w[0].degree() <= w[1].degree()));
            prop_assert_eq!(big.indices()[0].degree(), 0);
            let set: std::collections::HashSet<_> = big.indices().iter().collect();
            prop_assert_eq!(set.len(), n + 1);
            let within_degree_lex = big.indices().windows(2).all(|w| {
                w[0].degree() < w[1].degree() || w[0].exponents() > w[1].exponents()
            });
            prop_assert!(within_degree_lex);
        }

        #[test]
        fn recursive_evaluation_matches_direct(d in 1usize..4, n in 1usize..40,
                                               x in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let b = MultiIndexBasis::enumerate(d, n);
            let p = &x[..d];
            let mut out = vec![0.0; n];
            b.eval_into(p, &mut out);
            let space = PolynomialSpace::raw(b.clone());
            prop_assert_eq!(space.eval(p).unwrap(), out.clone());
            for (m, v) in b.indices().iter().zip(&out) {
                let direct = evaluate_monomial(m, p).unwrap();
                prop_assert!((direct - v).abs() <= 1e-12 * (1.0 + direct.abs()));
            }
        }
    }
}
