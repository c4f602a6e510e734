//! Polynomials over boolean variables.
//!
//! A [`BinaryPolynomial`] is a sparse map from monomials (sorted sets of
//! distinct variable indices) to real coefficients. Because every variable is
//! boolean, `x * x == x`, so repeated variables collapse on insertion and the
//! representation is canonical: two polynomials that agree on every assignment
//! and were built from the same monomials compare equal.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on the number of variables accepted by [`BinaryPolynomial::brute_force_minimize`].
pub const DEFAULT_BRUTE_FORCE_CAP: usize = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("assignment has {got} bits but the polynomial has {expected} variables")]
    Dimension { expected: usize, got: usize },
    #[error("polynomial has {num_vars} variables, above the cap of {cap}")]
    TooLarge { num_vars: usize, cap: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("variable {var} out of range for {num_vars} variables")]
    VariableOutOfRange { var: usize, num_vars: usize },
}

/// A real-coefficient polynomial over `num_vars` boolean variables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolyJson", try_from = "PolyJson")]
pub struct BinaryPolynomial {
    num_vars: usize,
    terms: BTreeMap<Vec<usize>, f64>,
}

impl BinaryPolynomial {
    /// The zero polynomial over `num_vars` variables.
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(num_vars: usize, value: f64) -> Self {
        let mut p = Self::new(num_vars);
        p.add_term(&[], value);
        p
    }

    /// Builds a polynomial from `(monomial, coefficient)` pairs.
    pub fn from_terms<'a, I>(num_vars: usize, terms: I) -> Self
    where
        I: IntoIterator<Item = (&'a [usize], f64)>,
    {
        let mut p = Self::new(num_vars);
        for (vars, c) in terms {
            p.add_term(vars, c);
        }
        p
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    /// Widens the variable range. Never shrinks it.
    pub fn set_num_vars(&mut self, num_vars: usize) {
        self.num_vars = self.num_vars.max(num_vars);
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Largest monomial size; 0 for constants and for the zero polynomial.
    pub fn degree(&self) -> usize {
        self.terms.keys().map(Vec::len).max().unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[usize], f64)> + '_ {
        self.terms.iter().map(|(k, &c)| (k.as_slice(), c))
    }

    /// Coefficient of a monomial, given in any order and possibly with repeats.
    pub fn coefficient(&self, vars: &[usize]) -> f64 {
        self.terms.get(&canonical(vars)).copied().unwrap_or(0.0)
    }

    pub fn constant_term(&self) -> f64 {
        self.coefficient(&[])
    }

    /// Adds `coeff` times the product of `vars`. Variables beyond the current
    /// range widen it.
    pub fn add_term(&mut self, vars: &[usize], coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        let key = canonical(vars);
        if let Some(&last) = key.last() {
            self.num_vars = self.num_vars.max(last + 1);
        }
        self.accumulate(key, coeff);
    }

    fn accumulate(&mut self, key: Vec<usize>, coeff: f64) {
        use std::collections::btree_map::Entry;
        match self.terms.entry(key) {
            Entry::Vacant(e) => {
                e.insert(coeff);
            }
            Entry::Occupied(mut e) => {
                let v = *e.get() + coeff;
                if v == 0.0 {
                    e.remove();
                } else {
                    *e.get_mut() = v;
                }
            }
        }
    }

    /// Sum of absolute coefficients, constant included.
    pub fn l1_norm(&self) -> f64 {
        self.terms.values().map(|c| c.abs()).sum()
    }

    /// Largest absolute coefficient over non-constant monomials.
    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms
            .iter()
            .filter(|(k, _)| !k.is_empty())
            .map(|(_, c)| c.abs())
            .fold(0.0, f64::max)
    }

    pub fn evaluate(&self, bits: &[bool]) -> Result<f64, PolyError> {
        if bits.len() != self.num_vars {
            return Err(PolyError::Dimension {
                expected: self.num_vars,
                got: bits.len(),
            });
        }
        Ok(self.evaluate_unchecked(bits))
    }

    pub(crate) fn evaluate_unchecked(&self, bits: &[bool]) -> f64 {
        self.terms
            .iter()
            .filter(|(k, _)| k.iter().all(|&v| bits[v]))
            .map(|(_, &c)| c)
            .fold(0.0, |acc, c| acc + c)
    }

    /// `self + c * other`, with `num_vars` the larger of the two.
    pub fn add_scaled(&self, other: &BinaryPolynomial, c: f64) -> BinaryPolynomial {
        let mut out = self.clone();
        out.add_scaled_in_place(other, c);
        out
    }

    pub fn add_scaled_in_place(&mut self, other: &BinaryPolynomial, c: f64) {
        self.num_vars = self.num_vars.max(other.num_vars);
        if c == 0.0 {
            return;
        }
        for (k, &v) in &other.terms {
            let scaled = c * v;
            if scaled != 0.0 {
                self.accumulate(k.clone(), scaled);
            }
        }
    }

    pub fn scaled(&self, c: f64) -> BinaryPolynomial {
        BinaryPolynomial::new(self.num_vars).add_scaled(self, c)
    }

    /// Exhaustive minimization with the default variable cap.
    pub fn brute_force_minimize(&self) -> Result<(Vec<bool>, f64), PolyError> {
        self.brute_force_minimize_capped(DEFAULT_BRUTE_FORCE_CAP)
    }

    /// Enumerates every assignment in lexicographic order (bit 0 most
    /// significant) and returns the first one attaining the minimum.
    pub fn brute_force_minimize_capped(
        &self,
        cap: usize,
    ) -> Result<(Vec<bool>, f64), PolyError> {
        let n = self.num_vars;
        if n > cap || n >= usize::BITS as usize {
            return Err(PolyError::TooLarge { num_vars: n, cap });
        }
        let compiled = CompiledPoly::new(self);
        let mut bits = vec![false; n];
        let mut counts = compiled.zero_counts();
        let mut value = compiled.value_at_zero();
        let mut best_bits = bits.clone();
        let mut best = value;
        let tol = 1e-9 * (1.0 + self.l1_norm());

        let total: u64 = 1u64 << n;
        for step in 1..total {
            // Binary counter over bits[n-1] (least significant) .. bits[0]:
            // the trailing run of ones clears and the next zero sets.
            let flips = step.trailing_zeros() as usize + 1;
            for k in 0..flips {
                let v = n - 1 - k;
                value += compiled.flip_delta(v, &bits, &counts);
                compiled.apply_flip(v, &mut bits, &mut counts);
            }
            if value < best - tol {
                best = value;
                best_bits.copy_from_slice(&bits);
            }
        }
        let exact = self.evaluate_unchecked(&best_bits);
        Ok((best_bits, exact))
    }

    /// Rewrites every monomial of degree three or more into quadratic form
    /// using auxiliary variables, each constrained to equal the product of the
    /// pair it replaces by a penalty `λ (xy − 2xa − 2ya + 3a)`.
    ///
    /// The penalty is zero exactly when `a == xy` and at least `λ` otherwise, so
    /// any `λ` above the polynomial's total coefficient swing keeps every
    /// minimizer of the reduction consistent with the original polynomial.
    pub fn reduce_to_quadratic(&self, penalty: Penalty) -> Result<Reduction, PolyError> {
        let lambda = match penalty {
            Penalty::Auto => 1.0 + 2.0 * self.l1_norm(),
            Penalty::Fixed(l) if l > 0.0 && l.is_finite() => l,
            Penalty::Fixed(l) => {
                return Err(PolyError::Parameter(format!(
                    "reduction penalty must be positive and finite, got {l}"
                )))
            }
        };
        let original_vars = self.num_vars;
        if self.degree() <= 2 {
            return Ok(Reduction {
                qubo: self.clone(),
                original_vars,
                substitutions: Vec::new(),
                penalty: lambda,
            });
        }

        let mut out = BinaryPolynomial::new(original_vars);
        let mut high: Vec<(Vec<usize>, f64)> = Vec::new();
        for (k, &c) in &self.terms {
            if k.len() <= 2 {
                out.accumulate(k.clone(), c);
            } else {
                high.push((k.clone(), c));
            }
        }

        let mut pair_members: HashMap<(usize, usize), BTreeSet<usize>> = HashMap::new();
        for (idx, (mono, _)) in high.iter().enumerate() {
            for_each_pair(mono, |p| {
                pair_members.entry(p).or_default().insert(idx);
            });
        }

        let mut substitutions = Vec::new();
        let mut next_var = original_vars;
        while let Some(pair) = most_frequent_pair(&pair_members) {
            let aux = next_var;
            next_var += 1;
            substitutions.push(Substitution {
                aux,
                left: pair.0,
                right: pair.1,
            });
            let members: Vec<usize> = pair_members
                .get(&pair)
                .map(|s| s.iter().copied().collect())
                .unwrap_or_default();
            for idx in members {
                let mono = &mut high[idx].0;
                for_each_pair(mono, |p| {
                    if let Some(set) = pair_members.get_mut(&p) {
                        set.remove(&idx);
                        if set.is_empty() {
                            pair_members.remove(&p);
                        }
                    }
                });
                mono.retain(|&v| v != pair.0 && v != pair.1);
                // aux is the largest index so far, the key stays sorted
                mono.push(aux);
                if mono.len() > 2 {
                    for_each_pair(mono, |p| {
                        pair_members.entry(p).or_default().insert(idx);
                    });
                }
            }
        }

        out.set_num_vars(next_var);
        for (mono, c) in high {
            out.accumulate(mono, c);
        }
        for s in &substitutions {
            out.add_term(&[s.left, s.right], lambda);
            out.add_term(&[s.left, s.aux], -2.0 * lambda);
            out.add_term(&[s.right, s.aux], -2.0 * lambda);
            out.add_term(&[s.aux], 3.0 * lambda);
        }
        Ok(Reduction {
            qubo: out,
            original_vars,
            substitutions,
            penalty: lambda,
        })
    }
}

fn canonical(vars: &[usize]) -> Vec<usize> {
    let mut key = vars.to_vec();
    key.sort_unstable();
    key.dedup();
    key
}

fn for_each_pair(mono: &[usize], mut f: impl FnMut((usize, usize))) {
    for a in 0..mono.len() {
        for b in a + 1..mono.len() {
            f((mono[a], mono[b]));
        }
    }
}

/// Highest member count; ties go to the lexicographically smallest pair.
fn most_frequent_pair(
    pair_members: &HashMap<(usize, usize), BTreeSet<usize>>,
) -> Option<(usize, usize)> {
    pair_members
        .iter()
        .filter(|(_, s)| !s.is_empty())
        .max_by(|(pa, sa), (pb, sb)| sa.len().cmp(&sb.len()).then(pb.cmp(pa)))
        .map(|(&p, _)| p)
}

/// Penalty weight for [`BinaryPolynomial::reduce_to_quadratic`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Penalty {
    /// `1 + 2 * Σ|coefficients|`.
    #[default]
    Auto,
    Fixed(f64),
}

/// One auxiliary variable standing in for the product `left * right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub aux: usize,
    pub left: usize,
    pub right: usize,
}

/// Output of order reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub qubo: BinaryPolynomial,
    pub original_vars: usize,
    pub substitutions: Vec<Substitution>,
    pub penalty: f64,
}

impl Reduction {
    pub fn num_aux(&self) -> usize {
        self.substitutions.len()
    }

    /// Restricts an assignment of the reduced polynomial to the original variables.
    pub fn project(&self, bits: &[bool]) -> Vec<bool> {
        bits[..self.original_vars].to_vec()
    }

    /// Extends an original assignment with consistent auxiliary values.
    pub fn lift(&self, bits: &[bool]) -> Vec<bool> {
        let mut full = bits.to_vec();
        full.resize(self.qubo.num_vars(), false);
        for s in &self.substitutions {
            full[s.aux] = full[s.left] && full[s.right];
        }
        full
    }

    /// True when every auxiliary variable equals the product of its pair.
    pub fn is_consistent(&self, bits: &[bool]) -> bool {
        self.substitutions
            .iter()
            .all(|s| bits[s.aux] == (bits[s.left] && bits[s.right]))
    }
}

/// Term-incidence view of a polynomial for single-flip energy updates.
///
/// Each term tracks how many of its variables are currently one; a term is
/// active when that count equals its size. Flipping a variable only touches
/// the terms that contain it.
#[derive(Debug, Clone)]
pub(crate) struct CompiledPoly {
    coeffs: Vec<f64>,
    sizes: Vec<u32>,
    var_terms: Vec<Vec<u32>>,
    constant: f64,
}

impl CompiledPoly {
    pub(crate) fn new(p: &BinaryPolynomial) -> Self {
        let mut coeffs = Vec::new();
        let mut sizes = Vec::new();
        let mut var_terms = vec![Vec::new(); p.num_vars];
        let mut constant = 0.0;
        for (k, &c) in &p.terms {
            if k.is_empty() {
                constant += c;
                continue;
            }
            let id = coeffs.len() as u32;
            coeffs.push(c);
            sizes.push(k.len() as u32);
            for &v in k {
                var_terms[v].push(id);
            }
        }
        Self {
            coeffs,
            sizes,
            var_terms,
            constant,
        }
    }

    pub(crate) fn num_vars(&self) -> usize {
        self.var_terms.len()
    }

    pub(crate) fn zero_counts(&self) -> Vec<u32> {
        vec![0; self.coeffs.len()]
    }

    pub(crate) fn value_at_zero(&self) -> f64 {
        self.constant
    }

    /// Per-term one-counts and the energy of `bits`.
    pub(crate) fn state(&self, bits: &[bool]) -> (Vec<u32>, f64) {
        let mut counts = self.zero_counts();
        for (v, terms) in self.var_terms.iter().enumerate() {
            if bits[v] {
                for &t in terms {
                    counts[t as usize] += 1;
                }
            }
        }
        let energy = self.constant
            + counts
                .iter()
                .zip(&self.sizes)
                .zip(&self.coeffs)
                .filter(|((c, s), _)| c == s)
                .map(|(_, &k)| k)
                .sum::<f64>();
        (counts, energy)
    }

    /// Energy change from flipping `v`.
    pub(crate) fn flip_delta(&self, v: usize, bits: &[bool], counts: &[u32]) -> f64 {
        let mut delta = 0.0;
        if bits[v] {
            for &t in &self.var_terms[v] {
                let t = t as usize;
                if counts[t] == self.sizes[t] {
                    delta -= self.coeffs[t];
                }
            }
        } else {
            for &t in &self.var_terms[v] {
                let t = t as usize;
                if counts[t] + 1 == self.sizes[t] {
                    delta += self.coeffs[t];
                }
            }
        }
        delta
    }

    pub(crate) fn apply_flip(&self, v: usize, bits: &mut [bool], counts: &mut [u32]) {
        if bits[v] {
            for &t in &self.var_terms[v] {
                counts[t as usize] -= 1;
            }
        } else {
            for &t in &self.var_terms[v] {
                counts[t as usize] += 1;
            }
        }
        bits[v] = !bits[v];
    }
}

#[derive(Serialize, Deserialize)]
struct PolyJson {
    num_vars: usize,
    terms: Vec<TermJson>,
}

#[derive(Serialize, Deserialize)]
struct TermJson {
    vars: Vec<usize>,
    coeff: f64,
}

impl From<BinaryPolynomial> for PolyJson {
    fn from(p: BinaryPolynomial) -> Self {
        PolyJson {
            num_vars: p.num_vars,
            terms: p
                .terms
                .into_iter()
                .map(|(vars, coeff)| TermJson { vars, coeff })
                .collect(),
        }
    }
}

impl TryFrom<PolyJson> for BinaryPolynomial {
    type Error = PolyError;

    fn try_from(j: PolyJson) -> Result<Self, Self::Error> {
        let mut p = BinaryPolynomial::new(j.num_vars);
        for t in j.terms {
            if let Some(&var) = t.vars.iter().find(|&&v| v >= j.num_vars) {
                return Err(PolyError::VariableOutOfRange {
                    var,
                    num_vars: j.num_vars,
                });
            }
            p.add_term(&t.vars, t.coeff);
        }
        Ok(p)
    }
}
