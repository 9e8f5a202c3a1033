//! Attention visibility relations for the language-model variants.
//!
//! Rows are queries and columns keys, both 0-based. `allow(q, k)` means query
//! `q` may read key `k`.

use std::fmt;

use crate::error::{Error, Result};
use crate::spans::SpanLayout;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMask {
    n: usize,
    allow: Vec<bool>,
}

impl VisibilityMask {
    fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(n * n);
        for q in 0..n {
            for k in 0..n {
                allow.push(f(q, k));
            }
        }
        VisibilityMask { n, allow }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.n + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.n..(q + 1) * self.n]
    }

    /// Row-major `n × n` flags, the layout `Tape::masked_softmax` expects.
    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    pub fn validate(&self) -> Result<()> {
        match (0..self.n).find(|q| !self.row(*q).iter().any(|a| *a)) {
            Some(q) => Err(Error::contract(format!("query row {q} sees no key"))),
            None => Ok(()),
        }
    }

    /// ASCII grid: one line per query, `█` allowed and `·` blocked.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.n * (self.n * 3 + 1));
        for q in 0..self.n {
            out.extend(self.row(q).iter().map(|a| if *a { '█' } else { '·' }));
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for VisibilityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Lower-triangular, diagonal included.
pub fn causal_mask(n: usize) -> Result<VisibilityMask> {
    if n == 0 {
        return Err(Error::dim("mask over zero positions"));
    }
    Ok(VisibilityMask::from_fn(n, |q, k| k <= q))
}

pub fn noncausal_mask(n: usize) -> Result<VisibilityMask> {
    if n == 0 {
        return Err(Error::dim("mask over zero positions"));
    }
    Ok(VisibilityMask::from_fn(n, |_, _| true))
}

/// The first `prefix` positions see each other; later ones are causal.
pub fn prefix_mask(n: usize, prefix: usize) -> Result<VisibilityMask> {
    if n == 0 {
        return Err(Error::dim("mask over zero positions"));
    }
    if prefix > n {
        return Err(Error::dim(format!(
            "prefix {prefix} longer than {n} positions"
        )));
    }
    Ok(VisibilityMask::from_fn(n, |q, k| {
        k <= q || (q < prefix && k < prefix)
    }))
}

/// End-to-end information flow of the semi-causal stack: a query sees every
/// earlier position and every position of its own span.
///
/// This is a reference relation for tests; the decoder itself always runs
/// under [`causal_mask`].
pub fn semicausal_flow(layout: &SpanLayout) -> Result<VisibilityMask> {
    let n = layout.n();
    if n == 0 {
        return Err(Error::dim("mask over zero positions"));
    }
    let mut span_of = vec![None; n];
    for (i, s) in layout.spans().iter().enumerate() {
        for r in s.rows() {
            span_of[r] = Some(i);
        }
    }
    Ok(VisibilityMask::from_fn(n, |q, k| {
        k <= q || (span_of[q].is_some() && span_of[q] == span_of[k])
    }))
}
