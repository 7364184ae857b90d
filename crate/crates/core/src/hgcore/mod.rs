//! Hypergraphs over a fixed node set, their incidence matrices, and the
//! assignment-based similarity between two hypergraphs with equal edge counts.
//!
//! Node indices are 0-based in memory. The text format is 1-based:
//!
//! ```text
//! n m
//! <labels of edge 1>
//! ...
//! <labels of edge m>
//! ```

mod assignment;

pub use assignment::{assignment_value, optimal_assignment, EdgeMapping};

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A hypergraph on nodes `0..n` with an ordered list of hyperedges.
///
/// Every hyperedge is stored sorted and duplicate-free. Duplicate hyperedges
/// are allowed since concatenation produces them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Hypergraph {
    n: usize,
    edges: Vec<Vec<usize>>,
}

impl Hypergraph {
    /// Build a hypergraph from 0-based edge lists. Edges are sorted; repeated
    /// nodes within a single edge are rejected.
    pub fn new(n: usize, edges: Vec<Vec<usize>>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidHyperedge("node count must be positive".into()));
        }
        if edges.is_empty() {
            return Err(Error::InvalidHyperedge("at least one hyperedge required".into()));
        }
        let mut out = Vec::with_capacity(edges.len());
        for (j, mut e) in edges.into_iter().enumerate() {
            if e.is_empty() {
                return Err(Error::InvalidHyperedge(format!("edge {j} is empty")));
            }
            e.sort_unstable();
            if e.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidHyperedge(format!("edge {j} repeats a node")));
            }
            if let Some(&last) = e.last() {
                if last >= n {
                    return Err(Error::InvalidHyperedge(format!(
                        "edge {j} references node {last} but n = {n}"
                    )));
                }
            }
            out.push(e);
        }
        Ok(Self { n, edges: out })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Vec<usize>] {
        &self.edges
    }

    pub fn edge(&self, j: usize) -> &[usize] {
        &self.edges[j]
    }

    pub fn incidence_matrix(&self) -> IncidenceMatrix {
        let mut a = DMatrix::zeros(self.n, self.m());
        for (j, e) in self.edges.iter().enumerate() {
            for &i in e {
                a[(i, j)] = 1.0;
            }
        }
        IncidenceMatrix(a)
    }

    /// Edges of `self` followed by the edges of `other`.
    pub fn concat(&self, other: &Hypergraph) -> Result<Hypergraph> {
        if self.n != other.n {
            return Err(Error::dim(format!(
                "concat of hypergraphs with {} and {} nodes",
                self.n, other.n
            )));
        }
        let mut edges = self.edges.clone();
        edges.extend(other.edges.iter().cloned());
        Ok(Hypergraph { n: self.n, edges })
    }

    /// Replace edge `j`. Used by the consensus search; validity is re-checked.
    pub(crate) fn with_edge(&self, j: usize, edge: Vec<usize>) -> Result<Hypergraph> {
        let mut edges = self.edges.clone();
        edges[j] = edge;
        Hypergraph::new(self.n, edges)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.n, self.m());
        for e in &self.edges {
            let line: Vec<String> = e.iter().map(|v| (v + 1).to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Hypergraph> {
        let parse_err = |reason: String| Error::Parse {
            context: "hypergraph".into(),
            reason,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| parse_err("empty input".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(format!("header: {e}")))?;
        let [n, m] = dims[..] else {
            return Err(parse_err(format!("header must be `n m`, got `{header}`")));
        };
        let mut edges = Vec::with_capacity(m);
        for line in lines {
            let mut e = Vec::new();
            for tok in line.split_whitespace() {
                let label: usize = tok
                    .parse()
                    .map_err(|err| parse_err(format!("label `{tok}`: {err}")))?;
                if label == 0 {
                    return Err(parse_err("labels are 1-based".into()));
                }
                e.push(label - 1);
            }
            edges.push(e);
        }
        if edges.len() != m {
            return Err(parse_err(format!("header says {m} edges, found {}", edges.len())));
        }
        Hypergraph::new(n, edges)
    }
}

/// Binary node-by-hyperedge matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMatrix(DMatrix<f64>);

impl IncidenceMatrix {
    /// Validate a 0/1 matrix whose columns are all non-empty.
    pub fn from_matrix(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::dim("incidence matrix must be non-empty"));
        }
        if a.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::InvalidHyperedge("incidence entries must be 0 or 1".into()));
        }
        for (j, col) in a.column_iter().enumerate() {
            if col.iter().all(|&x| x == 0.0) {
                return Err(Error::InvalidHyperedge(format!("column {j} is empty")));
            }
        }
        Ok(Self(a))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn m(&self) -> usize {
        self.0.ncols()
    }

    pub fn to_hypergraph(&self) -> Hypergraph {
        let edges = self
            .0
            .column_iter()
            .map(|c| (0..c.len()).filter(|&i| c[i] == 1.0).collect())
            .collect();
        Hypergraph::new(self.n(), edges).expect("validated incidence matrix")
    }
}

pub(crate) fn jaccard_sorted(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Jaccard ratio |e ∩ e'| / |e ∪ e'| of two node sets.
pub fn jaccard(e: &[usize], e_prime: &[usize]) -> Result<f64> {
    if e.is_empty() || e_prime.is_empty() {
        return Err(Error::InvalidHyperedge("jaccard of an empty set".into()));
    }
    let norm = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    Ok(jaccard_sorted(&norm(e), &norm(e_prime)))
}

/// Table of Jaccard ratios between every edge of `h` (rows) and of `h_prime`.
pub fn similarity_table(h: &Hypergraph, h_prime: &Hypergraph) -> Result<DMatrix<f64>> {
    check_same_shape(h, h_prime)?;
    let m = h.m();
    Ok(DMatrix::from_fn(m, m, |j, k| {
        jaccard_sorted(h.edge(j), h_prime.edge(k))
    }))
}

/// Mean Jaccard ratio under the best bijection between the two edge lists.
pub fn hypergraph_similarity(h: &Hypergraph, h_prime: &Hypergraph) -> Result<f64> {
    let table = similarity_table(h, h_prime)?;
    Ok(assignment_value(&table)?)
}

pub(crate) fn check_same_shape(h: &Hypergraph, h_prime: &Hypergraph) -> Result<()> {
    if h.n() != h_prime.n() || h.m() != h_prime.m() {
        return Err(Error::dim(format!(
            "hypergraph shapes differ: (n={}, m={}) vs (n={}, m={})",
            h.n(),
            h.m(),
            h_prime.n(),
            h_prime.m()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn figure_hypergraph() -> Hypergraph {
        Hypergraph::new(6, vec![vec![0, 1, 4, 5], vec![0, 1, 2], vec![2, 3], vec![3, 4]]).unwrap()
    }

    #[test]
    fn figure_incidence_matrix() {
        let a = figure_hypergraph().incidence_matrix();
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(6, 4, &[
            1., 1., 0., 0.,
            1., 1., 0., 0.,
            0., 1., 1., 0.,
            0., 0., 1., 1.,
            1., 0., 0., 1.,
            1., 0., 0., 0.,
        ]);
        assert_eq!(a.matrix(), &expected);
    }

    #[test]
    fn small_incidence_matrices() {
        let h = Hypergraph::new(1, vec![vec![0]]).unwrap();
        assert_eq!(h.incidence_matrix().matrix(), &DMatrix::from_element(1, 1, 1.0));
        let h = Hypergraph::new(2, vec![vec![0, 1], vec![1]]).unwrap();
        assert_eq!(
            h.incidence_matrix().matrix(),
            &DMatrix::from_row_slice(2, 2, &[1., 0., 1., 1.])
        );
    }

    #[test]
    fn construction_rejects_bad_edges() {
        assert!(Hypergraph::new(3, vec![]).is_err());
        assert!(Hypergraph::new(3, vec![vec![]]).is_err());
        assert!(Hypergraph::new(3, vec![vec![0, 3]]).is_err());
        assert!(Hypergraph::new(3, vec![vec![1, 1]]).is_err());
        // duplicate edges are fine
        assert!(Hypergraph::new(3, vec![vec![1, 2], vec![2, 1]]).is_ok());
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&[0, 1, 4, 5], &[0, 1, 2]).unwrap(), 2.0 / 5.0);
        assert_eq!(jaccard(&[2, 3], &[3, 2]).unwrap(), 1.0);
        assert_eq!(jaccard(&[0], &[1, 2]).unwrap(), 0.0);
        assert!(matches!(jaccard(&[], &[1]), Err(Error::InvalidHyperedge(_))));
    }

    #[test]
    fn similarity_table_against_reversed_edges() {
        let h = figure_hypergraph();
        let mut rev = h.edges().to_vec();
        rev.reverse();
        let hr = Hypergraph::new(6, rev).unwrap();
        let t = similarity_table(&h, &hr).unwrap();
        // anti-diagonal holds the identical pairs
        for j in 0..4 {
            assert_eq!(t[(j, 3 - j)], 1.0);
        }
        // e1 vs e2 (reversed index 2) = 2/5, e3 vs e4 = 1/3
        assert_eq!(t[(0, 2)], 2.0 / 5.0);
        assert_eq!(t[(2, 0)], 1.0 / 3.0);
        assert_eq!(t[(0, 1)], 0.0);
        assert_eq!(hypergraph_similarity(&h, &hr).unwrap(), 1.0);
    }

    #[test]
    fn similarity_rejects_shape_mismatch() {
        let h = figure_hypergraph();
        let g = Hypergraph::new(6, vec![vec![0]]).unwrap();
        assert!(matches!(hypergraph_similarity(&h, &g), Err(Error::Dimension(_))));
        let g = Hypergraph::new(5, vec![vec![0]; 4]).unwrap();
        assert!(matches!(similarity_table(&h, &g), Err(Error::Dimension(_))));
    }

    #[test]
    fn concat_juxtaposes_incidence_columns() {
        let h = figure_hypergraph();
        let g = Hypergraph::new(6, vec![vec![5], vec![0, 2]]).unwrap();
        let c = h.concat(&g).unwrap();
        assert_eq!(c.m(), 6);
        let a = c.incidence_matrix();
        assert_eq!(a.matrix().columns(0, 4), h.incidence_matrix().matrix().columns(0, 4));
        assert_eq!(a.matrix().columns(4, 2), g.incidence_matrix().matrix().columns(0, 2));
        assert_eq!(h.concat(&h).unwrap().m(), 8);
        assert!(h.concat(&Hypergraph::new(3, vec![vec![0]]).unwrap()).is_err());
    }

    #[test]
    fn text_round_trip() {
        let h = figure_hypergraph();
        let text = h.to_text();
        assert!(text.starts_with("6 4\n1 2 5 6\n"));
        assert_eq!(Hypergraph::from_text(&text).unwrap(), h);
        assert!(Hypergraph::from_text("3 2\n1 2\n").is_err());
        assert!(Hypergraph::from_text("3 1\n0 2\n").is_err());
    }

    #[test]
    fn incidence_validation() {
        let bad = DMatrix::from_row_slice(2, 2, &[1., 0., 0., 0.]);
        assert!(IncidenceMatrix::from_matrix(bad).is_err());
        let bad = DMatrix::from_row_slice(1, 1, &[0.5]);
        assert!(IncidenceMatrix::from_matrix(bad).is_err());
    }
}
