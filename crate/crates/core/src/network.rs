//! Days-together counts, threshold networks and the category heatmap.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterAssignment, Method};
use crate::error::{Error, Result};

/// `together[i][j]` = number of days stocks `i` and `j` shared a cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrenceMatrix {
    pub symbols: Vec<String>,
    pub together: Vec<Vec<u32>>,
    pub n_days: u32,
    pub method: Option<Method>,
}

impl CoOccurrenceMatrix {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Days the pair fell in different clusters.
    pub fn hamming(&self, i: usize, j: usize) -> u32 {
        self.n_days - self.together[i][j]
    }

    pub fn fraction(&self, i: usize, j: usize) -> f64 {
        self.together[i][j] as f64 / self.n_days as f64
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }
}

pub fn cooccurrence(assignments: &[ClusterAssignment]) -> Result<CoOccurrenceMatrix> {
    let first = assignments
        .first()
        .ok_or_else(|| Error::Input("no daily assignments to aggregate".into()))?;
    for a in assignments {
        if a.method != first.method {
            return Err(Error::Input(format!(
                "assignments mix methods ({} and {})",
                first.method, a.method
            )));
        }
        if a.symbols != first.symbols || a.labels.len() != a.symbols.len() {
            return Err(Error::Input(format!("assignment for {} has a different universe", a.date)));
        }
    }
    let n = first.symbols.len();
    let mut together = vec![vec![0u32; n]; n];
    for a in assignments {
        for i in 0..n {
            for j in i..n {
                if a.labels[i] == a.labels[j] {
                    together[i][j] += 1;
                    if i != j {
                        together[j][i] += 1;
                    }
                }
            }
        }
    }
    Ok(CoOccurrenceMatrix {
        symbols: first.symbols.clone(),
        together,
        n_days: assignments.len() as u32,
        method: Some(first.method),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: String,
    pub b: String,
    pub together_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub threshold_p: f64,
    pub edges: Vec<Edge>,
    /// Connected components of the non-isolated vertices, largest first.
    pub components: Vec<Vec<String>>,
}

impl NetworkGraph {
    /// Components with at least `min_size` members.
    pub fn components_at_least(&self, min_size: usize) -> impl Iterator<Item = &Vec<String>> {
        self.components.iter().filter(move |c| c.len() >= min_size)
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller index becomes the root, keeping results order-free
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Edge between every pair together on strictly more than `threshold_p` of days.
pub fn build_network(co: &CoOccurrenceMatrix, threshold_p: f64) -> Result<NetworkGraph> {
    if !(threshold_p > 0.0 && threshold_p < 1.0) {
        return Err(Error::Parameter(format!("threshold must be in (0, 1), got {threshold_p}")));
    }
    let n = co.len();
    let mut uf = UnionFind::new(n);
    let mut linked = vec![false; n];
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let f = co.fraction(i, j);
            if f > threshold_p {
                edges.push(Edge {
                    a: co.symbols[i].clone(),
                    b: co.symbols[j].clone(),
                    together_fraction: f,
                });
                uf.union(i, j);
                linked[i] = true;
                linked[j] = true;
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for i in (0..n).filter(|&i| linked[i]) {
        let root = uf.find(i);
        groups.entry(root).or_default().push(co.symbols[i].clone());
    }
    let mut components: Vec<Vec<String>> = groups.into_values().collect();
    components.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    Ok(NetworkGraph {
        threshold_p,
        edges,
        components,
    })
}

/// Heatmap band of a pair's together fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    /// p >= 0.80
    Red,
    /// 0.60 <= p < 0.80
    Green,
    /// 0.40 <= p < 0.60
    Blue,
    /// p < 0.40
    White,
}

impl Category {
    pub fn of(p: f64) -> Category {
        if p >= 0.80 {
            Category::Red
        } else if p >= 0.60 {
            Category::Green
        } else if p >= 0.40 {
            Category::Blue
        } else {
            Category::White
        }
    }

    pub fn letter(&self) -> char {
        match self {
            Category::Red => 'R',
            Category::Green => 'G',
            Category::Blue => 'B',
            Category::White => 'W',
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

pub fn category_matrix(co: &CoOccurrenceMatrix) -> Vec<Vec<Category>> {
    let n = co.len();
    (0..n)
        .map(|i| (0..n).map(|j| Category::of(co.fraction(i, j))).collect())
        .collect()
}

pub fn write_edges_csv<W: Write>(graph: &NetworkGraph, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["a", "b", "together_fraction"])?;
    for e in &graph.edges {
        w.write_record([e.a.as_str(), e.b.as_str(), &e.together_fraction.to_string()])?;
    }
    w.flush().map_err(Error::Stream)?;
    Ok(())
}

/// Undirected DOT graph; `min_size` drops smaller components.
pub fn write_dot<W: Write>(graph: &NetworkGraph, name: &str, min_size: usize, mut out: W) -> Result<()> {
    let keep: std::collections::BTreeSet<&str> = graph
        .components_at_least(min_size)
        .flatten()
        .map(String::as_str)
        .collect();
    writeln!(out, "graph \"{}\" {{", name.replace('"', "'"))?;
    writeln!(out, "  // together fraction > {}", graph.threshold_p)?;
    for (c, comp) in graph.components_at_least(min_size).enumerate() {
        writeln!(out, "  subgraph cluster_{c} {{")?;
        for s in comp {
            writeln!(out, "    \"{s}\";")?;
        }
        writeln!(out, "  }}")?;
    }
    for e in graph.edges.iter().filter(|e| keep.contains(e.a.as_str())) {
        writeln!(
            out,
            "  \"{}\" -- \"{}\" [weight={:.4}, label=\"{:.2}\"];",
            e.a, e.b, e.together_fraction, e.together_fraction
        )?;
    }
    writeln!(out, "}}")?;
    Ok(())
}

pub fn write_category_csv<W: Write>(co: &CoOccurrenceMatrix, out: W) -> Result<()> {
    let cats = category_matrix(co);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![String::new()];
    header.extend(co.symbols.iter().cloned());
    w.write_record(&header)?;
    for (s, row) in co.symbols.iter().zip(cats) {
        let mut r = vec![s.clone()];
        r.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&r)?;
    }
    w.flush().map_err(Error::Stream)?;
    Ok(())
}

/// Square CSV of days-together counts (header row/column of symbols).
pub fn write_together_csv<W: Write>(co: &CoOccurrenceMatrix, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![String::new()];
    header.extend(co.symbols.iter().cloned());
    w.write_record(&header)?;
    for (s, row) in co.symbols.iter().zip(&co.together) {
        let mut r = vec![s.clone()];
        r.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&r)?;
    }
    w.flush().map_err(Error::Stream)?;
    Ok(())
}
