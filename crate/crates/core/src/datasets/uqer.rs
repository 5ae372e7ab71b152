//! Horn clauses with universally quantified, pairwise distinct node and
//! relation variables, and a brute-force derivation oracle.
//!
//! A clause has node variables `E₁..E_M`, relation variables `C₁..C_K` and a
//! body given by atoms `(u, c, v)` meaning `(E_u, C_c, E_v)` (0-based here).
//! For every assignment of distinct nodes and distinct relations satisfying
//! all body atoms, the clause derives `(E₁, C₁, E_h)`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, Triplet};

pub const DEFAULT_BUDGET: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UqerClause {
    pub m: usize,
    pub k: usize,
    /// 1-based head node variable; the head is `(E₁, C₁, E_h)`.
    pub h: usize,
    pub atoms: Vec<(usize, usize, usize)>,
}

impl UqerClause {
    pub fn new(m: usize, k: usize, h: usize, atoms: Vec<(usize, usize, usize)>) -> Result<Self> {
        let mut atoms = atoms;
        atoms.sort_unstable();
        atoms.dedup();
        let c = Self { m, k, h, atoms };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.m == 0 || self.k == 0 {
            return bad("clause needs at least one node and one relation variable".into());
        }
        if !(1..=2).contains(&self.h) || self.h > self.m {
            return bad(format!("head variable h={} must be 1 or 2 and at most M", self.h));
        }
        if self.atoms.is_empty() {
            return bad("clause body is empty".into());
        }
        for &(u, c, v) in &self.atoms {
            if u >= self.m || v >= self.m || c >= self.k {
                return bad(format!("atom ({u}, {c}, {v}) out of range for M={}, K={}", self.m, self.k));
            }
        }
        for u in self.h..self.m {
            if !self.atoms.iter().any(|&(a, _, b)| a == u || b == u) {
                return bad(format!("node variable {} does not occur in the body", u + 1));
            }
        }
        for c in 1..self.k {
            if !self.atoms.iter().any(|&(_, x, _)| x == c) {
                return bad(format!("relation variable {} does not occur in the body", c + 1));
            }
        }
        Ok(())
    }

    /// Indicator tensor `B` of shape `M × K × M`, row-major.
    pub fn indicator(&self) -> Vec<bool> {
        let mut b = vec![false; self.m * self.k * self.m];
        for &(u, c, v) in &self.atoms {
            b[(u * self.k + c) * self.m + v] = true;
        }
        b
    }
}

/// The grandparent rule of the tree benchmark.
///
/// With distinct relation variables, `(E₁,C₁,E₃) ∧ (E₃,C₂,E₂) ⇒ (E₁,C₁,E₂)`
/// only fires when the two hops use different relations; the same-relation
/// case is the one-relation clause `(E₁,C₁,E₃) ∧ (E₃,C₁,E₂) ⇒ (E₁,C₁,E₂)`.
pub fn fd2_clauses() -> Vec<UqerClause> {
    vec![
        UqerClause::new(3, 2, 2, vec![(0, 0, 2), (2, 1, 1)]).unwrap(),
        UqerClause::new(3, 1, 2, vec![(0, 0, 2), (2, 0, 1)]).unwrap(),
    ]
}

struct Search<'a> {
    clause: &'a UqerClause,
    g: &'a KnowledgeGraph,
    out_adj: Vec<Vec<Vec<usize>>>,
    in_adj: Vec<Vec<Vec<usize>>>,
    rels: Vec<usize>,
    nodes: Vec<usize>,
    budget: u64,
    visited: u64,
    derived: BTreeSet<Triplet>,
}

impl Search<'_> {
    fn atom_holds(&self, &(u, c, v): &(usize, usize, usize)) -> bool {
        self.g
            .contains(&Triplet::new(self.nodes[u], self.rels[c], self.nodes[v]))
    }

    fn relations(&mut self, depth: usize) -> Result<()> {
        if depth == self.clause.k {
            return self.nodes_from(0);
        }
        for r in 0..self.g.num_relations() {
            if self.rels[..depth].contains(&r) {
                continue;
            }
            self.rels[depth] = r;
            self.relations(depth + 1)?;
        }
        Ok(())
    }

    fn nodes_from(&mut self, x: usize) -> Result<()> {
        if x == self.clause.m {
            self.derived.insert(Triplet::new(
                self.nodes[0],
                self.rels[0],
                self.nodes[self.clause.h - 1],
            ));
            return Ok(());
        }
        // Narrow candidates through an atom linking x to an assigned variable.
        let link = self.clause.atoms.iter().find_map(|&(u, c, v)| {
            if v == x && u < x {
                Some(self.out_adj[self.rels[c]][self.nodes[u]].clone())
            } else if u == x && v < x {
                Some(self.in_adj[self.rels[c]][self.nodes[v]].clone())
            } else {
                None
            }
        });
        let candidates = link.unwrap_or_else(|| (0..self.g.num_nodes()).collect());
        for e in candidates {
            self.visited += 1;
            if self.visited > self.budget {
                return Err(Error::Budget { budget: self.budget });
            }
            if self.nodes[..x].contains(&e) {
                continue;
            }
            self.nodes[x] = e;
            let ok = self
                .clause
                .atoms
                .iter()
                .filter(|&&(u, _, v)| u.max(v) == x)
                .all(|a| self.atom_holds(a));
            if ok {
                self.nodes_from(x + 1)?;
            }
        }
        Ok(())
    }
}

pub fn uqer_derive(clause: &UqerClause, g: &KnowledgeGraph) -> Result<BTreeSet<Triplet>> {
    uqer_derive_with_budget(clause, g, DEFAULT_BUDGET)
}

/// All head triplets derived by `clause` on `g`; errors once more than
/// `budget` partial assignments have been visited.
pub fn uqer_derive_with_budget(
    clause: &UqerClause,
    g: &KnowledgeGraph,
    budget: u64,
) -> Result<BTreeSet<Triplet>> {
    clause.validate()?;
    if g.num_nodes() < clause.m || g.num_relations() < clause.k {
        return Err(Error::Invalid(format!(
            "clause needs at least {} nodes and {} relations",
            clause.m, clause.k
        )));
    }
    let n = g.num_nodes();
    let mut out_adj = vec![vec![Vec::new(); n]; g.num_relations()];
    let mut in_adj = vec![vec![Vec::new(); n]; g.num_relations()];
    for t in g.triplets() {
        out_adj[t.relation][t.head].push(t.tail);
        in_adj[t.relation][t.tail].push(t.head);
    }
    let mut s = Search {
        clause,
        g,
        out_adj,
        in_adj,
        rels: vec![0; clause.k],
        nodes: vec![0; clause.m],
        budget,
        visited: 0,
        derived: BTreeSet::new(),
    };
    s.relations(0)?;
    Ok(s.derived)
}

/// Union of the derivations of several clauses.
pub fn uqer_derive_all(clauses: &[UqerClause], g: &KnowledgeGraph) -> Result<BTreeSet<Triplet>> {
    let mut out = BTreeSet::new();
    for c in clauses {
        out.extend(uqer_derive(c, g)?);
    }
    Ok(out)
}

/// M, K, h and atoms of the clause being read.
type Partial = Option<(Option<usize>, Option<usize>, Option<usize>, Vec<(usize, usize, usize)>)>;

/// Clause file text: blocks introduced by `clause`, with `M`, `K`, `h` lines
/// and one `atom u c v` line per body atom (0-based). `#` starts a comment.
pub fn parse_clauses(text: &str) -> Result<Vec<UqerClause>> {
    let mut out = Vec::new();
    let mut cur: Partial = None;
    let finish = |cur: Partial,
                  out: &mut Vec<UqerClause>|
     -> Result<()> {
        if let Some((m, k, h, atoms)) = cur {
            let need = |v: Option<usize>, name: &str| {
                v.ok_or_else(|| Error::Schema(format!("clause is missing `{name}`")))
            };
            out.push(UqerClause::new(need(m, "M")?, need(k, "K")?, need(h, "h")?, atoms)?);
        }
        Ok(())
    };
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Schema(format!("line {}: {msg}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<usize>().map_err(|_| err(&format!("not a number: {s:?}")));
        match fields.as_slice() {
            ["clause"] => {
                finish(cur.take(), &mut out)?;
                cur = Some((None, None, None, Vec::new()));
            }
            [key, value] if cur.is_some() => {
                let c = cur.as_mut().unwrap();
                let v = Some(num(value)?);
                match *key {
                    "M" => c.0 = v,
                    "K" => c.1 = v,
                    "h" => c.2 = v,
                    _ => return Err(err(&format!("unknown key {key:?}"))),
                }
            }
            ["atom", u, c, v] if cur.is_some() => {
                cur.as_mut().unwrap().3.push((num(u)?, num(c)?, num(v)?));
            }
            _ => return Err(err(&format!("unexpected line {line:?}"))),
        }
    }
    finish(cur, &mut out)?;
    Ok(out)
}

pub fn format_clauses(clauses: &[UqerClause]) -> String {
    let mut s = String::new();
    for c in clauses {
        let _ = writeln!(s, "clause\nM {}\nK {}\nh {}", c.m, c.k, c.h);
        for (u, r, v) in &c.atoms {
            let _ = writeln!(s, "atom {u} {r} {v}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::fd2::generate_fd2;

    #[test]
    fn side_conditions() {
        assert!(UqerClause::new(3, 2, 2, vec![(0, 0, 1)]).is_err());
        assert!(UqerClause::new(2, 2, 2, vec![(0, 0, 1)]).is_err());
        assert!(UqerClause::new(2, 1, 3, vec![(0, 0, 1)]).is_err());
        assert!(UqerClause::new(2, 1, 2, vec![(0, 0, 1)]).is_ok());
        let b = fd2_clauses()[0].indicator();
        assert_eq!(b.iter().filter(|&&x| x).count(), 2);
        let at = |u: usize, c: usize, v: usize| (u * 2 + c) * 3 + v;
        assert!(b[at(0, 0, 2)] && b[at(2, 1, 1)]);
    }

    #[test]
    fn tautology_returns_graph() {
        let g = KnowledgeGraph::new(
            [Triplet::new(0, 0, 1), Triplet::new(1, 1, 2), Triplet::new(2, 0, 0)],
            3,
            2,
        )
        .unwrap();
        let c = UqerClause::new(2, 1, 2, vec![(0, 0, 1)]).unwrap();
        let got: Vec<Triplet> = uqer_derive(&c, &g).unwrap().into_iter().collect();
        assert_eq!(got, g.triplets().to_vec());
    }

    #[test]
    fn unsatisfiable_body() {
        let g = KnowledgeGraph::new([Triplet::new(0, 0, 1)], 3, 2).unwrap();
        assert!(uqer_derive(&fd2_clauses()[0], &g).unwrap().is_empty());
    }

    #[test]
    fn strict_two_relation_clause_gives_parity_mismatches() {
        let f = generate_fd2(&[4], true);
        let g = KnowledgeGraph::new(f.observed.iter().copied(), f.num_nodes, f.num_relations).unwrap();
        let strict = uqer_derive(&fd2_clauses()[0], &g).unwrap();
        let expected: BTreeSet<Triplet> = f
            .queries
            .iter()
            .filter(|q| {
                let u1 = (q.head - 1) / 2;
                q.head % 2 != u1 % 2
            })
            .copied()
            .collect();
        assert_eq!(strict, expected);
        assert_eq!(strict.len() * 2, f.queries.len());
    }

    #[test]
    fn budget_is_enforced() {
        let g = KnowledgeGraph::new((0..20).map(|i| Triplet::new(i, 0, (i + 1) % 20)), 20, 2).unwrap();
        let c = UqerClause::new(3, 1, 2, vec![(0, 0, 1), (1, 0, 2)]).unwrap();
        assert!(matches!(
            uqer_derive_with_budget(&c, &g, 10),
            Err(Error::Budget { budget: 10 })
        ));
    }

    #[test]
    fn clause_file_round_trip() {
        let cs = fd2_clauses();
        let text = format_clauses(&cs);
        assert_eq!(parse_clauses(&text).unwrap(), cs);
        assert!(parse_clauses("clause\nM 3\nK 2\natom 0 0 2\n").is_err());
        assert!(parse_clauses("atom 0 0 1\n").is_err());
    }
}
