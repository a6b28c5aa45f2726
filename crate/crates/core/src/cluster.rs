//! Common-input address clustering.
//!
//! Every pair of addresses spent together as inputs of one transaction is
//! merged into the same entity. Entity ids are canonical: clusters are
//! numbered by the rank of their lexicographically smallest address, so the
//! map does not depend on transaction order.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};

use thiserror::Error;

use crate::ingest::RawTransaction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u32);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("unknown address {0:?}")]
    UnknownAddress(String),
    #[error("entity map line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Disjoint-set forest with path compression and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn push(&mut self) -> usize {
        let id = self.parent.len();
        self.parent.push(id);
        self.size.push(1);
        id
    }

    pub fn find(&mut self, mut node: usize) -> usize {
        let mut root = node;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[node] != root {
            let next = self.parent[node];
            self.parent[node] = root;
            node = next;
        }
        root
    }

    /// Merges the sets of `a` and `b`; returns the surviving root.
    pub fn union(&mut self, a: usize, b: usize) -> usize {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return a;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
        a
    }
}

/// Address to entity mapping.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EntityMap {
    ids: HashMap<String, EntityId>,
    entity_count: u32,
}

impl EntityMap {
    pub fn entity_of(&self, address: &str) -> Result<EntityId, ClusterError> {
        self.get(address)
            .ok_or_else(|| ClusterError::UnknownAddress(address.to_owned()))
    }

    pub fn get(&self, address: &str) -> Option<EntityId> {
        self.ids.get(address).copied()
    }

    pub fn entity_count(&self) -> u32 {
        self.entity_count
    }

    pub fn address_count(&self) -> usize {
        self.ids.len()
    }

    /// Addresses grouped by entity id; each group sorted.
    pub fn clusters(&self) -> Vec<Vec<&str>> {
        let mut out = vec![Vec::new(); self.entity_count as usize];
        for (addr, id) in &self.ids {
            out[id.0 as usize].push(addr.as_str());
        }
        for c in &mut out {
            c.sort_unstable();
        }
        out
    }

    /// Builds a map from `(address, group)` pairs where groups are arbitrary
    /// labels; ids are canonicalized by each group's smallest address.
    pub fn from_groups<'a, I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, usize)>,
    {
        let mut min_addr: HashMap<usize, &str> = HashMap::new();
        let pairs: Vec<_> = pairs.into_iter().collect();
        for &(addr, group) in &pairs {
            min_addr
                .entry(group)
                .and_modify(|m| {
                    if addr < *m {
                        *m = addr
                    }
                })
                .or_insert(addr);
        }
        let mut order: Vec<(&str, usize)> = min_addr.into_iter().map(|(g, a)| (a, g)).collect();
        order.sort_unstable();
        let rank: HashMap<usize, EntityId> = order
            .iter()
            .enumerate()
            .map(|(i, &(_, g))| (g, EntityId(i as u32)))
            .collect();
        Self {
            ids: pairs
                .into_iter()
                .map(|(addr, g)| (addr.to_owned(), rank[&g]))
                .collect(),
            entity_count: rank.len() as u32,
        }
    }

    /// Persists as `address,entity_id`, sorted by address.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "address,entity_id")?;
        let mut rows: Vec<_> = self.ids.iter().collect();
        rows.sort_unstable();
        for (addr, id) in rows {
            writeln!(w, "{addr},{id}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, ClusterError> {
        let mut rdr = csv::Reader::from_reader(r);
        let malformed = |line: usize, reason: String| ClusterError::Malformed { line, reason };
        let headers = rdr
            .headers()
            .map_err(|e| malformed(1, e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["address", "entity_id"] {
            return Err(malformed(1, format!("unexpected header {headers:?}")));
        }
        let mut ids = HashMap::new();
        let mut max_id = None;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| malformed(0, e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let id: u32 = rec
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| malformed(line, "bad entity_id".into()))?;
            let addr = rec.get(0).unwrap_or_default().to_owned();
            if ids.insert(addr.clone(), EntityId(id)).is_some() {
                return Err(malformed(line, format!("duplicate address {addr:?}")));
            }
            max_id = max_id.max(Some(id));
        }
        let entity_count = max_id.map_or(0, |m| m + 1);
        let mut used = vec![false; entity_count as usize];
        for id in ids.values() {
            used[id.0 as usize] = true;
        }
        if let Some(gap) = used.iter().position(|u| !u) {
            return Err(malformed(0, format!("entity ids not dense: {gap} unused")));
        }
        Ok(Self { ids, entity_count })
    }
}

/// Groups every address seen (inputs and outputs) into entities by the
/// common-input heuristic. Coinbase transactions add no edges.
pub fn cluster_addresses(txs: &[RawTransaction]) -> EntityMap {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut uf = UnionFind::new(0);
    for tx in txs {
        let mut first = None;
        for input in &tx.inputs {
            let node = *index
                .entry(input.address.as_str())
                .or_insert_with(|| uf.push());
            match first {
                None => first = Some(node),
                Some(f) => {
                    uf.union(f, node);
                }
            }
        }
        for output in &tx.outputs {
            index
                .entry(output.address.as_str())
                .or_insert_with(|| uf.push());
        }
    }
    let pairs: Vec<(&str, usize)> = index
        .into_iter()
        .map(|(addr, node)| (addr, uf.find(node)))
        .collect();
    EntityMap::from_groups(pairs)
}
