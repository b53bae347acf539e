//! Road-network graph: roads are nodes, shared intersections are edges.
//!
//! The graph is immutable after construction and answers the connectivity
//! questions the constrained clustering needs: neighbor lookups, connected
//! components of an induced subgraph, and whether two disjoint road sets touch.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge endpoint {road_id} is not in the road universe")]
    UnknownEndpoint { road_id: String },
    #[error("self-loop on road {road_id}")]
    SelfLoop { road_id: String },
    #[error("clusters overlap (share road index {index})")]
    OverlappingClusters { index: usize },
    #[error("duplicate road {road_id} in road universe")]
    DuplicateRoad { road_id: String },
    #[error("line {line}: malformed edge row: {reason}")]
    MalformedEdge { line: usize, reason: String },
    #[error("invalid cluster set: {reason}")]
    InvalidClusterSet { reason: String },
}

/// Undirected road-adjacency graph over a fixed, ordered road universe.
#[derive(Debug, Clone)]
pub struct RoadGraph {
    roads: Vec<String>,
    index: BTreeMap<String, usize>,
    /// Unordered edge pairs stored as (min, max) index tuples.
    edges: BTreeSet<(usize, usize)>,
    /// Sorted neighbor indices per road.
    neighbors: Vec<Vec<usize>>,
}

impl RoadGraph {
    pub fn len(&self) -> usize {
        self.roads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roads.is_empty()
    }

    pub fn roads(&self) -> &[String] {
        &self.roads
    }

    pub fn road(&self, i: usize) -> &str {
        &self.roads[i]
    }

    pub fn index_of(&self, road_id: &str) -> Option<usize> {
        self.index.get(road_id).copied()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        i != j && self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// The 0-1 adjacency matrix, row-major. Derived from the edge set.
    pub fn adjacency_matrix(&self) -> Vec<u8> {
        let n = self.len();
        let mut m = vec![0u8; n * n];
        for &(i, j) in &self.edges {
            m[i * n + j] = 1;
            m[j * n + i] = 1;
        }
        m
    }

    /// Partitions `subset` (road indices) into the maximal connected groups of
    /// the induced subgraph. Components are ordered by their smallest member,
    /// members sorted ascending.
    pub fn connected_components(&self, subset: &[usize]) -> Vec<Vec<usize>> {
        let members: BTreeSet<usize> = subset.iter().copied().collect();
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        let mut components = Vec::new();
        for &start in &members {
            if seen.contains(&start) {
                continue;
            }
            let mut component = Vec::new();
            let mut stack = vec![start];
            seen.insert(start);
            while let Some(node) = stack.pop() {
                component.push(node);
                for &nb in &self.neighbors[node] {
                    if members.contains(&nb) && seen.insert(nb) {
                        stack.push(nb);
                    }
                }
            }
            component.sort_unstable();
            components.push(component);
        }
        components
    }

    /// Number of connected components of the whole graph.
    pub fn component_count(&self) -> usize {
        let all: Vec<usize> = (0..self.len()).collect();
        self.connected_components(&all).len()
    }

    /// True iff some road in `a` shares an edge with some road in `b`.
    /// The sets must be disjoint.
    pub fn clusters_adjacent(&self, a: &[usize], b: &[usize]) -> Result<bool, GraphError> {
        let b_set: BTreeSet<usize> = b.iter().copied().collect();
        for &i in a {
            if b_set.contains(&i) {
                return Err(GraphError::OverlappingClusters { index: i });
            }
        }
        for &i in a {
            if self.neighbors[i].iter().any(|nb| b_set.contains(nb)) {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Builds the graph from a road universe and an undirected edge list given as
/// road-id pairs. Reversed and repeated pairs collapse to one edge.
pub fn build_graph(
    roads: &[String],
    edge_list: &[(String, String)],
) -> Result<RoadGraph, GraphError> {
    let mut index = BTreeMap::new();
    for (i, road) in roads.iter().enumerate() {
        if index.insert(road.clone(), i).is_some() {
            return Err(GraphError::DuplicateRoad {
                road_id: road.clone(),
            });
        }
    }
    let mut edges = BTreeSet::new();
    for (a, b) in edge_list {
        let ia = *index
            .get(a)
            .ok_or_else(|| GraphError::UnknownEndpoint { road_id: a.clone() })?;
        let ib = *index
            .get(b)
            .ok_or_else(|| GraphError::UnknownEndpoint { road_id: b.clone() })?;
        if ia == ib {
            return Err(GraphError::SelfLoop { road_id: a.clone() });
        }
        edges.insert((ia.min(ib), ia.max(ib)));
    }
    let mut neighbors = vec![Vec::new(); roads.len()];
    for &(i, j) in &edges {
        neighbors[i].push(j);
        neighbors[j].push(i);
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }
    Ok(RoadGraph {
        roads: roads.to_vec(),
        index,
        edges,
        neighbors,
    })
}

/// Parses the edge-list CSV: header `road_a,road_b`, one undirected edge per
/// row thereafter.
pub fn parse_edge_list(text: &str) -> Result<Vec<(String, String)>, GraphError> {
    let mut edges = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        if line == 1 {
            continue;
        }
        let row = raw_line.trim_end_matches('\r');
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 2 {
            return Err(GraphError::MalformedEdge {
                line,
                reason: format!("expected 2 columns, found {}", fields.len()),
            });
        }
        let a = fields[0].trim();
        let b = fields[1].trim();
        if a.is_empty() || b.is_empty() {
            return Err(GraphError::MalformedEdge {
                line,
                reason: "empty endpoint".to_string(),
            });
        }
        edges.push((a.to_string(), b.to_string()));
    }
    Ok(edges)
}

/// Serializes edges back into the CSV format accepted by [`parse_edge_list`].
pub fn write_edge_list(edges: &[(String, String)]) -> String {
    let mut out = String::from("road_a,road_b\n");
    for (a, b) in edges {
        out.push_str(a);
        out.push(',');
        out.push_str(b);
        out.push('\n');
    }
    out
}

/// Parses the road-universe file: one road id per line, blanks skipped.
pub fn parse_road_universe(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// A completed partition: every road mapped to one of `k` dense cluster
/// indices, with every index used.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    assignment: BTreeMap<String, usize>,
    k: usize,
}

impl ClusterSet {
    pub fn new(assignment: BTreeMap<String, usize>, k: usize) -> Result<Self, GraphError> {
        let mut used = vec![false; k];
        for (road, &c) in &assignment {
            if c >= k {
                return Err(GraphError::InvalidClusterSet {
                    reason: format!("road {road} assigned to cluster {c} but k = {k}"),
                });
            }
            used[c] = true;
        }
        if let Some(missing) = used.iter().position(|&u| !u) {
            return Err(GraphError::InvalidClusterSet {
                reason: format!("cluster {missing} is empty"),
            });
        }
        Ok(ClusterSet { assignment, k })
    }

    /// Builds from per-road labels aligned with `roads`. Labels need not be
    /// dense; they are compacted preserving order of first appearance in
    /// road order.
    pub fn from_labels(roads: &[String], labels: &[usize]) -> Result<Self, GraphError> {
        if roads.len() != labels.len() {
            return Err(GraphError::InvalidClusterSet {
                reason: format!("{} roads but {} labels", roads.len(), labels.len()),
            });
        }
        let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
        let mut assignment = BTreeMap::new();
        for (road, &label) in roads.iter().zip(labels) {
            let next = remap.len();
            let dense = *remap.entry(label).or_insert(next);
            assignment.insert(road.clone(), dense);
        }
        let k = remap.len();
        ClusterSet::new(assignment, k)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignment(&self) -> &BTreeMap<String, usize> {
        &self.assignment
    }

    pub fn cluster_of(&self, road_id: &str) -> Option<usize> {
        self.assignment.get(road_id).copied()
    }

    /// Road ids per cluster, each sorted; outer index is the cluster index.
    pub fn members(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new(); self.k];
        for (road, &c) in &self.assignment {
            out[c].push(road.clone());
        }
        out
    }

    /// Graph indices per cluster, each sorted ascending.
    pub fn member_indices(&self, graph: &RoadGraph) -> Result<Vec<Vec<usize>>, GraphError> {
        let mut out = vec![Vec::new(); self.k];
        for (road, &c) in &self.assignment {
            let idx = graph
                .index_of(road)
                .ok_or_else(|| GraphError::UnknownEndpoint {
                    road_id: road.clone(),
                })?;
            out[c].push(idx);
        }
        for members in &mut out {
            members.sort_unstable();
        }
        Ok(out)
    }
}
