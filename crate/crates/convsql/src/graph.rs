//! The schema graph and the attention masks derived from it.
//!
//! Nodes are schema items. Two nodes are joined by an undirected edge when
//! they are the same node (self-loop), belong to the same table, or form a
//! foreign-primary key pair. The intra-turn mask is exactly the adjacency;
//! the cross-turn mask allows pairs at distance <= 1, which coincides with
//! adjacency because self-loops are edges. Both are kept as separate
//! operations since they gate different key/value sets in the encoder.

use std::collections::{BTreeSet, VecDeque};
use std::rc::Rc;

use ndarray::Array2;

use crate::data::DatabaseSchema;

/// Undirected schema graph over item indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaGraph {
    pub node_count: usize,
    /// Unordered pairs stored as (min, max); self-loops included.
    pub edges: BTreeSet<(usize, usize)>,
}

impl SchemaGraph {
    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Nodes adjacent to `a`, including `a` itself (self-loop).
    pub fn neighborhood(&self, a: usize) -> Vec<usize> {
        (0..self.node_count).filter(|&b| self.has_edge(a, b)).collect()
    }
}

/// Which attention pattern a mask gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Intra,
    Cross,
}

/// Boolean attention mask over item pairs. Symmetric, true diagonal.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub allowed: Rc<Array2<bool>>,
    pub kind: MaskKind,
}

/// Builds the schema graph from table membership and key relations.
pub fn build_graph(schema: &DatabaseSchema) -> SchemaGraph {
    let n = schema.items.len();
    let mut edges = BTreeSet::new();
    for a in 0..n {
        for b in a..n {
            let same_table = schema.items[a].table_index == schema.items[b].table_index;
            let key_pair = schema.foreign_keys.contains(&(a, b))
                || schema.foreign_keys.contains(&(b, a));
            if a == b || same_table || key_pair {
                edges.insert((a, b));
            }
        }
    }
    SchemaGraph {
        node_count: n,
        edges,
    }
}

/// Shortest path length between two nodes; self-loops contribute nothing.
/// `None` when the nodes are in different components.
pub fn node_distance(graph: &SchemaGraph, a: usize, b: usize) -> Option<usize> {
    assert!(a < graph.node_count && b < graph.node_count, "node out of range");
    if a == b {
        return Some(0);
    }
    let mut dist = vec![None; graph.node_count];
    dist[a] = Some(0);
    let mut queue = VecDeque::from([a]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap();
        for v in 0..graph.node_count {
            if v != u && graph.has_edge(u, v) && dist[v].is_none() {
                if v == b {
                    return Some(du + 1);
                }
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    None
}

/// Mask for attention within one turn: allowed exactly on edges.
pub fn intra_mask(graph: &SchemaGraph) -> AttentionMask {
    AttentionMask {
        allowed: Rc::new(adjacency(graph)),
        kind: MaskKind::Intra,
    }
}

/// Mask for attention onto the previous turn: allowed at distance <= 1.
/// Numerically identical to [`intra_mask`] because self-loops are edges.
pub fn cross_turn_mask(graph: &SchemaGraph) -> AttentionMask {
    let n = graph.node_count;
    let mut allowed = Array2::from_elem((n, n), false);
    for a in 0..n {
        for b in 0..n {
            allowed[(a, b)] = matches!(node_distance(graph, a, b), Some(d) if d <= 1);
        }
    }
    AttentionMask {
        allowed: Rc::new(allowed),
        kind: MaskKind::Cross,
    }
}

fn adjacency(graph: &SchemaGraph) -> Array2<bool> {
    let n = graph.node_count;
    Array2::from_shape_fn((n, n), |(a, b)| graph.has_edge(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::{schemas_from_raw, tests::dogs_owners_raw};

    fn dogs_owners() -> DatabaseSchema {
        schemas_from_raw(&[dogs_owners_raw()])
            .unwrap()
            .remove("dogs_db")
            .unwrap()
    }

    #[test]
    fn dogs_table_is_a_clique_and_fk_bridges() {
        let schema = dogs_owners();
        let g = build_graph(&schema);
        // Items 0..=3 are dogs.*, dogs.dog_id, dogs.name, dogs.owner_id.
        for a in 0..4 {
            for b in 0..4 {
                assert!(g.has_edge(a, b), "({a},{b}) missing");
            }
        }
        let fk_f = schema.item_index("dogs", "owner_id").unwrap();
        let fk_p = schema.item_index("owners", "owner_id").unwrap();
        assert!(g.has_edge(fk_f, fk_p));
        assert!(!g.has_edge(
            schema.item_index("dogs", "name").unwrap(),
            schema.item_index("owners", "first_name").unwrap()
        ));
    }

    #[test]
    fn minimal_schema_edges() {
        let raw = crate::data::schema::RawDatabase {
            db_id: "tiny".into(),
            table_names_original: vec!["t".into()],
            column_names_original: vec![(-1, "*".into()), (0, "c".into())],
            primary_keys: vec![],
            foreign_keys: vec![],
        };
        let schema = schemas_from_raw(&[raw]).unwrap().remove("tiny").unwrap();
        let g = build_graph(&schema);
        assert_eq!(
            g.edges,
            BTreeSet::from([(0, 0), (0, 1), (1, 1)])
        );
    }

    #[test]
    fn anchor_distances_from_the_dogs_schema() {
        let schema = dogs_owners();
        let g = build_graph(&schema);
        let star = schema.item_index("dogs", "*").unwrap();
        let dogs_name = schema.item_index("dogs", "name").unwrap();
        // owners has no "name" column here; first_name plays its role.
        let owners_name = schema.item_index("owners", "first_name").unwrap();
        assert_eq!(node_distance(&g, star, dogs_name), Some(1));
        assert_eq!(node_distance(&g, star, owners_name), Some(3));
        assert_eq!(node_distance(&g, star, star), Some(0));
        assert_eq!(node_distance(&g, owners_name, star), Some(3));
    }

    #[test]
    fn disconnected_tables_have_no_distance() {
        let raw = crate::data::schema::RawDatabase {
            db_id: "two".into(),
            table_names_original: vec!["a".into(), "b".into()],
            column_names_original: vec![(-1, "*".into()), (0, "x".into()), (1, "y".into())],
            primary_keys: vec![],
            foreign_keys: vec![],
        };
        let schema = schemas_from_raw(&[raw]).unwrap().remove("two").unwrap();
        let g = build_graph(&schema);
        let ax = schema.item_index("a", "x").unwrap();
        let by = schema.item_index("b", "y").unwrap();
        assert_eq!(node_distance(&g, ax, by), None);
        let mask = cross_turn_mask(&g);
        assert!(!mask.allowed[(ax, by)]);
    }

    #[test]
    fn masks_are_symmetric_with_true_diagonal_and_identical() {
        let schema = dogs_owners();
        let g = build_graph(&schema);
        let intra = intra_mask(&g);
        let cross = cross_turn_mask(&g);
        let n = g.node_count;
        for a in 0..n {
            assert!(intra.allowed[(a, a)]);
            for b in 0..n {
                assert_eq!(intra.allowed[(a, b)], intra.allowed[(b, a)]);
                assert_eq!(intra.allowed[(a, b)], cross.allowed[(a, b)]);
            }
        }
        assert_eq!(intra.kind, MaskKind::Intra);
        assert_eq!(cross.kind, MaskKind::Cross);
    }

    #[test]
    fn cross_mask_blocks_distance_two_keys() {
        let schema = dogs_owners();
        let g = build_graph(&schema);
        let mask = cross_turn_mask(&g);
        let dog_id = schema.item_index("dogs", "dog_id").unwrap();
        let owners_pk = schema.item_index("owners", "owner_id").unwrap();
        for neighbor in ["*", "name", "owner_id", "dog_id"] {
            let j = schema.item_index("dogs", neighbor).unwrap();
            assert!(mask.allowed[(dog_id, j)], "dogs.{neighbor}");
        }
        assert!(!mask.allowed[(dog_id, owners_pk)]);
    }
}
