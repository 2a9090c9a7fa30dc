//! World model and rule-based scene-graph conversion.
//!
//! Axis convention: x points forward and y points left in the global frame.
//! The predicate on edge `from → to` describes where `to` lies relative to
//! `from`; z is ignored.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const PREDICATE_TOKENS: [&str; 5] = ["left", "right", "front", "behind", "near"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: String,
    #[serde(rename = "class")]
    pub class_name: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    pub position: [f64; 3],
}

impl ObjectRecord {
    pub fn new(id: impl Into<String>, class_name: impl Into<String>, attributes: &[&str], position: [f64; 3]) -> Self {
        Self {
            id: id.into(),
            class_name: class_name.into(),
            attributes: attributes.iter().map(|s| s.to_string()).collect(),
            position,
        }
    }

    /// Node feature text: attributes followed by the class, space separated.
    pub fn feature_text(&self) -> String {
        let mut parts: Vec<&str> = self.attributes.iter().map(String::as_str).collect();
        parts.push(&self.class_name);
        parts.join(" ")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorldModel {
    objects: BTreeMap<String, ObjectRecord>,
}

impl WorldModel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `record`, replacing any earlier record with the same id.
    pub fn ingest(&mut self, record: ObjectRecord) -> Result<()> {
        if !record.position.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinitePosition(record.id));
        }
        self.objects.insert(record.id.clone(), record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ObjectRecord> {
        self.objects.get(id)
    }

    /// Records in id order.
    pub fn objects(&self) -> impl Iterator<Item = &ObjectRecord> {
        self.objects.values()
    }

    /// Reads detection records, one JSON object per non-blank line.
    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut world = Self::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ObjectRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("detection line {}: {e}", n + 1)))?;
            world.ingest(record)?;
        }
        Ok(world)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in self.objects() {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

impl FromIterator<ObjectRecord> for WorldModel {
    fn from_iter<I: IntoIterator<Item = ObjectRecord>>(iter: I) -> Self {
        let mut w = Self::new();
        for r in iter {
            w.objects.insert(r.id.clone(), r);
        }
        w
    }
}

/// Where `to` lies relative to `from`: lateral token then longitudinal
/// token, or `"near"` when both offsets are within `epsilon`.
pub fn spatial_predicate(from: &ObjectRecord, to: &ObjectRecord, epsilon: f64) -> String {
    let dx = to.position[0] - from.position[0];
    let dy = to.position[1] - from.position[1];
    let lateral = if dy > epsilon {
        Some("left")
    } else if dy < -epsilon {
        Some("right")
    } else {
        None
    };
    let longitudinal = if dx > epsilon {
        Some("front")
    } else if dx < -epsilon {
        Some("behind")
    } else {
        None
    };
    match (lateral, longitudinal) {
        (None, None) => "near".to_string(),
        (Some(a), None) | (None, Some(a)) => a.to_string(),
        (Some(a), Some(b)) => format!("{a} {b}"),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneNode {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneEdge {
    pub from: String,
    pub to: String,
    pub predicate: String,
}

/// Fully connected directed graph without self-loops. Nodes are sorted by
/// id and edges enumerate ordered pairs row by row, so edge `(i, j)` sits at
/// position `i·(N−1) + j − [j > i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub nodes: Vec<SceneNode>,
    pub edges: Vec<SceneEdge>,
}

impl SceneGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Predicate on edge `i → j` (`i ≠ j`).
    pub fn predicate(&self, i: usize, j: usize) -> &str {
        let n = self.nodes.len();
        debug_assert!(i != j && i < n && j < n);
        let k = i * (n - 1) + j - usize::from(j > i);
        &self.edges[k].predicate
    }

    /// Checks the structural invariants, e.g. after reading a file.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::EmptyGraph);
        }
        if self.nodes.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(Error::Dataset("scene graph nodes must have unique ids in sorted order".into()));
        }
        if self.edges.len() != n * (n - 1) {
            return Err(Error::Dataset(format!("{} nodes need {} edges, found {}", n, n * (n - 1), self.edges.len())));
        }
        let mut k = 0;
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let e = &self.edges[k];
                if e.from != self.nodes[i].id || e.to != self.nodes[j].id {
                    return Err(Error::Dataset(format!("edge {k} is out of order")));
                }
                let tokens: Vec<&str> = e.predicate.split(' ').collect();
                let ok = match tokens.as_slice() {
                    ["near"] | ["left" | "right" | "front" | "behind"] => true,
                    ["left" | "right", "front" | "behind"] => true,
                    _ => false,
                };
                if !ok {
                    return Err(Error::Dataset(format!("invalid predicate {:?}", e.predicate)));
                }
                k += 1;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Converts a world model into its scene graph.
pub fn build_scene_graph(world: &WorldModel, epsilon: f64) -> Result<SceneGraph> {
    if world.is_empty() {
        return Err(Error::EmptyWorld);
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let objects: Vec<&ObjectRecord> = world.objects().collect();
    let nodes = objects
        .iter()
        .map(|o| SceneNode {
            id: o.id.clone(),
            text: o.feature_text(),
        })
        .collect();
    let mut edges = Vec::with_capacity(objects.len() * (objects.len() - 1));
    for a in &objects {
        for b in &objects {
            if a.id != b.id {
                edges.push(SceneEdge {
                    from: a.id.clone(),
                    to: b.id.clone(),
                    predicate: spatial_predicate(a, b, epsilon),
                });
            }
        }
    }
    Ok(SceneGraph { nodes, edges })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(id: &str, x: f64, y: f64) -> ObjectRecord {
        ObjectRecord::new(id, "box", &[], [x, y, 0.0])
    }

    #[test]
    fn ingest_replaces_by_id() {
        let mut w = WorldModel::new();
        w.ingest(at("a", 0.0, 0.0)).unwrap();
        assert_eq!(w.len(), 1);
        w.ingest(at("a", 2.0, 0.0)).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w.get("a").unwrap().position[0], 2.0);
        w.ingest(at("b", 0.0, 0.0)).unwrap();
        assert_eq!(w.len(), 2);
        assert!(matches!(w.ingest(at("c", f64::NAN, 0.0)), Err(Error::NonFinitePosition(_))));
    }

    #[test]
    fn predicate_examples() {
        let o = at("o", 0.0, 0.0);
        assert_eq!(spatial_predicate(&o, &at("t", 1.0, 1.0), 0.05), "left front");
        assert_eq!(spatial_predicate(&o, &at("t", -1.0, 1.0), 0.05), "left behind");
        assert_eq!(spatial_predicate(&o, &at("t", 0.0, 0.0), 0.05), "near");
        assert_eq!(spatial_predicate(&o, &at("t", 0.01, -2.0), 0.05), "right");
        assert_eq!(spatial_predicate(&o, &at("t", -3.0, 0.04), 0.05), "behind");
        let high = ObjectRecord::new("t", "box", &[], [0.0, 0.0, 9.0]);
        assert_eq!(spatial_predicate(&o, &high, 0.05), "near");
    }

    #[test]
    fn graph_shape_and_text() {
        let mut w = WorldModel::new();
        w.ingest(ObjectRecord::new("b", "box", &["red"], [1.0, 0.0, 0.0])).unwrap();
        let g = build_scene_graph(&w, DEFAULT_EPSILON).unwrap();
        assert_eq!((g.nodes.len(), g.edges.len()), (1, 0));
        assert_eq!(g.nodes[0].text, "red box");
        w.ingest(at("a", 0.0, 0.0)).unwrap();
        w.ingest(at("c", 0.0, 3.0)).unwrap();
        let g = build_scene_graph(&w, DEFAULT_EPSILON).unwrap();
        assert_eq!(g.edges.len(), 6);
        assert_eq!(g.nodes.iter().map(|n| n.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        g.validate().unwrap();
        for i in 0..3 {
            for j in (0..3).filter(|&j| j != i) {
                let e = g.edges.iter().find(|e| e.from == g.nodes[i].id && e.to == g.nodes[j].id).unwrap();
                assert_eq!(g.predicate(i, j), e.predicate);
            }
        }
        assert!(matches!(build_scene_graph(&WorldModel::new(), 0.05), Err(Error::EmptyWorld)));
    }

    #[test]
    fn jsonl_round_trip() {
        let text = "{\"id\":\"x\",\"class\":\"car\",\"attributes\":[],\"position\":[1,2,3]}\n\n{\"id\":\"y\",\"class\":\"box\",\"attributes\":[\"blue\"],\"position\":[0,0,0]}\n";
        let w = WorldModel::from_jsonl(text.as_bytes()).unwrap();
        assert_eq!(w.len(), 2);
        let mut out = Vec::new();
        w.write_jsonl(&mut out).unwrap();
        assert_eq!(WorldModel::from_jsonl(out.as_slice()).unwrap(), w);
        assert!(WorldModel::from_jsonl("{\"id\":1}".as_bytes()).is_err());
    }
}
