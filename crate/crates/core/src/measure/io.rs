use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PolygonalMeasure;
use crate::error::{Error, Result};
use crate::geometry::TorusPoint;

/// On-disk tree format.
///
/// ```json
/// {"L": 1.0, "T": 1.0,
///  "nodes": [{"id": "a", "x": 0.5, "y": 0.5, "z": -1.0}, ...],
///  "segments": [{"tail": "a", "head": "b", "flux": 1.0, "lift": [0, 0]}, ...]}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFile {
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub nodes: Vec<NodeRecord>,
    pub segments: Vec<SegmentRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub tail: String,
    pub head: String,
    pub flux: f64,
    #[serde(default)]
    pub lift: [i32; 2],
}

impl From<&PolygonalMeasure> for TreeFile {
    fn from(m: &PolygonalMeasure) -> Self {
        let ids: Vec<String> = (0..m.nodes.len()).map(|i| m.node_label(i)).collect();
        TreeFile {
            l: m.l,
            t: m.t,
            nodes: m
                .nodes
                .iter()
                .zip(&ids)
                .map(|(n, id)| NodeRecord { id: id.clone(), x: n.pos.x, y: n.pos.y, z: n.z })
                .collect(),
            segments: m
                .segments
                .iter()
                .map(|s| SegmentRecord {
                    tail: ids[s.tail].clone(),
                    head: ids[s.head].clone(),
                    flux: s.flux,
                    lift: s.lift,
                })
                .collect(),
        }
    }
}

impl TryFrom<TreeFile> for PolygonalMeasure {
    type Error = Error;

    fn try_from(f: TreeFile) -> Result<Self> {
        let mut m = PolygonalMeasure::new(f.l, f.t)?;
        let mut index = HashMap::with_capacity(f.nodes.len());
        let mut shifts = Vec::with_capacity(f.nodes.len());
        for n in &f.nodes {
            if index.insert(n.id.clone(), m.nodes.len()).is_some() {
                return Err(Error::Format(format!("duplicate node id {:?}", n.id)));
            }
            // off-canonical coordinates are folded into the lifts
            let (_, k) = TorusPoint::new(n.x, n.y).wrap_with_shift(f.l);
            shifts.push(k);
            m.add_node(TorusPoint::new(n.x, n.y), n.z);
        }
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| Error::Format(format!("segment references unknown node {id:?}")))
        };
        for s in &f.segments {
            let (tail, head) = (lookup(&s.tail)?, lookup(&s.head)?);
            let lift = [s.lift[0] + shifts[head][0] - shifts[tail][0], s.lift[1] + shifts[head][1] - shifts[tail][1]];
            m.add_segment(tail, head, s.flux, lift);
        }
        let default_labels = f.nodes.iter().enumerate().all(|(i, n)| n.id == format!("n{i}"));
        if !default_labels {
            m.labels = f.nodes.into_iter().map(|n| n.id).collect();
        }
        Ok(m)
    }
}

impl PolygonalMeasure {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TreeFile::from(self)).expect("tree serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: TreeFile = serde_json::from_str(s)?;
        f.try_into()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::fixtures::y_junction;
    use proptest::prelude::*;

    #[test]
    fn custom_labels_survive() {
        let src = r#"{"L": 2.0, "T": 0.5,
            "nodes": [{"id": "root", "x": 0.1, "y": 1.9, "z": -0.5},
                      {"id": "tip", "x": 0.3, "y": 0.2, "z": 0.5}],
            "segments": [{"tail": "root", "head": "tip", "flux": 0.75, "lift": [0, 1]}]}"#;
        let m = PolygonalMeasure::from_json(src).unwrap();
        assert_eq!(m.node_label(0), "root");
        let back = PolygonalMeasure::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn unknown_node_is_format_error() {
        let src = r#"{"L": 1, "T": 1, "nodes": [], "segments": [{"tail": "a", "head": "b", "flux": 1}]}"#;
        assert!(matches!(PolygonalMeasure::from_json(src), Err(Error::Format(_))));
    }

    #[test]
    fn noncanonical_coordinates_keep_geometry() {
        let src = r#"{"L": 1.0, "T": 1.0,
            "nodes": [{"id": "a", "x": 0.9, "y": 0.0, "z": -1.0},
                      {"id": "b", "x": 1.1, "y": 0.0, "z": 1.0}],
            "segments": [{"tail": "a", "head": "b", "flux": 1.0, "lift": [0, 0]}]}"#;
        let m = PolygonalMeasure::from_json(src).unwrap();
        assert!((m.nodes[1].pos.x - 0.1).abs() < 1e-12);
        assert!((m.displacement(&m.segments[0])[0] - 0.2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(
            d in 0.0..0.49f64, z in -0.99..0.99f64,
            f1 in 1e-9..1e3f64, f2 in 1e-9..1e3f64, shift in -5.0..5.0f64,
        ) {
            let m = y_junction((f1 + f2, f1, f2), d, z).translated(shift, shift * 0.37);
            let back = PolygonalMeasure::from_json(&m.to_json()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
