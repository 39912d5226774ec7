//! OBJ and JSON views of posed bodies.

use std::fmt::Write as _;

use serde_json::{json, Value};

use super::fk::PosedBody;
use super::JOINT_NAMES;

/// Wavefront OBJ text for several bodies. Each body is an `o` object and each
/// region a `g` group; `header` lines become leading comments.
pub fn write_obj(bodies: &[(&str, &PosedBody)], header: &[String]) -> String {
    let mut out = String::new();
    for line in header {
        let _ = writeln!(out, "# {line}");
    }
    for (tag, body) in bodies {
        let p = body.partition();
        let _ = writeln!(out, "o {tag}");
        for (r, range) in p.ranges.iter().enumerate() {
            let _ = writeln!(out, "# region {r} {}", p.names[r]);
            let _ = writeln!(out, "g {tag}.{}", p.names[r]);
            for v in &body.vertices[range.clone()] {
                let _ = writeln!(out, "v {:.9} {:.9} {:.9}", v[0], v[1], v[2]);
            }
        }
    }
    out
}

/// Joints, vertices and region ids of one body.
pub fn body_json(body: &PosedBody) -> Value {
    let joints: Vec<Value> = body
        .positions
        .iter()
        .zip(&body.rotations)
        .enumerate()
        .map(|(j, (p, r))| {
            let name = JOINT_NAMES.get(j).copied().unwrap_or("joint");
            json!({ "name": name, "position": p, "rotation": r })
        })
        .collect();
    json!({
        "joints": joints,
        "vertices": body.vertices,
        "region_ids": body.region_ids(),
        "region_names": body.partition().names,
    })
}
