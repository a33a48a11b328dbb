//! Declarative renaming of real dump layouts into the canonical raw schemas.
//!
//! A field map is a JSON object whose keys are canonical field names and
//! whose values are either a JSON pointer into the source document, or a
//! nested spec `{"path": ..., "fields": {...}}` for sub-objects and
//! `{"path": ..., "each": <spec>}` for arrays. Keys absent from the map are
//! dropped, so a map must list every field the transformer needs.
//!
//! ```json
//! {
//!   "task_id": "/task_id",
//!   "deprecated": "/deprecated",
//!   "functional": "/calcs_reversed/0/run_type",
//!   "ionic_steps": {
//!     "path": "/calcs_reversed/0/output/ionic_steps",
//!     "each": {"fields": {"energy": "/e_fr_energy", "forces": "/forces", "structure": "/structure"}}
//!   }
//! }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Pointer(String),
    Nested {
        #[serde(default)]
        path: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        each: Option<Box<FieldSpec>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fields: Option<BTreeMap<String, FieldSpec>>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FieldMap(pub BTreeMap<String, FieldSpec>);

impl FieldMap {
    pub fn load(path: &Path) -> Result<FieldMap, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Builds the canonical document from a source document.
    pub fn apply(&self, doc: &Value) -> Value {
        remap_object(doc, &self.0)
    }
}

fn remap_object(doc: &Value, fields: &BTreeMap<String, FieldSpec>) -> Value {
    let mut out = Map::new();
    for (name, spec) in fields {
        if let Some(v) = apply_spec(doc, spec) {
            out.insert(name.clone(), v);
        }
    }
    Value::Object(out)
}

fn apply_spec(doc: &Value, spec: &FieldSpec) -> Option<Value> {
    match spec {
        FieldSpec::Pointer(p) => doc.pointer(p).cloned(),
        FieldSpec::Nested { path, each, fields } => {
            let target = doc.pointer(path)?;
            if let Some(each) = each {
                let items = target.as_array()?;
                Some(Value::Array(
                    items
                        .iter()
                        .map(|item| apply_spec(item, each).unwrap_or(Value::Null))
                        .collect(),
                ))
            } else if let Some(fields) = fields {
                Some(remap_object(target, fields))
            } else {
                Some(target.clone())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn remaps_nested_dump() {
        let map: FieldMap = serde_json::from_value(json!({
            "task_id": "/id",
            "ionic_steps": {
                "path": "/calc/steps",
                "each": {"fields": {
                    "energy": "/e",
                    "structure": {"path": "/s", "fields": {
                        "species": {"path": "/sites", "each": "/label"},
                        "positions": {"path": "/sites", "each": "/xyz"},
                        "lattice": "/lattice/matrix"
                    }}
                }}
            }
        }))
        .unwrap();
        let doc = json!({
            "id": "mp-1",
            "calc": {"steps": [{"e": -1.5, "s": {
                "lattice": {"matrix": [[1,0,0],[0,1,0],[0,0,1]]},
                "sites": [{"label": "Fe", "xyz": [0,0,0]}, {"label": "O", "xyz": [0.5,0.5,0.5]}]
            }}]}
        });
        let out = map.apply(&doc);
        assert_eq!(out["task_id"], "mp-1");
        assert_eq!(out["ionic_steps"][0]["energy"], -1.5);
        assert_eq!(out["ionic_steps"][0]["structure"]["species"], json!(["Fe", "O"]));
        assert_eq!(out["ionic_steps"][0]["structure"]["positions"][1], json!([0.5, 0.5, 0.5]));
        assert!(out["ionic_steps"][0].get("forces").is_none());
    }
}
