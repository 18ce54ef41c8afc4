use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A concept hierarchy, e.g. `animal -> bear -> polar bear`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OntologyNode {
    pub concept: String,
    pub depth: usize,
    pub children: Vec<OntologyNode>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    concept: String,
    #[serde(default)]
    children: Vec<RawNode>,
}

impl OntologyNode {
    /// Leaf constructor for building trees in code; call [`OntologyNode::validated`] on the root.
    pub fn leaf(concept: impl Into<String>) -> Self {
        Self {
            concept: concept.into(),
            depth: 0,
            children: Vec::new(),
        }
    }

    pub fn with_children(concept: impl Into<String>, children: Vec<OntologyNode>) -> Self {
        Self {
            concept: concept.into(),
            depth: 0,
            children,
        }
    }

    /// Recomputes depths from this node as root and checks for repeated concepts.
    pub fn validated(mut self) -> Result<Self> {
        fn visit(
            node: &mut OntologyNode,
            depth: usize,
            ancestors: &mut Vec<String>,
            seen: &mut HashSet<String>,
        ) -> Result<()> {
            let key = node.concept.trim().to_lowercase();
            if key.is_empty() {
                return Err(Error::Invalid("ontology concept must not be empty".into()));
            }
            if ancestors.contains(&key) {
                return Err(Error::Invalid(format!(
                    "ontology cycle: {:?} appears as its own descendant",
                    node.concept
                )));
            }
            if !seen.insert(key.clone()) {
                return Err(Error::Invalid(format!("duplicate ontology concept {:?}", node.concept)));
            }
            node.depth = depth;
            ancestors.push(key);
            for c in &mut node.children {
                visit(c, depth + 1, ancestors, seen)?;
            }
            ancestors.pop();
            Ok(())
        }
        visit(&mut self, 0, &mut Vec::new(), &mut HashSet::new())?;
        Ok(self)
    }

    /// Depth-first (pre-order) traversal.
    pub fn preorder(&self) -> Vec<&OntologyNode> {
        let mut out = vec![self];
        for c in &self.children {
            out.extend(c.preorder());
        }
        out
    }

    /// `(parent, child)` concept pairs in pre-order.
    pub fn edges(&self) -> Vec<(&str, &str)> {
        self.preorder()
            .into_iter()
            .flat_map(|n| n.children.iter().map(move |c| (n.concept.as_str(), c.concept.as_str())))
            .collect()
    }

    pub fn max_depth(&self) -> usize {
        self.preorder().iter().map(|n| n.depth).max().unwrap_or(0)
    }
}

fn from_raw(raw: RawNode) -> OntologyNode {
    OntologyNode {
        concept: raw.concept,
        depth: 0,
        children: raw.children.into_iter().map(from_raw).collect(),
    }
}

pub fn parse_ontology(text: &str) -> Result<OntologyNode> {
    let raw: RawNode = serde_json::from_str(text)?;
    from_raw(raw).validated()
}

pub fn load_ontology(path: impl AsRef<Path>) -> Result<OntologyNode> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawNode = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    from_raw(raw).validated()
}
