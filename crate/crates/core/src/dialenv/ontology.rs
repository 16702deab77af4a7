use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::hex;

/// Source text of [`Ontology::miniwoz`].
pub const DEFAULT_ONTOLOGY: &str = include_str!("../../data/miniwoz.toml");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InformableSlot {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub name: String,
    /// Value index for each informable slot.
    pub informable: Vec<usize>,
    /// Rendered value for each requestable slot.
    pub requestable: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Domain {
    pub name: String,
    pub informables: Vec<InformableSlot>,
    pub requestables: Vec<String>,
    pub entities: Vec<Entity>,
}

impl Domain {
    pub fn informable_index(&self, name: &str) -> Option<usize> {
        self.informables.iter().position(|s| s.name == name)
    }

    pub fn requestable_index(&self, name: &str) -> Option<usize> {
        self.requestables.iter().position(|s| s == name)
    }

    /// Entities consistent with every `(slot, value)` constraint, in database order.
    pub fn matches<'a>(&'a self, constraints: &'a [(usize, usize)]) -> impl Iterator<Item = usize> + 'a {
        self.entities
            .iter()
            .enumerate()
            .filter(move |(_, e)| constraints.iter().all(|&(s, v)| e.informable[s] == v))
            .map(|(i, _)| i)
    }
}

/// Slots, values and database of the miniature dialogue world.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ontology {
    pub name: String,
    pub version: u32,
    pub domains: Vec<Domain>,
    hash: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOntology {
    name: String,
    version: u32,
    domain: Vec<RawDomain>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDomain {
    name: String,
    requestables: Vec<String>,
    informable: Vec<RawSlot>,
    entity: Vec<BTreeMap<String, String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSlot {
    name: String,
    values: Vec<String>,
}

fn bad(msg: String) -> Error {
    Error::Ontology(msg)
}

impl Ontology {
    /// The ontology shipped with the crate.
    pub fn miniwoz() -> Self {
        Self::from_toml_str(DEFAULT_ONTOLOGY).expect("bundled ontology is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawOntology = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        if raw.domain.is_empty() {
            return Err(bad("no domains".into()));
        }
        let mut domains = Vec::with_capacity(raw.domain.len());
        for d in raw.domain {
            if d.informable.is_empty() || d.requestables.is_empty() {
                return Err(bad(format!("domain {} needs informable and requestable slots", d.name)));
            }
            let mut names: Vec<&str> = d.informable.iter().map(|s| s.name.as_str()).collect();
            names.extend(d.requestables.iter().map(String::as_str));
            let mut sorted = names.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != names.len() || names.contains(&"name") {
                return Err(bad(format!("domain {} has duplicate or reserved slot names", d.name)));
            }
            for s in &d.informable {
                if s.values.is_empty() {
                    return Err(bad(format!("slot {}.{} has no values", d.name, s.name)));
                }
            }
            if d.entity.is_empty() {
                return Err(bad(format!("domain {} has an empty database", d.name)));
            }
            let mut entities = Vec::with_capacity(d.entity.len());
            for (i, raw_e) in d.entity.iter().enumerate() {
                let ename = raw_e
                    .get("name")
                    .ok_or_else(|| bad(format!("{} entity {i} has no name", d.name)))?;
                if raw_e.len() != names.len() + 1 {
                    return Err(bad(format!("{} entity {ename} must set exactly the ontology slots", d.name)));
                }
                let mut informable = Vec::with_capacity(d.informable.len());
                for s in &d.informable {
                    let v = raw_e
                        .get(&s.name)
                        .ok_or_else(|| bad(format!("{} entity {ename} misses {}", d.name, s.name)))?;
                    let idx = s
                        .values
                        .iter()
                        .position(|x| x == v)
                        .ok_or_else(|| bad(format!("{} entity {ename}: {v} is not a {} value", d.name, s.name)))?;
                    informable.push(idx);
                }
                let mut requestable = Vec::with_capacity(d.requestables.len());
                for r in &d.requestables {
                    let v = raw_e
                        .get(r)
                        .ok_or_else(|| bad(format!("{} entity {ename} misses {r}", d.name)))?;
                    requestable.push(v.clone());
                }
                entities.push(Entity {
                    name: ename.clone(),
                    informable,
                    requestable,
                });
            }
            domains.push(Domain {
                name: d.name,
                informables: d
                    .informable
                    .into_iter()
                    .map(|s| InformableSlot {
                        name: s.name,
                        values: s.values,
                    })
                    .collect(),
                requestables: d.requestables,
                entities,
            });
        }
        let mut dn: Vec<&str> = domains.iter().map(|d| d.name.as_str()).collect();
        dn.sort_unstable();
        dn.dedup();
        if dn.len() != domains.len() {
            return Err(bad("duplicate domain names".into()));
        }
        Ok(Ontology {
            name: raw.name,
            version: raw.version,
            domains,
            hash: hex(&Sha256::digest(text.as_bytes())),
        })
    }

    /// SHA-256 of the source text.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }

    pub fn num_informable_values(&self) -> usize {
        self.domains
            .iter()
            .flat_map(|d| d.informables.iter())
            .map(|s| s.values.len())
            .sum()
    }

    pub fn num_requestables(&self) -> usize {
        self.domains.iter().map(|d| d.requestables.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_ontology_shape() {
        let o = Ontology::miniwoz();
        assert_eq!(o.domains.len(), 2);
        for d in &o.domains {
            assert_eq!(d.informables.len(), 3);
            assert_eq!(d.requestables, ["address", "phone", "price"]);
            assert_eq!(d.entities.len(), 18);
            // every pair of informable values is covered at least once
            for a in 0..3 {
                for b in (a + 1)..3 {
                    for va in 0..3 {
                        for vb in 0..3 {
                            assert!(d.matches(&[(a, va), (b, vb)]).next().is_some());
                        }
                    }
                }
            }
        }
        assert_eq!(o.hash().len(), 64);
    }

    #[test]
    fn entity_with_unknown_value_is_rejected() {
        let text = DEFAULT_ONTOLOGY.replacen("food = \"indian\"", "food = \"thai\"", 1);
        let err = Ontology::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("thai"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = DEFAULT_ONTOLOGY.replacen("version = 1", "version = 1\ncolour = \"red\"", 1);
        assert!(Ontology::from_toml_str(&text).is_err());
    }

    #[test]
    fn hash_tracks_text() {
        let a = Ontology::miniwoz();
        let b = Ontology::from_toml_str(&format!("{DEFAULT_ONTOLOGY}\n")).unwrap();
        assert_eq!(a.domains, b.domains);
        assert_ne!(a.hash(), b.hash());
    }
}
