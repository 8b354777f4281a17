//! Disease-keyed approved-drug lists consumed by `in_list` conditions.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::text::{dedup_names, eq_folded, fold, tokens};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugEntry {
    pub display_name: String,
    pub generic_name: String,
    #[serde(default)]
    pub brand_names: Vec<String>,
}

impl DrugEntry {
    fn names(&self) -> impl Iterator<Item = &str> {
        [self.display_name.as_str(), self.generic_name.as_str()]
            .into_iter()
            .chain(self.brand_names.iter().map(String::as_str))
            .filter(|n| !n.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugList {
    pub disease_key: String,
    pub entries: Vec<DrugEntry>,
    pub source: String,
    pub retrieved_at: String,
    pub version: u32,
}

impl DrugList {
    /// Case-insensitive match against display, generic and brand names.
    pub fn contains(&self, name: &str) -> bool {
        if name.trim().is_empty() {
            return false;
        }
        self.entries
            .iter()
            .any(|e| e.names().any(|n| eq_folded(n, name)))
    }
}

/// Lowercase, single-spaced disease key.
pub fn normalize_key(key: &str) -> String {
    fold(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchKind {
    /// Normalised keys are equal; the list is reused as-is.
    Exact,
    /// Every query token appears among the key's tokens.
    TokenSubset,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupHit<'a> {
    pub list: &'a DrugList,
    pub matched_key: &'a str,
    pub kind: MatchKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportEntry {
    pub display_name: String,
    #[serde(default)]
    pub generic_name: String,
    #[serde(default)]
    pub brand_names: Vec<String>,
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub off_label: bool,
}

/// A freshly retrieved list, before cleaning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportDocument {
    pub disease_key: String,
    pub entries: Vec<ImportEntry>,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub retrieved_at: String,
    /// Ignored on import; the library assigns versions.
    #[serde(default, skip_serializing)]
    pub version: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub disease_key: String,
    pub version: u32,
    pub kept: usize,
    pub dropped_off_label: Vec<String>,
    pub duplicates_collapsed: usize,
}

/// Versioned store. Every import appends a new version; old versions stay.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DrugLibrary {
    pub format_version: u32,
    pub lists: BTreeMap<String, Vec<DrugList>>,
}

impl DrugLibrary {
    pub fn new() -> Self {
        DrugLibrary {
            format_version: 1,
            lists: BTreeMap::new(),
        }
    }

    /// Latest version for a key: exact normalised match first, then the first
    /// key (in key order) whose tokens cover the query's tokens.
    pub fn lookup(&self, disease_key: &str) -> Option<LookupHit<'_>> {
        let key = normalize_key(disease_key);
        if key.is_empty() {
            return None;
        }
        if let Some((k, versions)) = self.lists.get_key_value(&key) {
            return versions.last().map(|list| LookupHit {
                list,
                matched_key: k,
                kind: MatchKind::Exact,
            });
        }
        let wanted = tokens(&key);
        self.lists.iter().find_map(|(k, versions)| {
            let have = tokens(k);
            if wanted.iter().all(|t| have.contains(t)) {
                versions.last().map(|list| LookupHit {
                    list,
                    matched_key: k,
                    kind: MatchKind::TokenSubset,
                })
            } else {
                None
            }
        })
    }

    pub fn history(&self, disease_key: &str) -> &[DrugList] {
        self.lists
            .get(&normalize_key(disease_key))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Cleans and stores a document as the next version of its key.
    ///
    /// Off-label rows are dropped; names are trimmed; entries sharing a
    /// generic (or display) name are merged and brand names de-duplicated.
    pub fn import(&mut self, doc: ImportDocument) -> ImportReport {
        let key = normalize_key(&doc.disease_key);
        let mut dropped = Vec::new();
        let mut collapsed = 0;
        let mut entries: Vec<DrugEntry> = Vec::new();
        for raw in doc.entries {
            if raw.off_label {
                dropped.push(raw.display_name.trim().to_string());
                continue;
            }
            let display = raw.display_name.trim().to_string();
            let generic = if raw.generic_name.trim().is_empty() {
                display.clone()
            } else {
                raw.generic_name.trim().to_string()
            };
            if display.is_empty() && generic.is_empty() {
                continue;
            }
            let brands = dedup_names(raw.brand_names.iter());
            if let Some(existing) = entries
                .iter_mut()
                .find(|e| eq_folded(&e.generic_name, &generic) || eq_folded(&e.display_name, &display))
            {
                collapsed += 1;
                let merged = dedup_names(existing.brand_names.iter().chain(brands.iter()));
                existing.brand_names = merged;
            } else {
                entries.push(DrugEntry {
                    display_name: display,
                    generic_name: generic,
                    brand_names: brands,
                });
            }
        }
        let history = self.lists.entry(key.clone()).or_default();
        let version = history.last().map_or(1, |l| l.version + 1);
        let kept = entries.len();
        history.push(DrugList {
            disease_key: key.clone(),
            entries,
            source: doc.source,
            retrieved_at: doc.retrieved_at,
            version,
        });
        ImportReport {
            disease_key: key,
            version,
            kept,
            dropped_off_label: dropped,
            duplicates_collapsed: collapsed,
        }
    }

    /// Latest version, suitable for re-import elsewhere.
    pub fn export(&self, disease_key: &str) -> Option<DrugList> {
        self.history(disease_key).last().cloned()
    }
}

impl From<DrugList> for ImportDocument {
    fn from(list: DrugList) -> Self {
        ImportDocument {
            disease_key: list.disease_key,
            entries: list
                .entries
                .into_iter()
                .map(|e| ImportEntry {
                    display_name: e.display_name,
                    generic_name: e.generic_name,
                    brand_names: e.brand_names,
                    off_label: false,
                })
                .collect(),
            source: list.source,
            retrieved_at: list.retrieved_at,
            version: Some(list.version),
        }
    }
}

/// Named lists resolved for a plan set (`membership_list_name` -> list).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MembershipLibrary {
    pub lists: BTreeMap<String, DrugList>,
}

impl MembershipLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, list: DrugList) {
        self.lists.insert(name.to_string(), list);
    }

    pub fn get(&self, name: &str) -> Option<&DrugList> {
        self.lists.get(name)
    }

    /// Binds each list name to the library's best match for its disease key.
    /// Returns the names that could not be resolved.
    pub fn resolve(
        library: &DrugLibrary,
        bindings: &BTreeMap<String, String>,
    ) -> (MembershipLibrary, Vec<String>) {
        let mut out = MembershipLibrary::new();
        let mut missing = Vec::new();
        for (name, key) in bindings {
            match library.lookup(key) {
                Some(hit) => out.insert(name, hit.list.clone()),
                None => missing.push(name.clone()),
            }
        }
        (out, missing)
    }
}
