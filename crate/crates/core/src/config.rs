//! Hierarchical configuration database: INI-style files with slash-path
//! sections, layered override-merging, typed values including map literals,
//! and run-time change notification to prefix-scoped observers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The packaged defaults layer. Shipped verbatim as the reference
/// configuration; every installation starts from these values.
pub const DEFAULT_CONFIG: &str = include_str!("config/defaults.conf");

/// A scalar inside a map-valued option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MapValue {
    Integer(i64),
    Decimal(f64),
    Text(String),
}

impl MapValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            MapValue::Integer(i) => Some(*i as f64),
            MapValue::Decimal(d) => Some(*d),
            MapValue::Text(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            MapValue::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for MapValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapValue::Integer(i) => write!(f, "{}", i),
            MapValue::Decimal(d) => write!(f, "{:?}", d),
            MapValue::Text(s) => write!(f, "'{}'", s),
        }
    }
}

/// An option value: text, integer, decimal, or a key→value map literal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConfigValue {
    Text(String),
    Integer(i64),
    Decimal(f64),
    Map(BTreeMap<String, MapValue>),
}

impl ConfigValue {
    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ConfigValue::Integer(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ConfigValue::Integer(i) => Some(*i as f64),
            ConfigValue::Decimal(d) => Some(*d),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ConfigValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, MapValue>> {
        match self {
            ConfigValue::Map(m) => Some(m),
            _ => None,
        }
    }
}

impl fmt::Display for ConfigValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigValue::Text(s) => write!(f, "{}", s),
            ConfigValue::Integer(i) => write!(f, "{}", i),
            ConfigValue::Decimal(d) => write!(f, "{:?}", d),
            ConfigValue::Map(m) => {
                write!(f, "{{")?;
                for (i, (k, v)) in m.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "'{}':{}", k, v)?;
                }
                write!(f, "}}")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("unknown section {0}")]
    UnknownSection(String),
    #[error("option {section}/{option} requires a restart to change")]
    ImmutableOption { section: String, option: String },
    #[error("reading {file}: {source}")]
    Io {
        file: String,
        source: std::io::Error,
    },
}

/// Sections addressed by slash paths, each holding an option→value map.
/// Later-loaded layers override earlier ones key by key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigTree {
    sections: BTreeMap<String, BTreeMap<String, ConfigValue>>,
}

impl ConfigTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse one layer from text. `origin` names the source in errors.
    pub fn parse_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut tree = ConfigTree::new();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = idx + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let name = inner.strip_suffix(']').ok_or_else(|| ConfigError::Parse {
                    file: origin.to_string(),
                    line: lineno,
                    message: "unterminated section header".to_string(),
                })?;
                let name = name.trim();
                if name.is_empty() {
                    return Err(ConfigError::Parse {
                        file: origin.to_string(),
                        line: lineno,
                        message: "empty section name".to_string(),
                    });
                }
                tree.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    file: origin.to_string(),
                    line: lineno,
                    message: format!("expected key=value, got {:?}", line),
                });
            };
            let Some(section) = current.clone() else {
                return Err(ConfigError::Parse {
                    file: origin.to_string(),
                    line: lineno,
                    message: "option outside of any section".to_string(),
                });
            };
            let value = parse_value(value.trim()).map_err(|message| ConfigError::Parse {
                file: origin.to_string(),
                line: lineno,
                message,
            })?;
            tree.sections
                .get_mut(&section)
                .unwrap()
                .insert(key.trim().to_string(), value);
        }
        Ok(tree)
    }

    /// Parse each file in order; files that do not exist or cannot be
    /// opened are skipped, files that exist but are malformed are errors.
    /// Later files override earlier ones.
    pub fn load_layers<P: AsRef<Path>>(paths: &[P]) -> Result<Self, ConfigError> {
        let mut merged = ConfigTree::new();
        for path in paths {
            let path = path.as_ref();
            let Ok(text) = std::fs::read_to_string(path) else {
                continue;
            };
            let layer = ConfigTree::parse_str(&text, &path.display().to_string())?;
            merged.merge_layer(layer);
        }
        Ok(merged)
    }

    /// Overlay `layer` onto this tree, key by key.
    pub fn merge_layer(&mut self, layer: ConfigTree) {
        for (path, options) in layer.sections {
            let section = self.sections.entry(path).or_default();
            for (key, value) in options {
                section.insert(key, value);
            }
        }
    }

    pub fn get(&self, path: &str, option: &str) -> Option<&ConfigValue> {
        self.sections.get(path)?.get(option)
    }

    pub fn get_i64(&self, path: &str, option: &str) -> Option<i64> {
        self.get(path, option)?.as_i64()
    }

    pub fn get_f64(&self, path: &str, option: &str) -> Option<f64> {
        self.get(path, option)?.as_f64()
    }

    pub fn get_str(&self, path: &str, option: &str) -> Option<&str> {
        self.get(path, option)?.as_str()
    }

    pub fn get_map(&self, path: &str, option: &str) -> Option<&BTreeMap<String, MapValue>> {
        self.get(path, option)?.as_map()
    }

    pub fn has_section(&self, path: &str) -> bool {
        self.sections.contains_key(path)
    }

    pub fn section(&self, path: &str) -> Option<&BTreeMap<String, ConfigValue>> {
        self.sections.get(path)
    }

    pub fn sections(&self) -> impl Iterator<Item = (&String, &BTreeMap<String, ConfigValue>)> {
        self.sections.iter()
    }

    pub fn set(&mut self, path: &str, option: &str, value: ConfigValue) {
        self.sections
            .entry(path.to_string())
            .or_default()
            .insert(option.to_string(), value);
    }

    /// Deep copy of the section at `path` together with all subsections.
    /// The empty path copies the whole tree.
    pub fn subtree(&self, path: &str) -> Result<ConfigTree, ConfigError> {
        if path.is_empty() {
            return Ok(self.clone());
        }
        let mut out = ConfigTree::new();
        for (name, options) in &self.sections {
            if covered_by(name, path) {
                out.sections.insert(name.clone(), options.clone());
            }
        }
        if out.sections.is_empty() {
            return Err(ConfigError::UnknownSection(path.to_string()));
        }
        Ok(out)
    }

    /// Render back to the file syntax. Parsing the output yields an
    /// equal tree.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, options) in &self.sections {
            out.push_str(&format!("[{}]\n", name));
            for (key, value) in options {
                out.push_str(&format!("{}={}\n", key, value));
            }
            out.push('\n');
        }
        out
    }
}

/// `path` is the prefix itself or anything strictly below it.
fn covered_by(path: &str, prefix: &str) -> bool {
    prefix.is_empty() || path == prefix || path.starts_with(&format!("{}/", prefix))
}

fn parse_value(raw: &str) -> Result<ConfigValue, String> {
    if raw.starts_with('{') {
        return parse_map_literal(raw).map(ConfigValue::Map);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Ok(ConfigValue::Integer(i));
    }
    if let Ok(d) = raw.parse::<f64>() {
        return Ok(ConfigValue::Decimal(d));
    }
    Ok(ConfigValue::Text(raw.to_string()))
}

fn parse_map_literal(raw: &str) -> Result<BTreeMap<String, MapValue>, String> {
    let inner = raw
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| "map literal must be enclosed in braces".to_string())?;
    let mut map = BTreeMap::new();
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let after_quote = rest
            .strip_prefix('\'')
            .ok_or_else(|| "map keys must be single-quoted".to_string())?;
        let (key, after_key) = after_quote
            .split_once('\'')
            .ok_or_else(|| "unterminated map key".to_string())?;
        let after_colon = after_key
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| "expected ':' after map key".to_string())?
            .trim_start();
        let (value, tail) = if let Some(quoted) = after_colon.strip_prefix('\'') {
            let (text, tail) = quoted
                .split_once('\'')
                .ok_or_else(|| "unterminated map value".to_string())?;
            (MapValue::Text(text.to_string()), tail)
        } else {
            let end = after_colon
                .find(',')
                .unwrap_or(after_colon.len());
            let (num, tail) = after_colon.split_at(end);
            let num = num.trim();
            let value = if let Ok(i) = num.parse::<i64>() {
                MapValue::Integer(i)
            } else if let Ok(d) = num.parse::<f64>() {
                MapValue::Decimal(d)
            } else {
                return Err(format!("unquoted map value {:?} is not a number", num));
            };
            (value, tail)
        };
        map.insert(key.to_string(), value);
        rest = tail.trim_start();
        if let Some(after_comma) = rest.strip_prefix(',') {
            rest = after_comma.trim_start();
            if rest.is_empty() {
                return Err("trailing comma in map literal".to_string());
            }
        } else if !rest.is_empty() {
            return Err(format!("unexpected trailing input {:?} in map literal", rest));
        }
    }
    Ok(map)
}

/// A committed change, delivered to every subscription whose prefix
/// covers the changed section.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigChange {
    pub path: String,
    pub option: String,
    pub old: Option<ConfigValue>,
    pub new: ConfigValue,
}

pub type SubscriptionId = u64;

type Callback = Box<dyn FnMut(&ConfigChange)>;

struct Subscription {
    id: SubscriptionId,
    prefix: String,
    callback: Callback,
}

/// The configuration database: a committed tree plus observers. Writes
/// are serialized through `set_value`, which dispatches notifications in
/// subscription order.
pub struct ConfigDb {
    tree: ConfigTree,
    subscriptions: Vec<Subscription>,
    immutable: BTreeSet<(String, String)>,
    next_id: SubscriptionId,
}

impl ConfigDb {
    pub fn new(tree: ConfigTree) -> Self {
        let mut immutable = BTreeSet::new();
        // Swapping the policy state loader requires reconstructing the
        // plug-in repositories, which only happens at startup.
        immutable.insert(("server/policy".to_string(), "state_loader".to_string()));
        ConfigDb {
            tree,
            subscriptions: Vec::new(),
            immutable,
            next_id: 1,
        }
    }

    /// Packaged defaults merged with the given override layers.
    pub fn from_layers<P: AsRef<Path>>(layers: &[P]) -> Result<Self, ConfigError> {
        let mut tree = ConfigTree::parse_str(DEFAULT_CONFIG, "<defaults>")?;
        tree.merge_layer(ConfigTree::load_layers(layers)?);
        Ok(ConfigDb::new(tree))
    }

    pub fn tree(&self) -> &ConfigTree {
        &self.tree
    }

    pub fn mark_immutable(&mut self, path: &str, option: &str) {
        self.immutable
            .insert((path.to_string(), option.to_string()));
    }

    pub fn subscribe(&mut self, prefix: &str, callback: Callback) -> SubscriptionId {
        let id = self.next_id;
        self.next_id += 1;
        self.subscriptions.push(Subscription {
            id,
            prefix: prefix.to_string(),
            callback,
        });
        id
    }

    pub fn unsubscribe(&mut self, id: SubscriptionId) {
        self.subscriptions.retain(|s| s.id != id);
    }

    /// Deep copy of a section and its subsections.
    pub fn get_section(&self, path: &str) -> Result<ConfigTree, ConfigError> {
        self.tree.subtree(path)
    }

    /// Commit a value and notify covering subscriptions. Writing a value
    /// identical to the current one is a no-op and returns `Ok(None)`.
    pub fn set_value(
        &mut self,
        path: &str,
        option: &str,
        value: ConfigValue,
    ) -> Result<Option<ConfigChange>, ConfigError> {
        if self
            .immutable
            .contains(&(path.to_string(), option.to_string()))
        {
            return Err(ConfigError::ImmutableOption {
                section: path.to_string(),
                option: option.to_string(),
            });
        }
        let old = self.tree.get(path, option).cloned();
        if old.as_ref() == Some(&value) {
            return Ok(None);
        }
        self.tree.set(path, option, value.clone());
        let change = ConfigChange {
            path: path.to_string(),
            option: option.to_string(),
            old,
            new: value,
        };
        for sub in &mut self.subscriptions {
            if covered_by(&change.path, &sub.prefix) {
                (sub.callback)(&change);
            }
        }
        Ok(Some(change))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;
    use std::rc::Rc;

    #[test]
    fn defaults_layer_parses_with_expected_values() {
        let tree = ConfigTree::parse_str(DEFAULT_CONFIG, "<defaults>").unwrap();
        assert_eq!(tree.get_i64("server/policy/overload", "check_interval"), Some(12));
        assert_eq!(tree.get_i64("client", "frequency"), Some(2));
        assert_eq!(tree.get_i64("server/data", "max_in_memory_observations"), Some(20));
        let state = tree
            .get_map("server/policy/state", "overload-mem-default")
            .unwrap();
        assert_eq!(state.get("threshold").unwrap().as_f64(), Some(0.80));
        let active = tree
            .get_map("server/policy/overload", "active_policies")
            .unwrap();
        assert_eq!(active.get("mem").unwrap().as_str(), Some("default"));
        assert_eq!(
            active.get("cpu").unwrap().as_str(),
            Some("auto_regressive_order_1")
        );
    }

    #[test]
    fn later_layers_override_key_by_key() {
        let defaults =
            ConfigTree::parse_str("[server/policy/overload]\ncheck_interval=12\n", "a").unwrap();
        let user = ConfigTree::parse_str("[server/policy/overload]\ncheck_interval=5\n", "b").unwrap();
        let mut merged = defaults;
        merged.merge_layer(user);
        assert_eq!(merged.get_i64("server/policy/overload", "check_interval"), Some(5));
    }

    #[test]
    fn missing_layer_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let present = dir.path().join("present.conf");
        std::fs::write(&present, "[client]\nfrequency=7\n").unwrap();
        let missing = dir.path().join("missing.conf");
        let tree = ConfigTree::load_layers(&[present, missing]).unwrap();
        assert_eq!(tree.get_i64("client", "frequency"), Some(7));
    }

    #[test]
    fn malformed_existing_file_is_a_parse_error_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.conf");
        std::fs::write(&bad, "[client]\nfrequency\n").unwrap();
        let err = ConfigTree::load_layers(&[bad]).unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {:?}", other),
        }
    }

    #[test]
    fn map_literal_parses() {
        let tree =
            ConfigTree::parse_str("[s]\noverload-mem-default={'threshold':0.80}\n", "t").unwrap();
        let map = tree.get_map("s", "overload-mem-default").unwrap();
        assert_eq!(map.get("threshold").unwrap().as_f64(), Some(0.80));
    }

    #[test]
    fn subtree_copies_section_and_subsections() {
        let tree = ConfigTree::parse_str(DEFAULT_CONFIG, "<defaults>").unwrap();
        let copy = tree.subtree("server/policy").unwrap();
        assert!(copy.has_section("server/policy/overload"));
        assert!(copy.has_section("server/policy/state"));
        assert!(!copy.has_section("client"));
        assert!(tree.subtree("no/such/section").is_err());
        let whole = tree.subtree("").unwrap();
        assert_eq!(whole, tree);
    }

    #[test]
    fn subtree_copy_is_independent() {
        let tree = ConfigTree::parse_str("[client]\nfrequency=2\n", "t").unwrap();
        let mut copy = tree.subtree("client").unwrap();
        copy.set("client", "frequency", ConfigValue::Integer(99));
        assert_eq!(tree.get_i64("client", "frequency"), Some(2));
    }

    #[test]
    fn section_round_trips_through_text() {
        let tree = ConfigTree::parse_str(DEFAULT_CONFIG, "<defaults>").unwrap();
        let copy = tree.subtree("server/policy").unwrap();
        let reparsed = ConfigTree::parse_str(&copy.to_text(), "<round-trip>").unwrap();
        assert_eq!(copy, reparsed);
    }

    #[test]
    fn set_value_notifies_prefix_subscribers_once_in_order() {
        let mut db = ConfigDb::new(ConfigTree::parse_str(DEFAULT_CONFIG, "d").unwrap());
        let seen: Rc<RefCell<Vec<(String, String)>>> = Rc::new(RefCell::new(Vec::new()));
        for prefix in ["server/policy", "server", "client"] {
            let seen = Rc::clone(&seen);
            let tag = prefix.to_string();
            db.subscribe(
                prefix,
                Box::new(move |change| {
                    seen.borrow_mut().push((tag.clone(), change.option.clone()));
                }),
            );
        }
        db.set_value(
            "server/policy/overload",
            "check_interval",
            ConfigValue::Integer(6),
        )
        .unwrap()
        .expect("value changed");
        let seen = seen.borrow();
        assert_eq!(
            *seen,
            vec![
                ("server/policy".to_string(), "check_interval".to_string()),
                ("server".to_string(), "check_interval".to_string()),
            ]
        );
    }

    #[test]
    fn identical_write_is_suppressed() {
        let mut db = ConfigDb::new(ConfigTree::parse_str(DEFAULT_CONFIG, "d").unwrap());
        let count = Rc::new(RefCell::new(0));
        let c = Rc::clone(&count);
        db.subscribe("", Box::new(move |_| *c.borrow_mut() += 1));
        let result = db
            .set_value("client", "frequency", ConfigValue::Integer(2))
            .unwrap();
        assert!(result.is_none());
        assert_eq!(*count.borrow(), 0);
    }

    #[test]
    fn state_loader_is_restart_only() {
        let mut db = ConfigDb::new(ConfigTree::parse_str(DEFAULT_CONFIG, "d").unwrap());
        let err = db
            .set_value(
                "server/policy",
                "state_loader",
                ConfigValue::Text("file".to_string()),
            )
            .unwrap_err();
        assert!(matches!(err, ConfigError::ImmutableOption { .. }));
    }

    #[test]
    fn merge_is_associative() {
        let a = ConfigTree::parse_str("[s]\nx=1\ny=1\n", "a").unwrap();
        let b = ConfigTree::parse_str("[s]\nx=2\n[t]\nz=3\n", "b").unwrap();
        let c = ConfigTree::parse_str("[s]\ny=9\n", "c").unwrap();

        let mut left = a.clone();
        left.merge_layer(b.clone());
        left.merge_layer(c.clone());

        let mut right_inner = b;
        right_inner.merge_layer(c);
        let mut right = a;
        right.merge_layer(right_inner);

        assert_eq!(left, right);
    }
}
