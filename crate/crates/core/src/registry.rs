//! Name-keyed registries for interchangeable strategies (models, augmentations, metrics).

use indexmap::IndexMap;

use crate::error::{CatsError, Result};

/// Ordered map from a strategy name to its factory.
pub struct Registry<F> {
    kind: &'static str,
    entries: IndexMap<String, F>,
}

impl<F> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: IndexMap::new() }
    }

    /// Add a factory; names must be unique.
    pub fn register(&mut self, name: impl Into<String>, factory: F) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(CatsError::config(self.kind, format!("`{}` is already registered", name)));
        }
        self.entries.insert(name, factory);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&F> {
        self.entries.get(name).ok_or_else(|| CatsError::UnknownName {
            kind: self.kind,
            name: name.into(),
            available: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_duplicates() {
        let mut r: Registry<fn() -> u8> = Registry::new("thing");
        r.register("a", || 1).unwrap();
        r.register("b", || 2).unwrap();
        assert_eq!((r.get("b").unwrap())(), 2);
        assert!(r.register("a", || 3).is_err());
        match r.get("zzz") {
            Err(CatsError::UnknownName { available, .. }) => assert_eq!(available, "a, b"),
            _ => panic!(),
        }
    }
}
