//! Name → detector factory table. Read-only once built.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::wire::ProcessAdapter;
use super::{Detector, GatewayError};

pub type Factory = Arc<dyn Fn() -> Result<Box<dyn Detector>, GatewayError> + Send + Sync>;

#[derive(Clone)]
enum Entry {
    InProcess { description: String, factory: Factory },
    Process { command: Vec<String> },
}

#[derive(Clone, Default)]
pub struct Registry {
    entries: BTreeMap<String, Entry>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, description: impl Into<String>, factory: Factory) {
        self.entries.insert(
            name.into(),
            Entry::InProcess {
                description: description.into(),
                factory,
            },
        );
    }

    /// An external adapter started as `command` and spoken to over its
    /// stdin/stdout.
    pub fn register_process(&mut self, name: impl Into<String>, command: Vec<String>) {
        self.entries.insert(name.into(), Entry::Process { command });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    /// `(name, description)` for every entry.
    pub fn describe(&self) -> Vec<(String, String)> {
        self.entries
            .iter()
            .map(|(n, e)| {
                let d = match e {
                    Entry::InProcess { description, .. } => description.clone(),
                    Entry::Process { command } => format!("process adapter: {}", command.join(" ")),
                };
                (n.clone(), d)
            })
            .collect()
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn Detector>, GatewayError> {
        match self.entries.get(name) {
            Some(Entry::InProcess { factory, .. }) => factory(),
            Some(Entry::Process { command }) => Ok(Box::new(ProcessAdapter::spawn(command)?)),
            None => Err(GatewayError::UnknownDetector(name.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ToyDetector, ToyNet};

    #[test]
    fn unknown_name_is_an_error() {
        let r = Registry::new();
        assert!(matches!(r.create("nope"), Err(GatewayError::UnknownDetector(_))));
    }

    #[test]
    fn registered_factory_builds_a_handle() {
        let mut r = Registry::new();
        let net = Arc::new(ToyNet::new(0));
        r.register("toy", "untrained", Arc::new(move || Ok(Box::new(ToyDetector::new("toy", net.clone())) as Box<dyn Detector>)));
        assert_eq!(r.names(), vec!["toy"]);
        assert_eq!(r.create("toy").unwrap().manifest().name, "toy");
    }
}
