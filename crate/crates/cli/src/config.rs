//! Resolved-configuration echo printed before every run.

use std::fmt::Display;

pub struct Echo {
    section: &'static str,
    entries: Vec<(&'static str, String)>,
}

impl Echo {
    pub fn new(section: &'static str) -> Self {
        Echo { section, entries: Vec::new() }
    }

    pub fn set(mut self, key: &'static str, value: impl Display) -> Self {
        self.entries.push((key, value.to_string()));
        self
    }

    pub fn opt<T: Display>(self, key: &'static str, value: Option<T>) -> Self {
        match value {
            Some(v) => self.set(key, v),
            None => self.set(key, "none"),
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("[{}]\n", self.section);
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}
