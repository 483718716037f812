use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Dense firm index in `0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FirmId(pub u32);

impl FirmId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for FirmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bijection between external firm identifiers and dense [`FirmId`]s.
///
/// Ids are handed out in order of first appearance, so the mapping is stable
/// for a fixed input order.
#[derive(Debug, Clone, Default)]
pub struct IdMap {
    names: Vec<String>,
    lookup: HashMap<String, FirmId>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, name: &str) -> FirmId {
        if let Some(&id) = self.lookup.get(name) {
            return id;
        }
        let id = FirmId(self.names.len() as u32);
        self.names.push(name.to_owned());
        self.lookup.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<FirmId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: FirmId) -> &str {
        &self.names[id.index()]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Two-column CSV: `external_id,firm_index`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["external_id", "firm_index"])
            .map_err(std::io::Error::from)?;
        for (i, name) in self.names.iter().enumerate() {
            out.write_record([name.as_str(), &i.to_string()])
                .map_err(std::io::Error::from)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interning_is_idempotent_and_dense() {
        let mut m = IdMap::new();
        let a = m.intern("A");
        let b = m.intern("B");
        assert_eq!(m.intern("A"), a);
        assert_eq!((a.0, b.0), (0, 1));
        assert_eq!(m.name(b), "B");
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn csv_has_two_columns() {
        let mut m = IdMap::new();
        m.intern("x9");
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "external_id,firm_index\nx9,0\n");
    }
}
