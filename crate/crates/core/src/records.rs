//! Plain-text records: one record per line, space-separated `key=value`
//! fields. Values must not contain spaces, `=` or newlines; list values are
//! comma-separated.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record {
    fields: Vec<(String, String)>,
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.push(key, value);
        self
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.fields.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::InvalidArgument(format!("record lacks `{key}`")))
    }

    pub fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.require(key)?;
        v.parse().map_err(|_| Error::InvalidArgument(format!("field `{key}` has unparsable value `{v}`")))
    }

    pub fn fields(&self) -> impl Iterator<Item = (&str, &str)> {
        self.fields.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.fields.iter().cloned().collect()
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut fields = Vec::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("field `{tok}` is not key=value")))?;
            if k.is_empty() {
                return Err(Error::InvalidArgument(format!("field `{tok}` has an empty key")));
            }
            fields.push((k.to_string(), v.to_string()));
        }
        Ok(Self { fields })
    }
}

impl std::fmt::Display for Record {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, (k, v)) in self.fields.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

pub fn parse_lines(text: &str) -> Result<Vec<Record>> {
    text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).map(Record::parse).collect()
}

pub fn join_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn split_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad list item `{p}`"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let r = Record::new().with("epoch", 3).with("miou", 61.25).with("ids", join_list(&[1, 2, 3]));
        let line = r.to_string();
        assert_eq!(line, "epoch=3 miou=61.25 ids=1,2,3");
        let back = Record::parse(&line).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.parse_field::<u32>("epoch").unwrap(), 3);
        assert_eq!(split_list::<u64>(back.get("ids").unwrap()).unwrap(), vec![1, 2, 3]);
        assert!(Record::parse("novalue").is_err());
        assert!(back.require("missing").is_err());
    }
}
