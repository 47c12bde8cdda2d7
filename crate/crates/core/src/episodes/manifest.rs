//! Episode manifests: one `key=value` record per episode, e.g.
//! `episode_id=0 class_id=4 support_ids=17,93 query_id=5 seed=1234`.

use crate::error::Result;
use crate::records::{join_list, split_list, Record};
use crate::types::Episode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeRecord {
    pub episode_id: usize,
    pub class_id: usize,
    pub support_ids: Vec<u64>,
    pub query_id: u64,
    pub seed: u64,
}

impl EpisodeRecord {
    pub fn of(episode_id: usize, ep: &Episode) -> Self {
        Self {
            episode_id,
            class_id: ep.class_id,
            support_ids: ep.supports.iter().map(|s| s.instance_id).collect(),
            query_id: ep.query_id,
            seed: ep.seed,
        }
    }

    pub fn to_record(&self) -> Record {
        Record::new()
            .with("episode_id", self.episode_id)
            .with("class_id", self.class_id)
            .with("support_ids", join_list(&self.support_ids))
            .with("query_id", self.query_id)
            .with("seed", self.seed)
    }

    pub fn from_record(r: &Record) -> Result<Self> {
        Ok(Self {
            episode_id: r.parse_field("episode_id")?,
            class_id: r.parse_field("class_id")?,
            support_ids: split_list(r.require("support_ids")?)?,
            query_id: r.parse_field("query_id")?,
            seed: r.parse_field("seed")?,
        })
    }
}

pub fn write_manifest(records: &[EpisodeRecord]) -> String {
    records.iter().map(|r| format!("{}\n", r.to_record())).collect()
}

pub fn read_manifest(text: &str) -> Result<Vec<EpisodeRecord>> {
    crate::records::parse_lines(text)?.iter().map(EpisodeRecord::from_record).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let recs = vec![
            EpisodeRecord { episode_id: 0, class_id: 4, support_ids: vec![17, 93], query_id: 5, seed: 1234 },
            EpisodeRecord { episode_id: 1, class_id: 0, support_ids: vec![2], query_id: 8, seed: u64::MAX },
        ];
        let text = write_manifest(&recs);
        assert!(text.starts_with("episode_id=0 class_id=4 support_ids=17,93 query_id=5 seed=1234\n"));
        assert_eq!(read_manifest(&text).unwrap(), recs);
    }
}
