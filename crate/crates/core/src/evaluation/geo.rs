//! Spatial hash answering "which database sequences are within the match
//! threshold of this query" without scanning the whole database.

use std::collections::HashMap;

use crate::datamodel::GeoTag;

use super::is_correct_match_tags;

#[derive(Debug, Clone)]
pub struct GeoIndex {
    threshold_m: f64,
    tags: Vec<Vec<GeoTag>>,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl GeoIndex {
    /// Buckets are `threshold_m` wide, so every match lies in the 3x3
    /// neighbourhood of some query frame's bucket.
    pub fn new(database: Vec<Vec<GeoTag>>, threshold_m: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, tags) in database.iter().enumerate() {
            for t in tags {
                let bucket = cells.entry(Self::cell(t, threshold_m)).or_default();
                if bucket.last() != Some(&i) {
                    bucket.push(i);
                }
            }
        }
        GeoIndex { threshold_m, tags: database, cells }
    }

    fn cell(t: &GeoTag, size: f64) -> (i64, i64) {
        ((t.easting / size).floor() as i64, (t.northing / size).floor() as i64)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn threshold_m(&self) -> f64 {
        self.threshold_m
    }

    pub fn tags(&self, i: usize) -> &[GeoTag] {
        &self.tags[i]
    }

    pub fn is_positive(&self, query: &[GeoTag], i: usize) -> bool {
        is_correct_match_tags(query, &self.tags[i], self.threshold_m)
    }

    /// Indices of all correct matches for `query`, ascending.
    pub fn positives(&self, query: &[GeoTag]) -> Vec<usize> {
        let mut cand = Vec::new();
        for q in query {
            let (cx, cy) = Self::cell(q, self.threshold_m);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    if let Some(b) = self.cells.get(&(cx + dx, cy + dy)) {
                        cand.extend_from_slice(b);
                    }
                }
            }
        }
        cand.sort_unstable();
        cand.dedup();
        cand.retain(|&i| self.is_positive(query, i));
        cand
    }
}
