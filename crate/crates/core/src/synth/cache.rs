//! Exact LRU cache used to decide hit/miss per simulated edge node.

use std::collections::{BTreeMap, HashMap};

pub struct LruCache {
    capacity: usize,
    clock: u64,
    /// content id -> last-use stamp
    entries: HashMap<u32, u64>,
    /// last-use stamp -> content id, oldest first
    order: BTreeMap<u64, u32>,
}

impl LruCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            clock: 0,
            entries: HashMap::new(),
            order: BTreeMap::new(),
        }
    }

    /// Looks up and touches a content; inserts on miss, evicting the
    /// least recently used entry when full. Returns whether it was a
    /// hit.
    pub fn access(&mut self, content: u32) -> bool {
        self.clock += 1;
        if let Some(stamp) = self.entries.get_mut(&content) {
            self.order.remove(stamp);
            *stamp = self.clock;
            self.order.insert(self.clock, content);
            return true;
        }
        if self.entries.len() >= self.capacity {
            if let Some((&oldest, &victim)) = self.order.iter().next() {
                self.order.remove(&oldest);
                self.entries.remove(&victim);
            }
        }
        self.entries.insert(content, self.clock);
        self.order.insert(self.clock, content);
        false
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn back_to_back_request_is_a_hit() {
        let mut c = LruCache::new(4);
        assert!(!c.access(7));
        assert!(c.access(7));
    }

    #[test]
    fn evicts_least_recently_used() {
        let mut c = LruCache::new(2);
        c.access(1);
        c.access(2);
        c.access(1); // 2 is now the LRU entry
        c.access(3); // evicts 2
        assert!(c.access(1));
        assert!(!c.access(2));
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn cycling_beyond_capacity_misses_every_time() {
        let mut c = LruCache::new(3);
        for round in 0..3 {
            for key in 0..6 {
                assert!(!c.access(key), "round {round} key {key}");
            }
        }
    }
}
