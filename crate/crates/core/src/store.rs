//! Hash-indexed, reference-counted, de-duplicating Content Object store.
//!
//! Objects are keyed by their message hash. Storing a byte-identical object
//! again only bumps its reference count, so nameless objects (whose hash
//! covers nothing but framing and payload) dedup across VMs, checkpoints,
//! and resource kinds. References are owned by checkpoints and dropped in
//! bulk by [`ContentStore::release`].

use alloc::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::hash::Hash256;
use crate::name::Name;
use crate::wire::{compute_object_hash, ContentObject, NamedAddress, WireError};

/// Owner of store references: one checkpoint version of one VM.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CheckpointId {
    pub vm: Name,
    pub version: u64,
}

impl CheckpointId {
    pub fn new(vm: Name, version: u64) -> Self {
        CheckpointId { vm, version }
    }
}

#[derive(Debug, Clone)]
pub struct StoreEntry {
    pub object: ContentObject,
    pub hash: Hash256,
    pub refcount: u64,
    pub logical_refs: u64,
    pub encoded_len: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupStats {
    pub unique_objects: u64,
    pub logical_references: u64,
    pub unique_bytes: u64,
    pub logical_bytes: u64,
    pub saved_bytes: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ContentStore {
    entries: BTreeMap<Hash256, StoreEntry>,
    by_name: BTreeMap<Name, Hash256>,
    owners: BTreeMap<CheckpointId, BTreeMap<Hash256, u64>>,
    unique_bytes: u64,
    logical_references: u64,
    logical_bytes: u64,
}

impl ContentStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `obj` on behalf of `owner` and returns its content hash.
    pub fn put(&mut self, obj: ContentObject, owner: &CheckpointId) -> Result<Hash256, WireError> {
        let hash = compute_object_hash(&obj)?;
        self.put_hashed(obj, hash, owner);
        Ok(hash)
    }

    /// Like [`ContentStore::put`] when the caller already computed the hash.
    pub fn put_hashed(&mut self, obj: ContentObject, hash: Hash256, owner: &CheckpointId) {
        let size = obj.encoded_len() as u64;
        self.logical_references += 1;
        self.logical_bytes += size;
        let name = obj.name.clone();
        let entry = self.entries.entry(hash).or_insert_with(|| StoreEntry {
            encoded_len: size as usize,
            object: obj,
            hash,
            refcount: 0,
            logical_refs: 0,
        });
        if entry.refcount == 0 {
            self.unique_bytes += size;
        }
        entry.refcount += 1;
        entry.logical_refs += 1;
        if let Some(name) = name {
            self.by_name.insert(name, hash);
        }
        *self
            .owners
            .entry(owner.clone())
            .or_default()
            .entry(hash)
            .or_insert(0) += 1;
    }

    /// Lookup by hash restriction when present (the name is then only a
    /// routing scope for nameless objects), else by exact name.
    pub fn get(&self, address: &NamedAddress) -> Option<&ContentObject> {
        let entry = match (&address.hash_restr, &address.name) {
            (Some(h), _) => self.entries.get(h)?,
            (None, Some(name)) => self.entries.get(self.by_name.get(name)?)?,
            (None, None) => return None,
        };
        let obj = &entry.object;
        let name_ok = match (&address.name, &obj.name) {
            (Some(want), Some(have)) => want == have,
            (Some(_), None) => address.hash_restr.is_some(),
            (None, _) => true,
        };
        let key_ok = address
            .key_id_restr
            .as_ref()
            .is_none_or(|k| obj.key_id.as_ref() == Some(k));
        (name_ok && key_ok).then_some(obj)
    }

    pub fn get_by_hash(&self, hash: &Hash256) -> Option<&ContentObject> {
        self.entries.get(hash).map(|e| &e.object)
    }

    pub fn contains(&self, hash: &Hash256) -> bool {
        self.entries.contains_key(hash)
    }

    pub fn entry(&self, hash: &Hash256) -> Option<&StoreEntry> {
        self.entries.get(hash)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn owners(&self) -> impl Iterator<Item = &CheckpointId> {
        self.owners.keys()
    }

    /// Drops every reference held by `owner`; returns how many entries were
    /// evicted. Unknown owners are a no-op.
    pub fn release(&mut self, owner: &CheckpointId) -> usize {
        let Some(held) = self.owners.remove(owner) else {
            return 0;
        };
        let mut evicted = 0;
        for (hash, count) in held {
            let Some(entry) = self.entries.get_mut(&hash) else {
                continue;
            };
            entry.refcount = entry.refcount.saturating_sub(count);
            if entry.refcount == 0 {
                let entry = self.entries.remove(&hash).expect("entry present");
                self.unique_bytes -= entry.encoded_len as u64;
                if let Some(name) = &entry.object.name {
                    if self.by_name.get(name) == Some(&hash) {
                        self.by_name.remove(name);
                    }
                }
                evicted += 1;
            }
        }
        evicted
    }

    pub fn stats(&self) -> DedupStats {
        DedupStats {
            unique_objects: self.entries.len() as u64,
            logical_references: self.logical_references,
            unique_bytes: self.unique_bytes,
            logical_bytes: self.logical_bytes,
            saved_bytes: self.logical_bytes - self.unique_bytes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn owner(v: u64) -> CheckpointId {
        CheckpointId::new(Name::parse("/vm").unwrap(), v)
    }

    fn block(fill: u8, n: usize) -> ContentObject {
        ContentObject::nameless(vec![fill; n])
    }

    #[test]
    fn empty_store_stats_are_zero() {
        assert_eq!(ContentStore::new().stats(), DedupStats::default());
    }

    #[test]
    fn duplicate_put_saves_one_copy() {
        let mut s = ContentStore::new();
        let x = block(1, 512);
        let h1 = s.put(x.clone(), &owner(0)).unwrap();
        let h2 = s.put(x.clone(), &owner(0)).unwrap();
        assert_eq!(h1, h2);
        let st = s.stats();
        assert_eq!(st.unique_objects, 1);
        assert_eq!(st.logical_references, 2);
        assert_eq!(st.saved_bytes, x.encoded_len() as u64);
        assert_eq!(s.entry(&h1).unwrap().refcount, 2);
    }

    #[test]
    fn three_puts_two_unique() {
        let mut s = ContentStore::new();
        s.put(block(1, 8), &owner(0)).unwrap();
        s.put(block(2, 8), &owner(0)).unwrap();
        s.put(block(1, 8), &owner(1)).unwrap();
        let st = s.stats();
        assert_eq!((st.unique_objects, st.logical_references), (2, 3));
    }

    #[test]
    fn all_identical_blocks_saved_bytes() {
        let (n, size) = (37u64, 512usize);
        let mut s = ContentStore::new();
        for _ in 0..n {
            s.put(block(9, size), &owner(0)).unwrap();
        }
        assert_eq!(s.stats().saved_bytes, (n - 1) * (size as u64 + 16));
    }

    #[test]
    fn get_by_prefix_and_hash_ignores_prefix() {
        let mut s = ContentStore::new();
        let page = block(3, 4096);
        let h = s.put(page.clone(), &owner(1)).unwrap();
        let a = NamedAddress::hashed(Name::parse("/vm/checkpoint/ver=1/ram").unwrap(), h);
        assert_eq!(s.get(&a), Some(&page));
        let host = NamedAddress::hashed(Name::parse("/nyc/host7").unwrap(), h);
        let shared = NamedAddress::hashed(Name::parse("/nyc/objectstore").unwrap(), h);
        assert_eq!(s.get(&host), s.get(&shared));
        assert!(s
            .get(&NamedAddress::named(
                Name::parse("/never/published").unwrap()
            ))
            .is_none());
    }

    #[test]
    fn get_by_exact_name() {
        let mut s = ContentStore::new();
        let n = Name::parse("/vm/checkpoint/ver=0/manifest/chunk=0").unwrap();
        let obj = ContentObject::named(n.clone(), vec![1, 2]);
        s.put(obj.clone(), &owner(0)).unwrap();
        assert_eq!(s.get(&NamedAddress::named(n)), Some(&obj));
    }

    #[test]
    fn release_semantics() {
        let mut s = ContentStore::new();
        let shared = block(1, 64);
        s.put(shared.clone(), &owner(0)).unwrap();
        s.put(block(2, 64), &owner(0)).unwrap();
        let h = s.put(shared, &owner(1)).unwrap();
        assert_eq!(s.release(&owner(0)), 1);
        assert_eq!(s.entry(&h).unwrap().refcount, 1);
        assert_eq!(s.release(&owner(0)), 0);
        assert_eq!(s.release(&owner(1)), 1);
        assert!(s.is_empty());
        assert_eq!(s.release(&owner(42)), 0);
    }

    proptest! {
        #[test]
        fn unique_objects_match_hash_set(
            puts in prop::collection::vec((0u8..6, 0usize..40, 0u64..3), 1..60)
        ) {
            let mut s = ContentStore::new();
            let mut oracle = BTreeSet::new();
            let mut hashes = Vec::new();
            for (fill, len, v) in &puts {
                let obj = block(*fill, *len);
                oracle.insert(Hash256::digest(&crate::wire::encode_content_object(&obj).unwrap()[8..]));
                hashes.push((s.put(obj, &owner(*v)).unwrap(), *v));
            }
            let st = s.stats();
            prop_assert_eq!(st.unique_objects as usize, oracle.len());
            prop_assert_eq!(st.logical_references as usize, puts.len());
            prop_assert!(st.unique_objects <= st.logical_references);
            // Objects survive until their last owner is released.
            s.release(&owner(0));
            for (h, v) in &hashes {
                let still_owned = hashes.iter().any(|(h2, v2)| h2 == h && *v2 != 0);
                prop_assert_eq!(s.contains(h), still_owned, "owner {}", v);
            }
        }
    }
}
