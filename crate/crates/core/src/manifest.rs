//! Checkpoint manifests.
//!
//! A checkpoint `j` of a VM published under base name `B` is a set of
//! manifest chunks named `B/checkpoint/ver=j/manifest/chunk=k` plus the
//! objects they reference. Chunk 0 is the root: it carries the phase tag,
//! the VM name, and the chunk count. Every chunk carries its own version
//! and index so chunks can be parsed in any order.
//!
//! Entries live in per-kind sections. A strong section maps resource
//! indices to hash-named nameless objects `{prefix, hash}`; a weak section
//! lists explicit enumerated names such as `B/checkpoint/ver=j/ram/page/3`
//! and carries no hashes.
//!
//! Chunk payload layout (2+2 TLV, big-endian):
//!
//! ```text
//! T_CHUNK    { version: u64, index: u32 }
//! T_META     { phase: u8, chunk_count: u32, T_NAME vm_name }      root only
//! T_SECTION* { T_KIND { kind: u8, disk: u16, mode: u8 }, T_NAME prefix,
//!              T_HASHES { (index: u64, hash: [u8; 32])* }          strong
//!            | T_NAMED  { index: u64, T_NAME name }*               weak }
//! ```

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};
use core::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::Hash256;
use crate::machine::{ImageError, Locator, ResourceKind, Snapshot, VmImage};
use crate::name::Name;
use crate::store::{CheckpointId, ContentStore};
use crate::tlv::{Cursor, TlvReader, TlvWriter, HEADER_LEN};
use crate::wire::{
    compute_object_hash, name_tlv_len, read_name, write_name, ContentObject, NamedAddress,
    WireError, FIXED_HEADER_LEN, MAX_PAYLOAD, T_NAME,
};

const T_CHUNK: u16 = 0x0030;
const T_META: u16 = 0x0031;
const T_SECTION: u16 = 0x0032;
const T_KIND: u16 = 0x0033;
const T_HASHES: u16 = 0x0034;
const T_NAMED: u16 = 0x0035;

const STRONG_RECORD: usize = 8 + 32;

/// Default manifest chunk payload limit. Kept under the 16-bit packet
/// length so a chunk and its name always fit one Content Object.
pub const DEFAULT_CHUNK_LIMIT: usize = 64_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Push,
    StopAndCopy,
    Pull,
}

impl Phase {
    fn code(self) -> u8 {
        match self {
            Phase::Push => 0,
            Phase::StopAndCopy => 1,
            Phase::Pull => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Phase::Push,
            1 => Phase::StopAndCopy,
            2 => Phase::Pull,
            _ => return None,
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::Push => "push",
            Phase::StopAndCopy => "stop_and_copy",
            Phase::Pull => "pull",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum NamingMode {
    #[default]
    Strong,
    Weak,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Addressing {
    Strong { prefix: Name, hash: Hash256 },
    Weak { name: Name },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub locator: Locator,
    pub addressing: Addressing,
}

impl ManifestEntry {
    pub fn hash(&self) -> Option<&Hash256> {
        match &self.addressing {
            Addressing::Strong { hash, .. } => Some(hash),
            Addressing::Weak { .. } => None,
        }
    }
}

/// Where to fetch the object for `entry`.
pub fn entry_fetch_address(entry: &ManifestEntry) -> NamedAddress {
    match &entry.addressing {
        Addressing::Strong { prefix, hash } => NamedAddress::hashed(prefix.clone(), *hash),
        Addressing::Weak { name } => NamedAddress::named(name.clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub kind: ResourceKind,
    pub mode: NamingMode,
    pub prefix: Name,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub vm_name: Name,
    pub version: u64,
    pub phase: Phase,
    pub sections: Vec<Section>,
    pub chunk_count: u32,
}

impl Manifest {
    pub fn entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.sections.iter().flat_map(|s| s.entries.iter())
    }

    pub fn entry_count(&self) -> usize {
        self.sections.iter().map(|s| s.entries.len()).sum()
    }

    /// Equality of the logical content, ignoring how it was chunked.
    pub fn same_content(&self, other: &Manifest) -> bool {
        self.vm_name == other.vm_name
            && self.version == other.version
            && self.phase == other.phase
            && self.sections == other.sections
    }

    /// Human-readable listing.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "manifest {} ver={} phase={} chunks={} entries={}",
            self.vm_name,
            self.version,
            self.phase,
            self.chunk_count,
            self.entry_count()
        );
        for sec in &self.sections {
            let mode = match sec.mode {
                NamingMode::Strong => "strong",
                NamingMode::Weak => "weak",
            };
            let disk = match sec.kind {
                ResourceKind::DiskBlock { disk } | ResourceKind::VhdStruct { disk } => {
                    format!(" disk={disk}")
                }
                _ => String::new(),
            };
            let _ = writeln!(
                s,
                "  section {}{} {} prefix={} entries={}",
                sec.kind.label(),
                disk,
                mode,
                sec.prefix,
                sec.entries.len()
            );
            for e in &sec.entries {
                match &e.addressing {
                    Addressing::Strong { hash, .. } => {
                        let _ = writeln!(s, "    {:>8} hash={}", e.locator.index, hash);
                    }
                    Addressing::Weak { name } => {
                        let _ = writeln!(s, "    {:>8} name={}", e.locator.index, name);
                    }
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("selected resource {0} does not exist in the snapshot")]
    MissingResource(Locator),
    #[error("chunk limit of {0} bytes cannot hold a single entry")]
    ChunkLimitTooSmall(usize),
    #[error("incomplete manifest: missing chunks {0:?}")]
    Incomplete(Vec<u32>),
    #[error("corrupt manifest: {0}")]
    Corrupt(&'static str),
    #[error(transparent)]
    Wire(#[from] WireError),
}

pub fn checkpoint_name(base: &Name, version: u64) -> Name {
    base.child("checkpoint").child(format!("ver={version}"))
}

/// `B/checkpoint/ver=j/manifest`: the name the destination polls.
pub fn manifest_name(base: &Name, version: u64) -> Name {
    checkpoint_name(base, version).child("manifest")
}

pub fn chunk_name(base: &Name, version: u64, chunk: u32) -> Name {
    manifest_name(base, version).child(format!("chunk={chunk}"))
}

/// How to build one checkpoint manifest.
#[derive(Debug, Clone)]
pub struct ManifestPlan {
    /// Name the checkpoint is published under (generic or location name).
    pub base: Name,
    pub version: u64,
    pub phase: Phase,
    /// Per-kind naming modes; unlisted kinds are strong.
    pub modes: BTreeMap<ResourceKind, NamingMode>,
    /// Routing prefix for strong entries of a kind, replacing the default
    /// `B/checkpoint/ver=j/<section path>`.
    pub prefix_overrides: BTreeMap<ResourceKind, Name>,
    pub chunk_limit: usize,
}

impl ManifestPlan {
    pub fn new(base: Name, version: u64, phase: Phase) -> Self {
        ManifestPlan {
            base,
            version,
            phase,
            modes: BTreeMap::new(),
            prefix_overrides: BTreeMap::new(),
            chunk_limit: DEFAULT_CHUNK_LIMIT,
        }
    }

    pub fn mode(&self, kind: ResourceKind) -> NamingMode {
        self.modes.get(&kind).copied().unwrap_or_default()
    }

    fn checkpoint(&self) -> Name {
        checkpoint_name(&self.base, self.version)
    }
}

/// Output of [`build_manifest`].
#[derive(Debug, Clone)]
pub struct BuiltCheckpoint {
    pub manifest: Manifest,
    /// Chunk objects, `chunks[k]` named `.../manifest/chunk=k`.
    pub chunks: Vec<ContentObject>,
    /// Copy of the root chunk named `.../manifest`, answering polls.
    pub root_alias: ContentObject,
    /// Payload bytes of all entries.
    pub payload_bytes: u64,
}

impl BuiltCheckpoint {
    pub fn manifest_bytes(&self) -> u64 {
        self.chunks.iter().map(|c| c.encoded_len() as u64).sum()
    }
}

fn section_header_len(sec: &Section) -> usize {
    HEADER_LEN
        + HEADER_LEN
        + 4
        + name_tlv_len(&sec.prefix)
        + if sec.mode == NamingMode::Strong {
            HEADER_LEN
        } else {
            0
        }
}

fn record_len(sec: &Section, e: &ManifestEntry) -> usize {
    match &e.addressing {
        Addressing::Strong { .. } => STRONG_RECORD,
        Addressing::Weak { name } => {
            debug_assert_eq!(sec.mode, NamingMode::Weak);
            HEADER_LEN + 8 + name_tlv_len(name)
        }
    }
}

const CHUNK_INFO_LEN: usize = HEADER_LEN + 12;

fn meta_len(vm_name: &Name) -> usize {
    HEADER_LEN + 5 + name_tlv_len(vm_name)
}

/// Builds checkpoint `plan.version` over `selection`, storing every object
/// it references (nameless data objects for strong sections, plus the
/// manifest chunks) in `store` on behalf of `owner`.
pub fn build_manifest(
    snapshot: &Snapshot,
    selection: &BTreeSet<Locator>,
    plan: &ManifestPlan,
    store: &mut ContentStore,
    owner: &CheckpointId,
) -> Result<BuiltCheckpoint, ManifestError> {
    let (sections, objects, payload_bytes) = plan_sections(snapshot, selection, plan)?;
    for (obj, hash) in objects {
        store.put_hashed(obj, hash, owner);
    }
    let manifest = Manifest {
        vm_name: snapshot.config.vm_name.clone(),
        version: plan.version,
        phase: plan.phase,
        sections,
        chunk_count: 0,
    };
    let (manifest, chunks, root_alias) = encode_manifest(manifest, plan)?;
    for c in chunks.iter().chain(core::iter::once(&root_alias)) {
        store.put(c.clone(), owner)?;
    }
    Ok(BuiltCheckpoint {
        manifest,
        chunks,
        root_alias,
        payload_bytes,
    })
}

type Planned = (Vec<Section>, Vec<(ContentObject, Hash256)>, u64);

fn plan_sections(
    snapshot: &Snapshot,
    selection: &BTreeSet<Locator>,
    plan: &ManifestPlan,
) -> Result<Planned, ManifestError> {
    let checkpoint = plan.checkpoint();
    let mut sections: Vec<Section> = Vec::new();
    let mut objects = Vec::new();
    let mut payload_bytes = 0u64;
    for loc in selection {
        let data = snapshot
            .read(loc)
            .ok_or(ManifestError::MissingResource(*loc))?;
        payload_bytes += data.len() as u64;
        let mode = plan.mode(loc.kind);
        if sections.last().is_none_or(|s| s.kind != loc.kind) {
            let prefix = match mode {
                NamingMode::Strong => plan
                    .prefix_overrides
                    .get(&loc.kind)
                    .cloned()
                    .unwrap_or_else(|| checkpoint.join(&loc.kind.section_path(&snapshot.config))),
                NamingMode::Weak => checkpoint.clone(),
            };
            sections.push(Section {
                kind: loc.kind,
                mode,
                prefix,
                entries: Vec::new(),
            });
        }
        let sec = sections.last_mut().expect("section pushed above");
        let addressing = match mode {
            NamingMode::Strong => {
                let obj = ContentObject::nameless(data.clone());
                let hash = compute_object_hash(&obj)?;
                objects.push((obj, hash));
                Addressing::Strong {
                    prefix: sec.prefix.clone(),
                    hash,
                }
            }
            NamingMode::Weak => Addressing::Weak {
                name: checkpoint.join(&loc.relative_name(&snapshot.config)),
            },
        };
        sec.entries.push(ManifestEntry {
            locator: *loc,
            addressing,
        });
    }
    Ok((sections, objects, payload_bytes))
}

/// Splits `manifest` into chunks no larger than the plan's limit and
/// returns the manifest with its final chunk count.
fn encode_manifest(
    mut manifest: Manifest,
    plan: &ManifestPlan,
) -> Result<(Manifest, Vec<ContentObject>, ContentObject), ManifestError> {
    let longest_name = chunk_name(&plan.base, plan.version, u32::MAX);
    let room = u16::MAX as usize - FIXED_HEADER_LEN - 2 * HEADER_LEN - name_tlv_len(&longest_name);
    let limit = plan.chunk_limit.min(MAX_PAYLOAD).min(room);

    // Each chunk is a list of (section, entry range) pieces.
    let mut layout: Vec<Vec<(usize, Range<usize>)>> = vec![Vec::new()];
    let mut used = CHUNK_INFO_LEN + meta_len(&manifest.vm_name);
    if used > limit {
        return Err(ManifestError::ChunkLimitTooSmall(plan.chunk_limit));
    }
    for (si, sec) in manifest.sections.iter().enumerate() {
        let header = section_header_len(sec);
        let mut open = false;
        for (ei, e) in sec.entries.iter().enumerate() {
            let rec = record_len(sec, e);
            let need = rec + if open { 0 } else { header };
            if used + need > limit {
                if CHUNK_INFO_LEN + header + rec > limit {
                    return Err(ManifestError::ChunkLimitTooSmall(plan.chunk_limit));
                }
                layout.push(Vec::new());
                used = CHUNK_INFO_LEN;
                open = false;
            }
            let chunk = layout.last_mut().expect("at least one chunk");
            if open {
                chunk.last_mut().expect("open piece").1.end = ei + 1;
                used += rec;
            } else {
                chunk.push((si, ei..ei + 1));
                used += header + rec;
                open = true;
            }
        }
    }

    let chunk_count =
        u32::try_from(layout.len()).map_err(|_| ManifestError::Corrupt("too many chunks"))?;
    manifest.chunk_count = chunk_count;
    let mut chunks = Vec::with_capacity(layout.len());
    for (k, pieces) in layout.iter().enumerate() {
        let mut w = TlvWriter::with_capacity(limit);
        let mut info = [0u8; 12];
        info[..8].copy_from_slice(&manifest.version.to_be_bytes());
        info[8..].copy_from_slice(&(k as u32).to_be_bytes());
        w.put(T_CHUNK, &info).map_err(WireError::from)?;
        if k == 0 {
            let m = w.open(T_META);
            w.raw(&[manifest.phase.code()]);
            w.raw(&chunk_count.to_be_bytes());
            write_name(&mut w, &manifest.vm_name).map_err(WireError::from)?;
            w.close(m).map_err(WireError::from)?;
        }
        for (si, range) in pieces {
            write_section_piece(&mut w, &manifest.sections[*si], range.clone())?;
        }
        let payload = w.into_inner();
        debug_assert!(payload.len() <= limit);
        chunks.push(ContentObject::named(
            chunk_name(&plan.base, plan.version, k as u32),
            payload,
        ));
    }
    let root_alias = ContentObject::named(
        manifest_name(&plan.base, plan.version),
        chunks[0].payload.clone(),
    );
    Ok((manifest, chunks, root_alias))
}

fn write_section_piece(
    w: &mut TlvWriter,
    sec: &Section,
    range: Range<usize>,
) -> Result<(), ManifestError> {
    let e = |err| ManifestError::Wire(WireError::from(err));
    let m = w.open(T_SECTION);
    let (code, disk) = sec.kind.code();
    let d = disk.to_be_bytes();
    let mode = match sec.mode {
        NamingMode::Strong => 0u8,
        NamingMode::Weak => 1u8,
    };
    w.put(T_KIND, &[code, d[0], d[1], mode]).map_err(e)?;
    write_name(w, &sec.prefix).map_err(e)?;
    match sec.mode {
        NamingMode::Strong => {
            let h = w.open(T_HASHES);
            for entry in &sec.entries[range] {
                w.raw(&entry.locator.index.to_be_bytes());
                w.raw(entry.hash().expect("strong section").as_bytes());
            }
            w.close(h).map_err(e)?;
        }
        NamingMode::Weak => {
            for entry in &sec.entries[range] {
                let Addressing::Weak { name } = &entry.addressing else {
                    return Err(ManifestError::Corrupt("strong entry in weak section"));
                };
                let r = w.open(T_NAMED);
                w.raw(&entry.locator.index.to_be_bytes());
                write_name(w, name).map_err(e)?;
                w.close(r).map_err(e)?;
            }
        }
    }
    w.close(m).map_err(e)
}

struct ParsedChunk {
    version: u64,
    meta: Option<(Phase, u32, Name)>,
    sections: Vec<Section>,
}

const CORRUPT_SECTION: ManifestError = ManifestError::Corrupt("malformed section");

fn parse_chunk(payload: &[u8]) -> Result<(u32, ParsedChunk), ManifestError> {
    let corrupt = |_| CORRUPT_SECTION;
    let mut r = TlvReader::new(payload);
    let (t, info) = r
        .read()
        .map_err(corrupt)?
        .ok_or(ManifestError::Corrupt("empty chunk"))?;
    if t != T_CHUNK || info.len() != 12 {
        return Err(ManifestError::Corrupt("missing chunk header"));
    }
    let mut c = Cursor::new(info);
    let version = c.u64().ok_or(CORRUPT_SECTION)?;
    let index = c.u32().ok_or(CORRUPT_SECTION)?;
    let mut chunk = ParsedChunk {
        version,
        meta: None,
        sections: Vec::new(),
    };
    let mut first = true;
    while let Some((t, v)) = r.read().map_err(corrupt)? {
        match t {
            T_META if first && index == 0 => {
                let mut c = Cursor::new(v);
                let phase = c
                    .u8()
                    .and_then(Phase::from_code)
                    .ok_or(ManifestError::Corrupt("bad phase"))?;
                let count = c.u32().ok_or(CORRUPT_SECTION)?;
                let mut nr = TlvReader::new(c.take(v.len() - 5).ok_or(CORRUPT_SECTION)?);
                let (nt, nv) = nr.read().map_err(corrupt)?.ok_or(CORRUPT_SECTION)?;
                if nt != T_NAME || !nr.is_empty() {
                    return Err(CORRUPT_SECTION);
                }
                chunk.meta = Some((phase, count, read_name(nv).map_err(|_| CORRUPT_SECTION)?));
            }
            T_SECTION => chunk.sections.push(parse_section(v)?),
            _ => return Err(ManifestError::Corrupt("unexpected TLV in manifest chunk")),
        }
        first = false;
    }
    if index == 0 && chunk.meta.is_none() {
        return Err(ManifestError::Corrupt("root chunk without metadata"));
    }
    Ok((index, chunk))
}

fn parse_section(value: &[u8]) -> Result<Section, ManifestError> {
    let corrupt = |_| CORRUPT_SECTION;
    let mut r = TlvReader::new(value);
    let (t, kind) = r.read().map_err(corrupt)?.ok_or(CORRUPT_SECTION)?;
    if t != T_KIND || kind.len() != 4 {
        return Err(CORRUPT_SECTION);
    }
    let kind_code = ResourceKind::from_code(kind[0], u16::from_be_bytes([kind[1], kind[2]]))
        .ok_or(CORRUPT_SECTION)?;
    let mode = match kind[3] {
        0 => NamingMode::Strong,
        1 => NamingMode::Weak,
        _ => return Err(CORRUPT_SECTION),
    };
    let (t, prefix) = r.read().map_err(corrupt)?.ok_or(CORRUPT_SECTION)?;
    if t != T_NAME {
        return Err(CORRUPT_SECTION);
    }
    let prefix = read_name(prefix).map_err(|_| CORRUPT_SECTION)?;
    let mut entries = Vec::new();
    match mode {
        NamingMode::Strong => {
            let (t, recs) = r.read().map_err(corrupt)?.ok_or(CORRUPT_SECTION)?;
            if t != T_HASHES || recs.len() % STRONG_RECORD != 0 || !r.is_empty() {
                return Err(CORRUPT_SECTION);
            }
            for rec in recs.chunks_exact(STRONG_RECORD) {
                let mut idx = [0u8; 8];
                idx.copy_from_slice(&rec[..8]);
                let mut h = [0u8; 32];
                h.copy_from_slice(&rec[8..]);
                entries.push(ManifestEntry {
                    locator: Locator::new(kind_code, u64::from_be_bytes(idx)),
                    addressing: Addressing::Strong {
                        prefix: prefix.clone(),
                        hash: Hash256(h),
                    },
                });
            }
        }
        NamingMode::Weak => {
            while let Some((t, v)) = r.read().map_err(corrupt)? {
                if t != T_NAMED {
                    return Err(CORRUPT_SECTION);
                }
                let mut c = Cursor::new(v);
                let index = c.u64().ok_or(CORRUPT_SECTION)?;
                let mut nr = TlvReader::new(c.take(v.len() - 8).ok_or(CORRUPT_SECTION)?);
                let (nt, nv) = nr.read().map_err(corrupt)?.ok_or(CORRUPT_SECTION)?;
                if nt != T_NAME || !nr.is_empty() {
                    return Err(CORRUPT_SECTION);
                }
                entries.push(ManifestEntry {
                    locator: Locator::new(kind_code, index),
                    addressing: Addressing::Weak {
                        name: read_name(nv).map_err(|_| CORRUPT_SECTION)?,
                    },
                });
            }
        }
    }
    if entries.is_empty() {
        return Err(ManifestError::Corrupt("empty section"));
    }
    Ok(Section {
        kind: kind_code,
        mode,
        prefix,
        entries,
    })
}

/// Reassembles a manifest from its chunks, given in any order. The root
/// alias may be passed alongside chunk 0.
pub fn parse_manifest(chunks: &[ContentObject]) -> Result<Manifest, ManifestError> {
    let mut parsed: BTreeMap<u32, (ParsedChunk, &[u8])> = BTreeMap::new();
    for obj in chunks {
        let (index, chunk) = parse_chunk(&obj.payload)?;
        if let Some((_, prev)) = parsed.get(&index) {
            if *prev != &obj.payload[..] {
                return Err(ManifestError::Corrupt("conflicting copies of a chunk"));
            }
            continue;
        }
        parsed.insert(index, (chunk, &obj.payload[..]));
    }
    let Some((root, _)) = parsed.get(&0) else {
        return Err(ManifestError::Incomplete(Vec::from([0])));
    };
    let (phase, count, vm_name) = root.meta.clone().expect("root has metadata");
    let version = root.version;
    if parsed.keys().any(|k| *k >= count) {
        return Err(ManifestError::Corrupt("chunk index beyond chunk count"));
    }
    if parsed.values().any(|(c, _)| c.version != version) {
        return Err(ManifestError::Corrupt("chunks from different versions"));
    }
    let missing: Vec<u32> = (0..count).filter(|k| !parsed.contains_key(k)).collect();
    if !missing.is_empty() {
        return Err(ManifestError::Incomplete(missing));
    }
    let mut sections: Vec<Section> = Vec::new();
    for (chunk, _) in parsed.into_values() {
        for sec in chunk.sections {
            match sections.last_mut() {
                Some(last)
                    if last.kind == sec.kind
                        && last.mode == sec.mode
                        && last.prefix == sec.prefix =>
                {
                    last.entries.extend(sec.entries);
                }
                _ => sections.push(sec),
            }
        }
    }
    let mut seen = BTreeSet::new();
    for sec in &sections {
        if !sec
            .entries
            .windows(2)
            .all(|w| w[0].locator.index < w[1].locator.index)
        {
            return Err(ManifestError::Corrupt(
                "section entries not strictly sorted",
            ));
        }
        for e in &sec.entries {
            if !seen.insert(e.locator) {
                return Err(ManifestError::Corrupt("duplicate entry"));
            }
        }
    }
    Ok(Manifest {
        vm_name,
        version,
        phase,
        sections,
        chunk_count: count,
    })
}

/// Reads the version, phase, and chunk count from a root chunk alone.
pub fn parse_root(obj: &ContentObject) -> Result<(u64, Phase, u32), ManifestError> {
    let (index, chunk) = parse_chunk(&obj.payload)?;
    match (index, chunk.meta) {
        (0, Some((phase, count, _))) => Ok((chunk.version, phase, count)),
        _ => Err(ManifestError::Corrupt("not a root chunk")),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    #[error("integrity error at {locator}: expected hash {expected}, object hashes to {got}")]
    Integrity {
        locator: Locator,
        expected: Hash256,
        got: Hash256,
    },
    #[error("object name does not match weak entry {0}")]
    NameMismatch(Locator),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub locator: Locator,
    pub bytes: usize,
}

/// Writes `obj`'s payload into the destination at the entry's locator.
/// Strong entries are self-verifying: the object must hash to the entry hash.
pub fn apply_entry(
    dest: &mut VmImage,
    entry: &ManifestEntry,
    obj: &ContentObject,
) -> Result<Placement, ApplyError> {
    let hash = match entry.addressing {
        Addressing::Strong { .. } => Some(compute_object_hash(obj)?),
        Addressing::Weak { .. } => None,
    };
    apply_entry_hashed(dest, entry, obj, hash)
}

/// [`apply_entry`] with the object's hash already computed by the caller.
pub fn apply_entry_hashed(
    dest: &mut VmImage,
    entry: &ManifestEntry,
    obj: &ContentObject,
    obj_hash: Option<Hash256>,
) -> Result<Placement, ApplyError> {
    match &entry.addressing {
        Addressing::Strong { hash, .. } => {
            let got = match obj_hash {
                Some(h) => h,
                None => compute_object_hash(obj)?,
            };
            if got != *hash {
                return Err(ApplyError::Integrity {
                    locator: entry.locator,
                    expected: *hash,
                    got,
                });
            }
        }
        Addressing::Weak { name } => {
            if obj.name.as_ref() != Some(name) {
                return Err(ApplyError::NameMismatch(entry.locator));
            }
        }
    }
    dest.install(entry.locator, obj.payload.clone())?;
    Ok(Placement {
        locator: entry.locator,
        bytes: obj.payload.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamingScheme {
    /// Nameless objects referenced by hash from a manifest.
    HashNamed,
    /// `.../ver=j/chunk=k` objects carrying a placement metadata field.
    MetadataField,
    /// `.../ver=j/chunk=k` link objects prepended to the fully named object.
    Link,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamingCost {
    pub scheme: NamingScheme,
    pub resources: u64,
    /// Objects that must cross the network.
    pub objects: u64,
    pub payload_bytes: u64,
    pub object_bytes: u64,
    pub manifest_bytes: u64,
    pub total_bytes: u64,
    /// `total_bytes - payload_bytes`; negative when dedup saves more than
    /// the naming costs.
    pub overhead_bytes: i64,
}

/// Bytes needed to transfer `selection` under each naming scheme.
pub fn compare_naming(
    snapshot: &Snapshot,
    selection: &BTreeSet<Locator>,
    base: &Name,
) -> Result<Vec<NamingCost>, ManifestError> {
    let version = snapshot.version;
    let plan = ManifestPlan::new(base.clone(), version, Phase::Push);
    let mut store = ContentStore::new();
    let owner = CheckpointId::new(snapshot.config.vm_name.clone(), version);
    let built = build_manifest(snapshot, selection, &plan, &mut store, &owner)?;
    let mut unique = BTreeMap::new();
    for e in built.manifest.entries() {
        let h = e.hash().expect("strong plan");
        let size = store.get_by_hash(h).expect("stored").encoded_len() as u64;
        unique.insert(*h, size);
    }
    let payload = built.payload_bytes;
    let hash_objects = unique.values().sum::<u64>();
    let manifest_bytes = built.manifest_bytes();
    let mut out = Vec::from([NamingCost {
        scheme: NamingScheme::HashNamed,
        resources: selection.len() as u64,
        objects: unique.len() as u64,
        payload_bytes: payload,
        object_bytes: hash_objects,
        manifest_bytes,
        total_bytes: hash_objects + manifest_bytes,
        overhead_bytes: (hash_objects + manifest_bytes) as i64 - payload as i64,
    }]);

    let checkpoint = checkpoint_name(base, version);
    let mut meta_total = 0u64;
    let mut link_total = 0u64;
    for (k, loc) in selection.iter().enumerate() {
        let len = snapshot.read(loc).map(|d| d.len()).unwrap_or(0);
        let chunk = checkpoint.child(format!("chunk={k}"));
        let chunk_overhead = ContentObject::named(chunk.clone(), Vec::new()).encoded_len();
        // placement field: kind u8, disk u16, index u64
        let placement = HEADER_LEN + 11;
        meta_total += (chunk_overhead + placement + len) as u64;
        let target = checkpoint.join(&loc.relative_name(&snapshot.config));
        let full = ContentObject::named(target.clone(), Vec::new()).encoded_len() + len;
        let link = HEADER_LEN + name_tlv_len(&target);
        link_total += (chunk_overhead + link + full) as u64;
    }
    for (scheme, total) in [
        (NamingScheme::MetadataField, meta_total),
        (NamingScheme::Link, link_total),
    ] {
        out.push(NamingCost {
            scheme,
            resources: selection.len() as u64,
            objects: selection.len() as u64,
            payload_bytes: payload,
            object_bytes: total,
            manifest_bytes: 0,
            total_bytes: total,
            overhead_bytes: total as i64 - payload as i64,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::{build_vm, DiskConfig, VmConfig};

    fn config() -> VmConfig {
        VmConfig {
            vm_name: Name::parse("/vm-name").unwrap(),
            cpu_n: 2,
            ram_bytes: 64 * 4096,
            page_size: 4096,
            disks: vec![DiskConfig {
                disk_name: "hda".into(),
                capacity_bytes: 256 * 512,
                block_size: 512,
                fill_ratio: 0.5,
                read_only: false,
                content_seed: None,
            }],
            net_interfaces: vec!["en0".into()],
            regfile_size: 512,
            tlb_size: 4096,
            vhd_struct_size: 512,
            net_state_size: 256,
        }
    }

    fn owner(v: u64) -> CheckpointId {
        CheckpointId::new(Name::parse("/vm-name").unwrap(), v)
    }

    fn base() -> Name {
        Name::parse("/vm-name").unwrap()
    }

    #[test]
    fn duplicate_pages_store_once() {
        let c = config();
        let mut img = build_vm(&c, 1).unwrap();
        let p0 = img.read(&Locator::page(0)).unwrap().clone();
        img.apply_write(Locator::page(2), p0).unwrap();
        let snap = img.snapshot(0).unwrap();
        let sel: BTreeSet<_> = (0..3).map(Locator::page).collect();
        let oracle: BTreeSet<Vec<u8>> =
            sel.iter().map(|l| snap.read(l).unwrap().to_vec()).collect();
        let mut store = ContentStore::new();
        let built = build_manifest(
            &snap,
            &sel,
            &ManifestPlan::new(base(), 0, Phase::Push),
            &mut store,
            &owner(0),
        )
        .unwrap();
        assert_eq!(built.manifest.entry_count(), 3);
        let hashes: BTreeSet<_> = built
            .manifest
            .entries()
            .map(|e| *e.hash().unwrap())
            .collect();
        assert_eq!(hashes.len(), oracle.len());
        assert_eq!(hashes.len(), 2);
        // two data objects plus chunk 0 and its alias
        assert_eq!(store.len(), 4);
    }

    #[test]
    fn empty_pull_manifest() {
        let c = config();
        let mut img = build_vm(&c, 1).unwrap();
        let snap = img.snapshot(4).unwrap();
        let mut store = ContentStore::new();
        let built = build_manifest(
            &snap,
            &BTreeSet::new(),
            &ManifestPlan::new(base(), 4, Phase::Pull),
            &mut store,
            &owner(4),
        )
        .unwrap();
        assert_eq!(built.manifest.entry_count(), 0);
        assert_eq!(built.chunks.len(), 1);
        let parsed = parse_manifest(&built.chunks).unwrap();
        assert_eq!(parsed.phase, Phase::Pull);
        assert_eq!(parsed, built.manifest);
    }

    #[test]
    fn stop_and_copy_carries_cpu_state() {
        let c = config();
        let mut img = build_vm(&c, 1).unwrap();
        let snap = img.snapshot(2).unwrap();
        let sel: BTreeSet<_> = (0..2)
            .flat_map(|i| {
                [
                    Locator::new(ResourceKind::CpuRegfile, i),
                    Locator::new(ResourceKind::CpuTlb, i),
                ]
            })
            .collect();
        let mut store = ContentStore::new();
        let built = build_manifest(
            &snap,
            &sel,
            &ManifestPlan::new(base(), 2, Phase::StopAndCopy),
            &mut store,
            &owner(2),
        )
        .unwrap();
        let parsed = parse_manifest(&built.chunks).unwrap();
        assert_eq!(parsed.phase, Phase::StopAndCopy);
        assert!(parsed
            .entries()
            .any(|e| e.locator.kind == ResourceKind::CpuRegfile));
        assert_eq!(
            built.chunks[0].name.as_ref().unwrap().to_string(),
            "/vm-name/checkpoint/ver=2/manifest/chunk=0"
        );
        assert_eq!(
            built.root_alias.name.as_ref().unwrap().to_string(),
            "/vm-name/checkpoint/ver=2/manifest"
        );
    }

    fn built_with(limit: usize, weak: bool) -> BuiltCheckpoint {
        let c = config();
        let mut img = build_vm(&c, 9).unwrap();
        let snap = img.snapshot(1).unwrap();
        let sel: BTreeSet<_> = snap.data.locators().into_iter().collect();
        let mut plan = ManifestPlan::new(base(), 1, Phase::Push);
        plan.chunk_limit = limit;
        if weak {
            plan.modes.insert(ResourceKind::RamPage, NamingMode::Weak);
        }
        build_manifest(&snap, &sel, &plan, &mut ContentStore::new(), &owner(1)).unwrap()
    }

    #[test]
    fn chunking_is_neutral_and_order_free() {
        for weak in [false, true] {
            let small = built_with(1024, weak);
            let large = built_with(DEFAULT_CHUNK_LIMIT, weak);
            assert!(small.chunks.len() > 1);
            assert_eq!(large.chunks.len(), 1);
            let mut reversed = small.chunks.clone();
            reversed.reverse();
            let a = parse_manifest(&reversed).unwrap();
            let b = parse_manifest(&large.chunks).unwrap();
            assert!(a.same_content(&b));
            assert_eq!(a, small.manifest);
            assert!(small.chunks.iter().all(|c| c.payload.len() <= 1024));
        }
    }

    #[test]
    fn missing_chunk_is_incomplete() {
        let built = built_with(1024, false);
        let mut chunks = built.chunks.clone();
        chunks.remove(1);
        assert_eq!(
            parse_manifest(&chunks),
            Err(ManifestError::Incomplete(vec![1]))
        );
        assert!(matches!(
            parse_manifest(&built.chunks[1..]),
            Err(ManifestError::Incomplete(_))
        ));
    }

    #[test]
    fn flipped_section_header_is_corrupt() {
        let built = built_with(DEFAULT_CHUNK_LIMIT, false);
        let mut payload = built.chunks[0].payload.to_vec();
        // First section's kind byte: after chunk info, meta, section and kind TLV headers.
        let meta = meta_len(&built.manifest.vm_name);
        let at = CHUNK_INFO_LEN + meta + HEADER_LEN + HEADER_LEN;
        payload[at] = 0xFF;
        let bad = ContentObject::named(built.chunks[0].name.clone().unwrap(), payload);
        assert!(matches!(
            parse_manifest(&[bad]),
            Err(ManifestError::Corrupt(_))
        ));
    }

    #[test]
    fn tiny_chunk_limit_is_rejected() {
        let c = config();
        let mut img = build_vm(&c, 9).unwrap();
        let snap = img.snapshot(1).unwrap();
        let mut plan = ManifestPlan::new(base(), 1, Phase::Push);
        plan.chunk_limit = 40;
        let sel = [Locator::page(0)].into();
        assert!(matches!(
            build_manifest(&snap, &sel, &plan, &mut ContentStore::new(), &owner(1)),
            Err(ManifestError::ChunkLimitTooSmall(40))
        ));
    }

    #[test]
    fn apply_entries() {
        let c = config();
        let mut src = build_vm(&c, 2).unwrap();
        let snap = src.snapshot(0).unwrap();
        let mut store = ContentStore::new();
        let sel = [Locator::page(3), Locator::block(0, 4)].into();
        let built = build_manifest(
            &snap,
            &sel,
            &ManifestPlan::new(base(), 0, Phase::Push),
            &mut store,
            &owner(0),
        )
        .unwrap();
        let mut dest = VmImage::blank(&c);
        for e in built.manifest.entries() {
            let obj = store.get(&entry_fetch_address(e)).unwrap().clone();
            apply_entry(&mut dest, e, &obj).unwrap();
            assert_eq!(dest.read(&e.locator), snap.read(&e.locator));
        }
        assert!(dest.dirty().is_empty());

        let page = built
            .manifest
            .entries()
            .find(|e| e.locator == Locator::page(3))
            .unwrap();
        let wrong = ContentObject::nameless(vec![0u8; 4096]);
        assert!(matches!(
            apply_entry(&mut dest, page, &wrong),
            Err(ApplyError::Integrity { .. })
        ));

        let beyond = ContentObject::nameless(vec![1u8; 512]);
        let entry = ManifestEntry {
            locator: Locator::block(0, 10_000),
            addressing: Addressing::Strong {
                prefix: base(),
                hash: compute_object_hash(&beyond).unwrap(),
            },
        };
        assert!(matches!(
            apply_entry(&mut dest, &entry, &beyond),
            Err(ApplyError::Image(ImageError::NoSuchResource(_)))
        ));
    }

    #[test]
    fn missing_selection_is_an_error() {
        let c = config();
        let mut img = build_vm(&c, 9).unwrap();
        let snap = img.snapshot(0).unwrap();
        let sel = [Locator::page(9999)].into();
        assert_eq!(
            build_manifest(
                &snap,
                &sel,
                &ManifestPlan::new(base(), 0, Phase::Push),
                &mut ContentStore::new(),
                &owner(0)
            )
            .unwrap_err(),
            ManifestError::MissingResource(Locator::page(9999))
        );
    }

    #[test]
    fn fetch_addresses() {
        let h = Hash256([1; 32]);
        let strong = ManifestEntry {
            locator: Locator::page(3),
            addressing: Addressing::Strong {
                prefix: Name::parse("/vm-name/checkpoint/ver=2/ram").unwrap(),
                hash: h,
            },
        };
        let a = entry_fetch_address(&strong);
        assert_eq!(a.hash_restr, Some(h));
        assert_eq!(a.name.unwrap().to_string(), "/vm-name/checkpoint/ver=2/ram");

        let c = config();
        let weak = ManifestEntry {
            locator: Locator::page(3),
            addressing: Addressing::Weak {
                name: checkpoint_name(&base(), 2).join(&Locator::page(3).relative_name(&c)),
            },
        };
        let a = entry_fetch_address(&weak);
        assert_eq!(a.hash_restr, None);
        assert_eq!(
            a.name.unwrap().to_string(),
            "/vm-name/checkpoint/ver=2/ram/page/3"
        );

        let host = ManifestEntry {
            locator: Locator::block(0, 1),
            addressing: Addressing::Strong {
                prefix: Name::parse("/nyc/host7").unwrap(),
                hash: h,
            },
        };
        assert_eq!(
            entry_fetch_address(&host).name.unwrap().to_string(),
            "/nyc/host7"
        );
    }

    #[test]
    fn weak_sections_mix_with_strong() {
        let built = built_with(DEFAULT_CHUNK_LIMIT, true);
        let kinds: Vec<_> = built
            .manifest
            .sections
            .iter()
            .map(|s| (s.kind, s.mode))
            .collect();
        assert!(kinds.contains(&(ResourceKind::RamPage, NamingMode::Weak)));
        assert!(kinds.contains(&(ResourceKind::DiskBlock { disk: 0 }, NamingMode::Strong)));
    }

    #[test]
    fn naming_comparison_orders_schemes() {
        let c = config();
        let mut img = build_vm(&c, 4).unwrap();
        let snap = img.snapshot(0).unwrap();
        let sel: BTreeSet<_> = (0..64).map(Locator::page).collect();
        let costs = compare_naming(&snap, &sel, &base()).unwrap();
        assert_eq!(costs.len(), 3);
        let hash = &costs[0];
        assert_eq!(hash.object_bytes, 64 * (4096 + 16));
        assert!(costs[1].total_bytes > hash.object_bytes);
        assert!(costs[2].total_bytes > costs[1].total_bytes);
    }
}
