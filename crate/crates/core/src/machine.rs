//! The virtual machine being migrated.
//!
//! A VM is a config object, per-CPU register file and TLB, fixed-size RAM
//! pages, vhd-style disks (header, block allocation table, footer, and
//! populated data blocks), and network interface state. Each resource maps
//! to one Content Object under the naming hierarchy
//!
//! ```text
//! /vm-name/config
//! /vm-name/cpu/<i>/regfile
//! /vm-name/cpu/<i>/tlb
//! /vm-name/ram/page/<p>
//! /vm-name/disk/<d>/config
//! /vm-name/disk/<d>/vhd/{header,bat,footer}
//! /vm-name/disk/<d>/block/<b>
//! /vm-name/net/<if>
//! ```
//!
//! Disk capacity is in decimal bytes (2 GB = 2×10⁹) and RAM in binary bytes
//! (2 GiB = 2³¹); that pairing is what makes a 2 GB disk at 25% fill with
//! 512-byte blocks come to 976,563 blocks while 2 GiB of 4 KiB pages is
//! 524,288 pages.
//!
//! Resource bytes are `Arc<[u8]>`, so a [`Snapshot`] shares storage with the
//! live image and a later write only replaces the live pointer.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::name::{Name, Segment};
use crate::tlv::{Cursor, TlvReader, TlvWriter};
use crate::wire::{read_name, write_name, MAX_PAYLOAD};

pub const DEFAULT_REGFILE_SIZE: u32 = 512;
pub const DEFAULT_TLB_SIZE: u32 = 4096;
pub const DEFAULT_VHD_STRUCT_SIZE: u32 = 512;
pub const DEFAULT_NET_STATE_SIZE: u32 = 256;

pub const VHD_HEADER: u64 = 0;
pub const VHD_BAT: u64 = 1;
pub const VHD_FOOTER: u64 = 2;
const VHD_TAGS: [&str; 3] = ["header", "bat", "footer"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cpu_n must be at least 1")]
    NoCpus,
    #[error("{0} must be non-zero")]
    ZeroSize(&'static str),
    #[error("ram_bytes {ram} is not a multiple of page_size {page}")]
    RamNotPageMultiple { ram: u64, page: u32 },
    #[error("disk {0}: fill_ratio must lie in [0, 1]")]
    FillRatio(String),
    #[error("duplicate disk name {0}")]
    DuplicateDisk(String),
    #[error("duplicate network interface {0}")]
    DuplicateInterface(String),
    #[error("{0} of {1} bytes does not fit in one Content Object")]
    TooLarge(&'static str, u64),
    #[error("duplicate-block fraction must lie in [0, 1]")]
    DupFraction,
    #[error("invalid name component {0:?}")]
    BadComponent(String),
    #[error("malformed configuration object")]
    Malformed,
}

fn default_regfile() -> u32 {
    DEFAULT_REGFILE_SIZE
}
fn default_tlb() -> u32 {
    DEFAULT_TLB_SIZE
}
fn default_vhd() -> u32 {
    DEFAULT_VHD_STRUCT_SIZE
}
fn default_net() -> u32 {
    DEFAULT_NET_STATE_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiskConfig {
    pub disk_name: String,
    pub capacity_bytes: u64,
    pub block_size: u32,
    pub fill_ratio: f64,
    /// Read-only disks are never written by the workload.
    #[serde(default)]
    pub read_only: bool,
    /// Seed for the disk's content; disks sharing a content seed and
    /// geometry are byte-identical across VMs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_seed: Option<u64>,
}

impl DiskConfig {
    pub fn capacity_blocks(&self) -> u64 {
        self.capacity_bytes.div_ceil(self.block_size as u64)
    }

    /// `ceil(fill_ratio × capacity_bytes / block_size)`.
    pub fn populated_blocks(&self) -> u64 {
        let exact = self.fill_ratio * self.capacity_bytes as f64 / self.block_size as f64;
        let n = ceil_tolerant(exact);
        n.min(self.capacity_blocks())
    }

    /// Block number of the `k`-th populated block, spread evenly over the disk.
    pub fn populated_block_index(&self, k: u64) -> u64 {
        let n = self.populated_blocks().max(1) as u128;
        (k as u128 * self.capacity_blocks() as u128 / n) as u64
    }

    pub fn populated_block_indices(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.populated_blocks()).map(|k| self.populated_block_index(k))
    }
}

/// Ceiling that forgives floating-point noise just above an integer.
fn ceil_tolerant(x: f64) -> u64 {
    if x <= 0.0 {
        return 0;
    }
    let nearest = (x + 0.5) as u64;
    let tol = 1e-9 * if x > 1.0 { x } else { 1.0 };
    if (x - nearest as f64).abs() <= tol {
        return nearest;
    }
    let floor = x as u64;
    if (floor as f64) < x {
        floor + 1
    } else {
        floor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmConfig {
    pub vm_name: Name,
    pub cpu_n: u32,
    pub ram_bytes: u64,
    pub page_size: u32,
    pub disks: Vec<DiskConfig>,
    pub net_interfaces: Vec<String>,
    #[serde(default = "default_regfile")]
    pub regfile_size: u32,
    #[serde(default = "default_tlb")]
    pub tlb_size: u32,
    #[serde(default = "default_vhd")]
    pub vhd_struct_size: u32,
    #[serde(default = "default_net")]
    pub net_state_size: u32,
}

impl VmConfig {
    pub fn ram_pages(&self) -> u64 {
        self.ram_bytes / self.page_size as u64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.cpu_n == 0 {
            return Err(ConfigError::NoCpus);
        }
        if self.page_size == 0 {
            return Err(ConfigError::ZeroSize("page_size"));
        }
        if !self.ram_bytes.is_multiple_of(self.page_size as u64) {
            return Err(ConfigError::RamNotPageMultiple {
                ram: self.ram_bytes,
                page: self.page_size,
            });
        }
        let mut seen = BTreeSet::new();
        for d in &self.disks {
            check_component(&d.disk_name)?;
            if d.block_size == 0 {
                return Err(ConfigError::ZeroSize("block_size"));
            }
            if !(0.0..=1.0).contains(&d.fill_ratio) {
                return Err(ConfigError::FillRatio(d.disk_name.clone()));
            }
            if !seen.insert(d.disk_name.as_str()) {
                return Err(ConfigError::DuplicateDisk(d.disk_name.clone()));
            }
        }
        if self.disks.len() > u16::MAX as usize {
            return Err(ConfigError::TooLarge("disk list", self.disks.len() as u64));
        }
        let mut seen = BTreeSet::new();
        for n in &self.net_interfaces {
            check_component(n)?;
            if !seen.insert(n.as_str()) {
                return Err(ConfigError::DuplicateInterface(n.clone()));
            }
        }
        Ok(())
    }

    /// Extra checks for configs that are materialized as Content Objects.
    pub fn validate_for_transfer(&self) -> Result<(), ConfigError> {
        self.validate()?;
        let mut sizes = vec![
            ("page_size", self.page_size as u64),
            ("regfile_size", self.regfile_size as u64),
            ("tlb_size", self.tlb_size as u64),
            ("vhd_struct_size", self.vhd_struct_size as u64),
            ("net_state_size", self.net_state_size as u64),
        ];
        sizes.extend(
            self.disks
                .iter()
                .map(|d| ("block_size", d.block_size as u64)),
        );
        for (what, size) in sizes {
            if size == 0 {
                return Err(ConfigError::ZeroSize(what));
            }
            if size > MAX_PAYLOAD as u64 {
                return Err(ConfigError::TooLarge(what, size));
            }
        }
        Ok(())
    }

    pub fn disk_index(&self, name: &str) -> Option<u16> {
        self.disks
            .iter()
            .position(|d| d.disk_name == name)
            .map(|i| i as u16)
    }
}

fn check_component(s: &str) -> Result<(), ConfigError> {
    if s.is_empty() || s.contains('/') {
        return Err(ConfigError::BadComponent(s.into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    /// Index 0 is the VM config; index `1 + d` is the config of disk `d`.
    Config,
    CpuRegfile,
    CpuTlb,
    RamPage,
    DiskBlock {
        disk: u16,
    },
    /// Index is [`VHD_HEADER`], [`VHD_BAT`] or [`VHD_FOOTER`].
    VhdStruct {
        disk: u16,
    },
    Net,
}

impl ResourceKind {
    pub fn label(&self) -> &'static str {
        match self {
            ResourceKind::Config => "config",
            ResourceKind::CpuRegfile => "cpu_regfile",
            ResourceKind::CpuTlb => "cpu_tlb",
            ResourceKind::RamPage => "ram_page",
            ResourceKind::DiskBlock { .. } => "disk_block",
            ResourceKind::VhdStruct { .. } => "vhd_struct",
            ResourceKind::Net => "net",
        }
    }

    pub(crate) fn code(&self) -> (u8, u16) {
        match *self {
            ResourceKind::Config => (0, 0),
            ResourceKind::CpuRegfile => (1, 0),
            ResourceKind::CpuTlb => (2, 0),
            ResourceKind::RamPage => (3, 0),
            ResourceKind::DiskBlock { disk } => (4, disk),
            ResourceKind::VhdStruct { disk } => (5, disk),
            ResourceKind::Net => (6, 0),
        }
    }

    pub(crate) fn from_code(code: u8, disk: u16) -> Option<Self> {
        Some(match (code, disk) {
            (0, 0) => ResourceKind::Config,
            (1, 0) => ResourceKind::CpuRegfile,
            (2, 0) => ResourceKind::CpuTlb,
            (3, 0) => ResourceKind::RamPage,
            (4, disk) => ResourceKind::DiskBlock { disk },
            (5, disk) => ResourceKind::VhdStruct { disk },
            (6, 0) => ResourceKind::Net,
            _ => return None,
        })
    }

    /// Path of the section holding this kind, relative to a checkpoint
    /// name, e.g. `ram` or `disk/hda`.
    pub fn section_path(&self, config: &VmConfig) -> Name {
        let mut n = Name::root();
        match self {
            ResourceKind::Config => n.push("config"),
            ResourceKind::CpuRegfile | ResourceKind::CpuTlb => n.push("cpu"),
            ResourceKind::RamPage => n.push("ram"),
            ResourceKind::DiskBlock { disk } | ResourceKind::VhdStruct { disk } => {
                n.push("disk");
                n.push(disk_label(config, *disk));
                if matches!(self, ResourceKind::VhdStruct { .. }) {
                    n.push("vhd");
                }
            }
            ResourceKind::Net => n.push("net"),
        }
        n
    }
}

fn disk_label(config: &VmConfig, disk: u16) -> String {
    config
        .disks
        .get(disk as usize)
        .map(|d| d.disk_name.clone())
        .unwrap_or_else(|| format!("disk{disk}"))
}

/// Identifies one resource: a kind plus a page, block, CPU, or structure index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Locator {
    pub kind: ResourceKind,
    pub index: u64,
}

impl Locator {
    pub const fn new(kind: ResourceKind, index: u64) -> Self {
        Locator { kind, index }
    }

    pub const fn config() -> Self {
        Locator::new(ResourceKind::Config, 0)
    }

    pub const fn page(p: u64) -> Self {
        Locator::new(ResourceKind::RamPage, p)
    }

    pub const fn block(disk: u16, b: u64) -> Self {
        Locator::new(ResourceKind::DiskBlock { disk }, b)
    }

    /// Name relative to the VM (or checkpoint) root, following the VM naming
    /// hierarchy.
    pub fn relative_name(&self, config: &VmConfig) -> Name {
        let mut n = Name::root();
        match self.kind {
            ResourceKind::Config if self.index == 0 => n.push("config"),
            ResourceKind::Config => {
                n.push("disk");
                n.push(disk_label(config, (self.index - 1) as u16));
                n.push("config");
            }
            ResourceKind::CpuRegfile | ResourceKind::CpuTlb => {
                n.push("cpu");
                n.push(format!("{}", self.index));
                n.push(if self.kind == ResourceKind::CpuTlb {
                    "tlb"
                } else {
                    "regfile"
                });
            }
            ResourceKind::RamPage => {
                n.push("ram");
                n.push("page");
                n.push(format!("{}", self.index));
            }
            ResourceKind::DiskBlock { disk } => {
                n.push("disk");
                n.push(disk_label(config, disk));
                n.push("block");
                n.push(format!("{}", self.index));
            }
            ResourceKind::VhdStruct { disk } => {
                n.push("disk");
                n.push(disk_label(config, disk));
                n.push("vhd");
                n.push(
                    VHD_TAGS
                        .get(self.index as usize)
                        .copied()
                        .unwrap_or("unknown"),
                );
            }
            ResourceKind::Net => {
                n.push("net");
                match config.net_interfaces.get(self.index as usize) {
                    Some(i) => n.push(i),
                    None => n.push(format!("if{}", self.index)),
                }
            }
        }
        n
    }

    /// Inverse of [`Locator::relative_name`].
    pub fn from_relative(config: &VmConfig, segs: &[Segment]) -> Option<Locator> {
        let s: Vec<&str> = segs.iter().map(|s| s.as_str()).collect::<Option<_>>()?;
        let num = |t: &str| -> Option<u64> {
            if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            t.parse().ok()
        };
        let loc = match s.as_slice() {
            ["config"] => Locator::config(),
            ["cpu", i, "regfile"] => Locator::new(ResourceKind::CpuRegfile, num(i)?),
            ["cpu", i, "tlb"] => Locator::new(ResourceKind::CpuTlb, num(i)?),
            ["ram", "page", p] => Locator::page(num(p)?),
            ["disk", d, "config"] => {
                Locator::new(ResourceKind::Config, 1 + config.disk_index(d)? as u64)
            }
            ["disk", d, "block", b] => Locator::block(config.disk_index(d)?, num(b)?),
            ["disk", d, "vhd", tag] => Locator::new(
                ResourceKind::VhdStruct {
                    disk: config.disk_index(d)?,
                },
                VHD_TAGS.iter().position(|t| t == tag)? as u64,
            ),
            ["net", i] => Locator::new(
                ResourceKind::Net,
                config.net_interfaces.iter().position(|n| n == i)? as u64,
            ),
            _ => return None,
        };
        Some(loc)
    }
}

impl fmt::Display for Locator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ResourceKind::DiskBlock { disk } | ResourceKind::VhdStruct { disk } => {
                write!(f, "{}[{}:{}]", self.kind.label(), disk, self.index)
            }
            _ => write!(f, "{}[{}]", self.kind.label(), self.index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiskObjectCount {
    pub disk_name: String,
    pub data_blocks: u64,
    pub control_structures: u64,
    pub config: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCount {
    pub disks: Vec<DiskObjectCount>,
    pub disk_total: u64,
    pub ram_pages: u64,
    pub cpu_objects: u64,
    pub config_objects: u64,
    pub net_objects: u64,
    pub total: u64,
}

/// Number of Content Objects needed to name every resource of `config`.
pub fn object_count(config: &VmConfig) -> ObjectCount {
    let disks: Vec<_> = config
        .disks
        .iter()
        .map(|d| {
            let data_blocks = d.populated_blocks();
            DiskObjectCount {
                disk_name: d.disk_name.clone(),
                data_blocks,
                control_structures: 3,
                config: 1,
                total: data_blocks + 4,
            }
        })
        .collect();
    let disk_total = disks.iter().map(|d| d.total).sum::<u64>();
    let ram_pages = config.ram_pages();
    let cpu_objects = 2 * config.cpu_n as u64;
    let net_objects = config.net_interfaces.len() as u64;
    ObjectCount {
        disks,
        disk_total,
        ram_pages,
        cpu_objects,
        config_objects: 1,
        net_objects,
        total: disk_total + ram_pages + cpu_objects + 1 + net_objects,
    }
}

/// Every resource locator of `config`, in canonical order.
pub fn enumerate_locators(config: &VmConfig) -> impl Iterator<Item = Locator> + '_ {
    let cpu = (0..config.cpu_n as u64).flat_map(|i| {
        [
            Locator::new(ResourceKind::CpuRegfile, i),
            Locator::new(ResourceKind::CpuTlb, i),
        ]
    });
    let ram = (0..config.ram_pages()).map(Locator::page);
    let disks = config.disks.iter().enumerate().flat_map(|(d, dc)| {
        let disk = d as u16;
        let control = [
            Locator::new(ResourceKind::Config, 1 + d as u64),
            Locator::new(ResourceKind::VhdStruct { disk }, VHD_HEADER),
            Locator::new(ResourceKind::VhdStruct { disk }, VHD_BAT),
            Locator::new(ResourceKind::VhdStruct { disk }, VHD_FOOTER),
        ];
        control.into_iter().chain(
            dc.populated_block_indices()
                .map(move |b| Locator::block(disk, b)),
        )
    });
    let net = (0..config.net_interfaces.len() as u64).map(|i| Locator::new(ResourceKind::Net, i));
    core::iter::once(Locator::config())
        .chain(cpu)
        .chain(ram)
        .chain(disks)
        .chain(net)
}

/// Full names of every resource, `vm_name` followed by the relative path.
pub fn enumerate_names(config: &VmConfig) -> impl Iterator<Item = Name> + '_ {
    enumerate_locators(config).map(|l| config.vm_name.join(&l.relative_name(config)))
}

const T_CFG_VM: u16 = 0x0020;
const T_CFG_FIELDS: u16 = 0x0021;
const T_CFG_DISK: u16 = 0x0022;
const T_CFG_TEXT: u16 = 0x0023;
const T_CFG_NET: u16 = 0x0024;

pub fn encode_disk_config(d: &DiskConfig) -> Vec<u8> {
    let mut w = TlvWriter::new();
    write_disk(&mut w, d);
    w.into_inner()
}

fn write_disk(w: &mut TlvWriter, d: &DiskConfig) {
    let m = w.open(T_CFG_DISK);
    w.put(T_CFG_TEXT, d.disk_name.as_bytes())
        .expect("short disk name");
    let mut f = Vec::with_capacity(30);
    f.extend_from_slice(&d.capacity_bytes.to_be_bytes());
    f.extend_from_slice(&d.block_size.to_be_bytes());
    f.extend_from_slice(&d.fill_ratio.to_bits().to_be_bytes());
    f.push(d.read_only as u8);
    f.push(d.content_seed.is_some() as u8);
    f.extend_from_slice(&d.content_seed.unwrap_or(0).to_be_bytes());
    w.put(T_CFG_FIELDS, &f).expect("fixed fields");
    w.close(m).expect("short disk config");
}

/// Canonical byte encoding carried in the `/vm-name/config` object.
pub fn encode_config(c: &VmConfig) -> Vec<u8> {
    let mut w = TlvWriter::new();
    let m = w.open(T_CFG_VM);
    write_name(&mut w, &c.vm_name).expect("vm name fits");
    let mut f = Vec::with_capacity(36);
    f.extend_from_slice(&c.cpu_n.to_be_bytes());
    f.extend_from_slice(&c.ram_bytes.to_be_bytes());
    f.extend_from_slice(&c.page_size.to_be_bytes());
    f.extend_from_slice(&c.regfile_size.to_be_bytes());
    f.extend_from_slice(&c.tlb_size.to_be_bytes());
    f.extend_from_slice(&c.vhd_struct_size.to_be_bytes());
    f.extend_from_slice(&c.net_state_size.to_be_bytes());
    w.put(T_CFG_FIELDS, &f).expect("fixed fields");
    for d in &c.disks {
        write_disk(&mut w, d);
    }
    for n in &c.net_interfaces {
        w.put(T_CFG_NET, n.as_bytes())
            .expect("short interface name");
    }
    w.close(m).expect("config fits in one object");
    w.into_inner()
}

fn decode_disk(value: &[u8]) -> Result<DiskConfig, ConfigError> {
    let mut r = TlvReader::new(value);
    let bad = |_| ConfigError::Malformed;
    let (t, name) = r.read().map_err(bad)?.ok_or(ConfigError::Malformed)?;
    let (t2, fields) = r.read().map_err(bad)?.ok_or(ConfigError::Malformed)?;
    if t != T_CFG_TEXT || t2 != T_CFG_FIELDS || !r.is_empty() {
        return Err(ConfigError::Malformed);
    }
    let mut c = Cursor::new(fields);
    let capacity_bytes = c.u64().ok_or(ConfigError::Malformed)?;
    let block_size = c.u32().ok_or(ConfigError::Malformed)?;
    let fill_ratio = f64::from_bits(c.u64().ok_or(ConfigError::Malformed)?);
    let read_only = c.u8().ok_or(ConfigError::Malformed)? != 0;
    let has_seed = c.u8().ok_or(ConfigError::Malformed)? != 0;
    let seed = c.u64().ok_or(ConfigError::Malformed)?;
    if !c.is_empty() {
        return Err(ConfigError::Malformed);
    }
    Ok(DiskConfig {
        disk_name: String::from_utf8(name.to_vec()).map_err(|_| ConfigError::Malformed)?,
        capacity_bytes,
        block_size,
        fill_ratio,
        read_only,
        content_seed: has_seed.then_some(seed),
    })
}

pub fn decode_config(bytes: &[u8]) -> Result<VmConfig, ConfigError> {
    let bad = |_| ConfigError::Malformed;
    let mut top = TlvReader::new(bytes);
    let (t, body) = top.read().map_err(bad)?.ok_or(ConfigError::Malformed)?;
    if t != T_CFG_VM || !top.is_empty() {
        return Err(ConfigError::Malformed);
    }
    let mut r = TlvReader::new(body);
    let (t, name) = r.read().map_err(bad)?.ok_or(ConfigError::Malformed)?;
    if t != crate::wire::T_NAME {
        return Err(ConfigError::Malformed);
    }
    let vm_name = read_name(name).map_err(|_| ConfigError::Malformed)?;
    let (t, fields) = r.read().map_err(bad)?.ok_or(ConfigError::Malformed)?;
    if t != T_CFG_FIELDS {
        return Err(ConfigError::Malformed);
    }
    let mut c = Cursor::new(fields);
    let mut u32f = || c.u32().ok_or(ConfigError::Malformed);
    let cpu_n = u32f()?;
    let ram_hi = u32f()? as u64;
    let ram_lo = u32f()? as u64;
    let page_size = u32f()?;
    let regfile_size = u32f()?;
    let tlb_size = u32f()?;
    let vhd_struct_size = u32f()?;
    let net_state_size = u32f()?;
    let mut disks = Vec::new();
    let mut net_interfaces = Vec::new();
    while let Some((t, v)) = r.read().map_err(bad)? {
        match t {
            T_CFG_DISK => disks.push(decode_disk(v)?),
            T_CFG_NET => net_interfaces
                .push(String::from_utf8(v.to_vec()).map_err(|_| ConfigError::Malformed)?),
            _ => return Err(ConfigError::Malformed),
        }
    }
    let cfg = VmConfig {
        vm_name,
        cpu_n,
        ram_bytes: (ram_hi << 32) | ram_lo,
        page_size,
        disks,
        net_interfaces,
        regfile_size,
        tlb_size,
        vhd_struct_size,
        net_state_size,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpuState {
    pub regfile: Arc<[u8]>,
    pub tlb: Arc<[u8]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiskData {
    pub config: Arc<[u8]>,
    /// Header, block allocation table, footer.
    pub vhd: [Arc<[u8]>; 3],
    pub blocks: BTreeMap<u64, Arc<[u8]>>,
}

/// Bytes of every resource of one VM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    pub config: Arc<[u8]>,
    pub cpus: Vec<CpuState>,
    pub ram: Vec<Arc<[u8]>>,
    pub disks: Vec<DiskData>,
    pub net: Vec<Arc<[u8]>>,
}

impl ImageData {
    pub fn read(&self, loc: &Locator) -> Option<&Arc<[u8]>> {
        let i = usize::try_from(loc.index).ok()?;
        match loc.kind {
            ResourceKind::Config if i == 0 => Some(&self.config),
            ResourceKind::Config => self.disks.get(i - 1).map(|d| &d.config),
            ResourceKind::CpuRegfile => self.cpus.get(i).map(|c| &c.regfile),
            ResourceKind::CpuTlb => self.cpus.get(i).map(|c| &c.tlb),
            ResourceKind::RamPage => self.ram.get(i),
            ResourceKind::DiskBlock { disk } => {
                self.disks.get(disk as usize)?.blocks.get(&loc.index)
            }
            ResourceKind::VhdStruct { disk } => self.disks.get(disk as usize)?.vhd.get(i),
            ResourceKind::Net => self.net.get(i),
        }
    }

    fn slot(&mut self, loc: &Locator) -> Option<&mut Arc<[u8]>> {
        let i = usize::try_from(loc.index).ok()?;
        match loc.kind {
            ResourceKind::Config if i == 0 => Some(&mut self.config),
            ResourceKind::Config => self.disks.get_mut(i - 1).map(|d| &mut d.config),
            ResourceKind::CpuRegfile => self.cpus.get_mut(i).map(|c| &mut c.regfile),
            ResourceKind::CpuTlb => self.cpus.get_mut(i).map(|c| &mut c.tlb),
            ResourceKind::RamPage => self.ram.get_mut(i),
            ResourceKind::DiskBlock { disk } => self
                .disks
                .get_mut(disk as usize)?
                .blocks
                .get_mut(&loc.index),
            ResourceKind::VhdStruct { disk } => self.disks.get_mut(disk as usize)?.vhd.get_mut(i),
            ResourceKind::Net => self.net.get_mut(i),
        }
    }

    /// Locators of every present resource, in canonical order.
    pub fn locators(&self) -> Vec<Locator> {
        let mut out = Vec::new();
        out.push(Locator::config());
        for i in 0..self.cpus.len() as u64 {
            out.push(Locator::new(ResourceKind::CpuRegfile, i));
            out.push(Locator::new(ResourceKind::CpuTlb, i));
        }
        out.extend((0..self.ram.len() as u64).map(Locator::page));
        for (d, disk) in self.disks.iter().enumerate() {
            let di = d as u16;
            out.push(Locator::new(ResourceKind::Config, 1 + d as u64));
            for t in 0..3 {
                out.push(Locator::new(ResourceKind::VhdStruct { disk: di }, t));
            }
            out.extend(disk.blocks.keys().map(|b| Locator::block(di, *b)));
        }
        out.extend((0..self.net.len() as u64).map(|i| Locator::new(ResourceKind::Net, i)));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("image is frozen")]
    Frozen,
    #[error("{locator}: expected {expected} bytes, got {got}")]
    SizeMismatch {
        locator: Locator,
        expected: usize,
        got: usize,
    },
    #[error("no such resource {0}")]
    NoSuchResource(Locator),
    #[error("snapshot version {got} is not greater than {last}")]
    VersionNotIncreasing { last: u64, got: u64 },
    #[error("no snapshot with version {0}")]
    UnknownVersion(u64),
}

/// Immutable copy-on-write view of an image at checkpoint version `version`.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub version: u64,
    pub config: VmConfig,
    pub data: ImageData,
}

impl Snapshot {
    pub fn read(&self, loc: &Locator) -> Option<&Arc<[u8]>> {
        self.data.read(loc)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Fraction of populated disk blocks whose bytes copy another block.
    pub dup_fraction: f64,
}

/// A live VM image with dirty tracking.
#[derive(Debug, Clone)]
pub struct VmImage {
    config: VmConfig,
    data: ImageData,
    frozen: bool,
    generation: u64,
    last_write: BTreeMap<Locator, u64>,
    snapshots: BTreeMap<u64, u64>,
    dirty: BTreeSet<Locator>,
}

fn random_bytes(rng: &mut impl RngCore, n: usize) -> Arc<[u8]> {
    let mut v = vec![0u8; n];
    rng.fill_bytes(&mut v);
    v.into()
}

fn padded(mut bytes: Vec<u8>, size: usize) -> Arc<[u8]> {
    bytes.resize(size, 0);
    bytes.into()
}

fn synth_vhd(d: &DiskConfig, size: usize) -> [Arc<[u8]>; 3] {
    let mut header = b"cxsparse".to_vec();
    header.extend_from_slice(&d.capacity_bytes.to_be_bytes());
    header.extend_from_slice(&d.block_size.to_be_bytes());
    header.extend_from_slice(&d.populated_blocks().to_be_bytes());
    let mut bat = Vec::new();
    for b in d.populated_block_indices() {
        if bat.len() + 4 > size {
            break;
        }
        bat.extend_from_slice(&(b as u32).to_be_bytes());
    }
    let mut footer = b"conectix".to_vec();
    footer.extend_from_slice(&d.capacity_bytes.to_be_bytes());
    [
        padded(header, size),
        padded(bat, size),
        padded(footer, size),
    ]
}

fn zeroed(n: usize) -> Arc<[u8]> {
    vec![0u8; n].into()
}

/// Deterministic VM image from `(config, seed)`.
pub fn build_vm(config: &VmConfig, seed: u64) -> Result<VmImage, ConfigError> {
    build_vm_with(config, seed, &BuildOptions::default())
}

pub fn build_vm_with(
    config: &VmConfig,
    seed: u64,
    opts: &BuildOptions,
) -> Result<VmImage, ConfigError> {
    config.validate_for_transfer()?;
    if !(0.0..=1.0).contains(&opts.dup_fraction) {
        return Err(ConfigError::DupFraction);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cpus = (0..config.cpu_n)
        .map(|_| CpuState {
            regfile: random_bytes(&mut rng, config.regfile_size as usize),
            tlb: random_bytes(&mut rng, config.tlb_size as usize),
        })
        .collect();
    let ram = (0..config.ram_pages())
        .map(|_| random_bytes(&mut rng, config.page_size as usize))
        .collect();
    let net = config
        .net_interfaces
        .iter()
        .map(|_| random_bytes(&mut rng, config.net_state_size as usize))
        .collect();
    let disks = config
        .disks
        .iter()
        .enumerate()
        .map(|(i, d)| build_disk(config, d, i, seed, opts.dup_fraction))
        .collect();
    let data = ImageData {
        config: encode_config(config).into(),
        cpus,
        ram,
        disks,
        net,
    };
    Ok(VmImage::from_data(config.clone(), data))
}

fn build_disk(config: &VmConfig, d: &DiskConfig, i: usize, seed: u64, dup: f64) -> DiskData {
    let mut rng = match d.content_seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(1 + i as u64);
            r
        }
    };
    let bs = d.block_size as usize;
    let indices: Vec<u64> = d.populated_block_indices().collect();
    let n = indices.len();
    let copies = ((dup * n as f64) + 0.5) as usize;
    let copies = copies.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut content: Vec<Option<Arc<[u8]>>> = vec![None; n];
    if copies == n && n > 0 {
        let template = random_bytes(&mut rng, bs);
        for c in content.iter_mut() {
            *c = Some(template.clone());
        }
    } else {
        let (copy_slots, originals) = order.split_at(copies);
        for &k in originals {
            content[k] = Some(random_bytes(&mut rng, bs));
        }
        for &k in copy_slots {
            let src = originals[rng.gen_range(0..originals.len())];
            content[k] = content[src].clone();
        }
    }
    let blocks = indices
        .into_iter()
        .zip(content)
        .map(|(b, c)| (b, c.expect("every block filled")))
        .collect();
    DiskData {
        config: encode_disk_config(d).into(),
        vhd: synth_vhd(d, config.vhd_struct_size as usize),
        blocks,
    }
}

impl VmImage {
    fn from_data(config: VmConfig, data: ImageData) -> Self {
        VmImage {
            config,
            data,
            frozen: false,
            generation: 0,
            last_write: BTreeMap::new(),
            snapshots: BTreeMap::new(),
            dirty: BTreeSet::new(),
        }
    }

    /// Image with zeroed resources and no populated disk blocks, as allocated
    /// by a migration destination before any checkpoint is applied.
    pub fn blank(config: &VmConfig) -> Self {
        let zero_page = zeroed(config.page_size as usize);
        let data = ImageData {
            config: encode_config(config).into(),
            cpus: (0..config.cpu_n)
                .map(|_| CpuState {
                    regfile: zeroed(config.regfile_size as usize),
                    tlb: zeroed(config.tlb_size as usize),
                })
                .collect(),
            ram: (0..config.ram_pages()).map(|_| zero_page.clone()).collect(),
            disks: config
                .disks
                .iter()
                .map(|d| DiskData {
                    config: encode_disk_config(d).into(),
                    vhd: core::array::from_fn(|_| zeroed(config.vhd_struct_size as usize)),
                    blocks: BTreeMap::new(),
                })
                .collect(),
            net: config
                .net_interfaces
                .iter()
                .map(|_| zeroed(config.net_state_size as usize))
                .collect(),
        };
        VmImage::from_data(config.clone(), data)
    }

    pub fn config(&self) -> &VmConfig {
        &self.config
    }

    pub fn data(&self) -> &ImageData {
        &self.data
    }

    pub fn read(&self, loc: &Locator) -> Option<&Arc<[u8]>> {
        self.data.read(loc)
    }

    /// Size every object at `loc` must have.
    pub fn resource_size(&self, loc: &Locator) -> Option<usize> {
        let c = &self.config;
        let i = loc.index;
        Some(match loc.kind {
            ResourceKind::Config => return self.data.read(loc).map(|b| b.len()),
            ResourceKind::CpuRegfile if i < c.cpu_n as u64 => c.regfile_size as usize,
            ResourceKind::CpuTlb if i < c.cpu_n as u64 => c.tlb_size as usize,
            ResourceKind::RamPage if i < c.ram_pages() => c.page_size as usize,
            ResourceKind::DiskBlock { disk } => {
                let d = c.disks.get(disk as usize)?;
                if i >= d.capacity_blocks() {
                    return None;
                }
                d.block_size as usize
            }
            ResourceKind::VhdStruct { disk } if (disk as usize) < c.disks.len() && i < 3 => {
                c.vhd_struct_size as usize
            }
            ResourceKind::Net if (i as usize) < c.net_interfaces.len() => c.net_state_size as usize,
            _ => return None,
        })
    }

    fn store(&mut self, loc: &Locator, data: Arc<[u8]>) -> Result<(), ImageError> {
        let expected = self
            .resource_size(loc)
            .ok_or(ImageError::NoSuchResource(*loc))?;
        if data.len() != expected {
            return Err(ImageError::SizeMismatch {
                locator: *loc,
                expected,
                got: data.len(),
            });
        }
        if let ResourceKind::DiskBlock { disk } = loc.kind {
            self.data.disks[disk as usize]
                .blocks
                .insert(loc.index, data);
            return Ok(());
        }
        *self
            .data
            .slot(loc)
            .ok_or(ImageError::NoSuchResource(*loc))? = data;
        Ok(())
    }

    /// Guest write: replaces the resource and marks it dirty. Live snapshots
    /// keep their view because only the image's pointer is replaced.
    pub fn apply_write(
        &mut self,
        loc: Locator,
        data: impl Into<Arc<[u8]>>,
    ) -> Result<(), ImageError> {
        if self.frozen {
            return Err(ImageError::Frozen);
        }
        self.store(&loc, data.into())?;
        self.generation += 1;
        self.last_write.insert(loc, self.generation);
        self.dirty.insert(loc);
        Ok(())
    }

    /// Places checkpoint data without touching dirty tracking; allowed on a
    /// frozen image.
    pub fn install(&mut self, loc: Locator, data: impl Into<Arc<[u8]>>) -> Result<(), ImageError> {
        self.store(&loc, data.into())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Takes checkpoint snapshot `version` and clears the dirty set.
    pub fn snapshot(&mut self, version: u64) -> Result<Snapshot, ImageError> {
        if let Some((&last, _)) = self.snapshots.last_key_value() {
            if version <= last {
                return Err(ImageError::VersionNotIncreasing { last, got: version });
            }
        }
        self.snapshots.insert(version, self.generation);
        self.dirty.clear();
        Ok(Snapshot {
            version,
            config: self.config.clone(),
            data: self.data.clone(),
        })
    }

    /// Resources written since the current snapshot (or ever, before one).
    pub fn dirty(&self) -> &BTreeSet<Locator> {
        &self.dirty
    }

    /// Resources written after snapshot `since` was taken.
    pub fn dirty_set(&self, since: u64) -> Result<BTreeSet<Locator>, ImageError> {
        let gen = *self
            .snapshots
            .get(&since)
            .ok_or(ImageError::UnknownVersion(since))?;
        Ok(self
            .last_write
            .iter()
            .filter(|(_, g)| **g > gen)
            .map(|(l, _)| *l)
            .collect())
    }
}

/// Synthetic guest write pattern: a hot set written with high probability
/// each step and random cold writes elsewhere.
#[derive(Debug, Clone)]
pub struct Workload {
    pub hot_set: BTreeSet<Locator>,
    pub hot_write_prob: f64,
    pub cold_write_prob: f64,
    pub writes_per_step: u32,
    cold: Vec<Locator>,
}

impl Workload {
    pub fn new(
        image: &VmImage,
        hot_set: BTreeSet<Locator>,
        hot_write_prob: f64,
        cold_write_prob: f64,
        writes_per_step: u32,
    ) -> Self {
        let cfg = image.config();
        let mut cold: Vec<Locator> = (0..cfg.ram_pages())
            .map(Locator::page)
            .filter(|l| !hot_set.contains(l))
            .collect();
        for (d, disk) in image.data().disks.iter().enumerate() {
            if cfg.disks[d].read_only {
                continue;
            }
            cold.extend(
                disk.blocks
                    .keys()
                    .map(|b| Locator::block(d as u16, *b))
                    .filter(|l| !hot_set.contains(l)),
            );
        }
        Workload {
            hot_set,
            hot_write_prob,
            cold_write_prob,
            writes_per_step,
            cold,
        }
    }

    pub fn idle(image: &VmImage) -> Self {
        Workload::new(image, BTreeSet::new(), 0.0, 0.0, 0)
    }

    pub fn cold_candidates(&self) -> &[Locator] {
        &self.cold
    }
}

/// Applies one step of `model` to `image`; returns how many writes landed.
/// A frozen image takes no writes.
pub fn workload_step<R: Rng + ?Sized>(image: &mut VmImage, model: &Workload, rng: &mut R) -> usize {
    if image.is_frozen() {
        return 0;
    }
    let mut targets = Vec::new();
    for loc in &model.hot_set {
        if model.hot_write_prob > 0.0 && rng.gen_bool(model.hot_write_prob.min(1.0)) {
            targets.push(*loc);
        }
    }
    if !model.cold.is_empty() && model.cold_write_prob > 0.0 {
        for _ in 0..model.writes_per_step {
            let loc = model.cold[rng.gen_range(0..model.cold.len())];
            if rng.gen_bool(model.cold_write_prob.min(1.0)) {
                targets.push(loc);
            }
        }
    }
    let mut applied = 0;
    for loc in targets {
        let Some(size) = image.resource_size(&loc) else {
            continue;
        };
        let mut bytes = vec![0u8; size];
        rng.fill_bytes(&mut bytes);
        if image.apply_write(loc, bytes).is_ok() {
            applied += 1;
        }
    }
    applied
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use proptest::prelude::*;

    pub(crate) fn large_config() -> VmConfig {
        VmConfig {
            vm_name: Name::parse("/vm-name").unwrap(),
            cpu_n: 2,
            ram_bytes: 2 << 30,
            page_size: 4096,
            disks: vec![DiskConfig {
                disk_name: "hda".into(),
                capacity_bytes: 2_000_000_000,
                block_size: 512,
                fill_ratio: 0.25,
                read_only: false,
                content_seed: None,
            }],
            net_interfaces: vec!["en0".into()],
            regfile_size: DEFAULT_REGFILE_SIZE,
            tlb_size: DEFAULT_TLB_SIZE,
            vhd_struct_size: DEFAULT_VHD_STRUCT_SIZE,
            net_state_size: DEFAULT_NET_STATE_SIZE,
        }
    }

    fn small_config() -> VmConfig {
        VmConfig {
            vm_name: Name::parse("/vm").unwrap(),
            cpu_n: 1,
            ram_bytes: 16 * 512,
            page_size: 512,
            disks: vec![DiskConfig {
                disk_name: "hda".into(),
                capacity_bytes: 64 * 512,
                block_size: 512,
                fill_ratio: 0.5,
                read_only: false,
                content_seed: None,
            }],
            net_interfaces: vec!["en0".into()],
            regfile_size: 64,
            tlb_size: 64,
            vhd_struct_size: 128,
            net_state_size: 32,
        }
    }

    #[test]
    fn large_vm_object_counts() {
        let c = large_config();
        let oc = object_count(&c);
        assert_eq!(oc.disks[0].data_blocks, 976_563);
        assert_eq!(oc.disk_total, 976_567);
        assert_eq!(oc.ram_pages, 524_288);
        assert_eq!(oc.disk_total + oc.ram_pages, 1_500_855);
        assert_eq!(oc.cpu_objects, 4);
        assert_eq!(oc.total, 1_500_855 + 4 + 1 + 1);
    }

    #[test]
    fn minimal_config_has_ten_names() {
        let mut c = small_config();
        c.ram_bytes = c.page_size as u64;
        c.disks[0].capacity_bytes = 512;
        c.disks[0].fill_ratio = 1.0;
        let names: Vec<String> = enumerate_names(&c).map(|n| n.to_string()).collect();
        assert_eq!(
            names,
            [
                "/vm/config",
                "/vm/cpu/0/regfile",
                "/vm/cpu/0/tlb",
                "/vm/ram/page/0",
                "/vm/disk/hda/config",
                "/vm/disk/hda/vhd/header",
                "/vm/disk/hda/vhd/bat",
                "/vm/disk/hda/vhd/footer",
                "/vm/disk/hda/block/0",
                "/vm/net/en0",
            ]
        );
        assert_eq!(object_count(&c).total, 10);
    }

    #[test]
    fn large_vm_names_include_bat() {
        let c = large_config();
        let bat = Name::parse("/vm-name/disk/hda/vhd/bat").unwrap();
        // The BAT comes right after the RAM pages; skip past them without
        // collecting 1.5 million names.
        assert!(enumerate_names(&c).take(600_000).any(|n| n == bat));
    }

    #[test]
    fn ceil_is_exact_for_large_vm() {
        assert_eq!(ceil_tolerant(976_562.5), 976_563);
        assert_eq!(ceil_tolerant(0.1 * 5120.0 / 512.0), 1);
        assert_eq!(ceil_tolerant(0.0), 0);
        assert_eq!(ceil_tolerant(2.0000001), 3);
    }

    #[test]
    fn build_is_deterministic() {
        let c = small_config();
        let a = build_vm(&c, 7).unwrap();
        let b = build_vm(&c, 7).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), build_vm(&c, 8).unwrap().data());
        assert_eq!(a.data().disks[0].blocks.len(), 32);
    }

    #[test]
    fn full_duplication_makes_identical_blocks() {
        let c = small_config();
        let img = build_vm_with(&c, 1, &BuildOptions { dup_fraction: 1.0 }).unwrap();
        let blocks: BTreeSet<&[u8]> = img.data().disks[0]
            .blocks
            .values()
            .map(|b| &b[..])
            .collect();
        assert_eq!(blocks.len(), 1);
    }

    #[test]
    fn config_encoding_round_trips() {
        let mut c = large_config();
        c.disks[0].content_seed = Some(99);
        c.disks[0].read_only = true;
        assert_eq!(decode_config(&encode_config(&c)).unwrap(), c);
        assert_eq!(decode_config(&[1, 2, 3]), Err(ConfigError::Malformed));
    }

    #[test]
    fn relative_names_round_trip() {
        let c = small_config();
        for loc in enumerate_locators(&c) {
            let rel = loc.relative_name(&c);
            assert_eq!(
                Locator::from_relative(&c, rel.segments()),
                Some(loc),
                "{rel}"
            );
        }
    }

    #[test]
    fn copy_on_write_snapshot() {
        let c = small_config();
        let mut img = build_vm(&c, 3).unwrap();
        let snap = img.snapshot(0).unwrap();
        let before = img.read(&Locator::page(3)).unwrap().clone();
        img.apply_write(Locator::page(3), vec![0xEE; 512]).unwrap();
        assert_eq!(&img.read(&Locator::page(3)).unwrap()[..], &[0xEE; 512][..]);
        assert_eq!(snap.read(&Locator::page(3)).unwrap(), &before);
        assert!(img.dirty().contains(&Locator::page(3)));
    }

    #[test]
    fn write_errors() {
        let c = small_config();
        let mut img = build_vm(&c, 3).unwrap();
        assert!(matches!(
            img.apply_write(Locator::page(0), vec![0; 10]),
            Err(ImageError::SizeMismatch { .. })
        ));
        assert!(matches!(
            img.apply_write(Locator::page(999), vec![0; 512]),
            Err(ImageError::NoSuchResource(_))
        ));
        img.freeze();
        assert_eq!(
            img.apply_write(Locator::page(0), vec![0; 512]),
            Err(ImageError::Frozen)
        );
    }

    #[test]
    fn dirty_sets_between_snapshots() {
        let c = small_config();
        let mut img = build_vm(&c, 3).unwrap();
        img.snapshot(0).unwrap();
        img.snapshot(1).unwrap();
        assert!(img.dirty_set(1).unwrap().is_empty());
        img.apply_write(Locator::page(1), vec![1; 512]).unwrap();
        img.apply_write(Locator::page(5), vec![1; 512]).unwrap();
        let want: BTreeSet<_> = [Locator::page(1), Locator::page(5)].into();
        assert_eq!(img.dirty_set(1).unwrap(), want);
        assert_eq!(img.dirty_set(0).unwrap(), want);
        assert!(matches!(
            img.snapshot(1),
            Err(ImageError::VersionNotIncreasing { .. })
        ));
        assert_eq!(img.dirty_set(9), Err(ImageError::UnknownVersion(9)));
        img.snapshot(2).unwrap();
        assert!(img.dirty().is_empty());
        assert!(img.dirty_set(2).unwrap().is_empty());
    }

    #[test]
    fn workload_behaviour() {
        let c = small_config();
        let mut img = build_vm(&c, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idle = Workload::new(&img, BTreeSet::new(), 0.0, 0.0, 50);
        assert_eq!(workload_step(&mut img, &idle, &mut rng), 0);
        assert!(img.dirty().is_empty());

        let all_pages: BTreeSet<_> = (0..c.ram_pages()).map(Locator::page).collect();
        let hot = Workload::new(&img, all_pages.clone(), 1.0, 0.0, 0);
        workload_step(&mut img, &hot, &mut rng);
        assert!(all_pages.iter().all(|p| img.dirty().contains(p)));

        img.freeze();
        assert_eq!(workload_step(&mut img, &hot, &mut rng), 0);
    }

    #[test]
    fn workload_is_deterministic() {
        let c = small_config();
        let trace = |seed| {
            let mut img = build_vm(&c, 3).unwrap();
            let wl = Workload::new(&img, [Locator::page(0)].into(), 0.5, 0.5, 10);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..5 {
                workload_step(&mut img, &wl, &mut rng);
            }
            img.dirty().clone()
        };
        assert_eq!(trace(11), trace(11));
    }

    fn arb_config() -> impl Strategy<Value = VmConfig> {
        (
            1u32..4,
            0u64..8,
            prop::collection::vec((1u64..40, 0.0f64..=1.0), 0..3),
            0usize..3,
        )
            .prop_map(|(cpus, pages, disks, nics)| {
                let mut c = small_config();
                c.cpu_n = cpus;
                c.ram_bytes = pages * c.page_size as u64;
                c.disks = disks
                    .into_iter()
                    .enumerate()
                    .map(|(i, (blocks, fill))| DiskConfig {
                        disk_name: format!("hd{}", (b'a' + i as u8) as char),
                        capacity_bytes: blocks * 512 - 100,
                        block_size: 512,
                        fill_ratio: fill,
                        read_only: false,
                        content_seed: None,
                    })
                    .collect();
                c.net_interfaces = (0..nics).map(|i| format!("en{i}")).collect();
                c
            })
    }

    #[derive(Debug, Clone)]
    enum Op {
        Write(u64, u8),
        Snapshot,
    }

    proptest! {
        #[test]
        fn name_count_matches_object_count(c in arb_config()) {
            prop_assert_eq!(enumerate_names(&c).count() as u64, object_count(&c).total);
            let img = build_vm(&c, 1).unwrap();
            prop_assert_eq!(img.data().locators().len() as u64, object_count(&c).total);
        }

        #[test]
        fn snapshots_are_isolated_and_dirty_sets_complete(
            ops in prop::collection::vec(prop_oneof![
                (0u64..16, any::<u8>()).prop_map(|(p, b)| Op::Write(p, b)),
                Just(Op::Snapshot),
            ], 1..40)
        ) {
            let c = small_config();
            let mut img = build_vm(&c, 5).unwrap();
            let mut version = 0;
            // (snapshot, deep copy of RAM at snapshot time, pages written since)
            let mut taken: Vec<(Snapshot, Vec<Vec<u8>>, BTreeSet<Locator>)> = Vec::new();
            for op in ops {
                match op {
                    Op::Write(p, b) => {
                        img.apply_write(Locator::page(p), vec![b; 512]).unwrap();
                        for (_, _, written) in taken.iter_mut() {
                            written.insert(Locator::page(p));
                        }
                    }
                    Op::Snapshot => {
                        let s = img.snapshot(version).unwrap();
                        let copy = img.data().ram.iter().map(|p| p.to_vec()).collect();
                        taken.push((s, copy, BTreeSet::new()));
                        version += 1;
                    }
                }
            }
            for (snap, copy, written) in &taken {
                for (i, page) in copy.iter().enumerate() {
                    prop_assert_eq!(&snap.read(&Locator::page(i as u64)).unwrap()[..], &page[..]);
                }
                prop_assert_eq!(&img.dirty_set(snap.version).unwrap(), written);
            }
        }
    }
}
