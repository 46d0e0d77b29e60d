//! Physical memory, untyped regions and virtual address spaces.

use std::collections::BTreeMap;

use super::{KernelError, ObjId};

pub const PAGE_SIZE: u32 = 4096;

/// Base of simulated DRAM (matches the i.MX6Q memory map).
pub const PHYS_BASE: u32 = 0x1000_0000;

/// A contiguous physical range `[base, base + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Region {
    pub base: u32,
    pub len: u32,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base as u64 + self.len as u64
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        (self.base as u64) < other.end() && (other.base as u64) < self.end()
    }
}

/// Backing store for all simulated physical memory.
#[derive(Debug)]
pub struct PhysMem {
    bytes: Vec<u8>,
}

impl PhysMem {
    pub fn new(size: u32) -> Self {
        Self {
            bytes: vec![0; size as usize],
        }
    }

    pub fn size(&self) -> u32 {
        self.bytes.len() as u32
    }

    fn offset(&self, paddr: u32, len: usize) -> usize {
        let off = (paddr - PHYS_BASE) as usize;
        assert!(off + len <= self.bytes.len(), "physical access out of range");
        off
    }

    pub fn read(&self, paddr: u32, out: &mut [u8]) {
        let off = self.offset(paddr, out.len());
        out.copy_from_slice(&self.bytes[off..off + out.len()]);
    }

    pub fn write(&mut self, paddr: u32, data: &[u8]) {
        let off = self.offset(paddr, data.len());
        self.bytes[off..off + data.len()].copy_from_slice(data);
    }

    pub fn read_word(&self, paddr: u32) -> u32 {
        let mut w = [0u8; 4];
        self.read(paddr, &mut w);
        u32::from_le_bytes(w)
    }

    pub fn write_word(&mut self, paddr: u32, word: u32) {
        self.write(paddr, &word.to_le_bytes());
    }

    pub fn zero(&mut self, region: Region) {
        let off = self.offset(region.base, region.len as usize);
        self.bytes[off..off + region.len as usize].fill(0);
    }

    pub fn slice(&self, region: Region) -> &[u8] {
        let off = self.offset(region.base, region.len as usize);
        &self.bytes[off..off + region.len as usize]
    }
}

/// Raw memory that can be retyped into kernel objects.
#[derive(Debug, Clone)]
pub struct UntypedMemory {
    pub base: u32,
    pub size: u32,
    /// Bytes below this offset have been handed out at least once.
    pub watermark: u32,
    /// Reclaimed holes below the watermark, reused first-fit.
    free: Vec<Region>,
}

fn align_up(x: u64, align: u64) -> u64 {
    (x + align - 1) & !(align - 1)
}

impl UntypedMemory {
    pub fn new(base: u32, size: u32) -> Self {
        Self {
            base,
            size,
            watermark: 0,
            free: Vec::new(),
        }
    }

    pub fn free_bytes(&self) -> u32 {
        self.size - self.watermark + self.free.iter().map(|r| r.len).sum::<u32>()
    }

    /// Carve `len` bytes aligned to `align` (a power of two).
    pub fn retype(&mut self, len: u32, align: u32) -> Result<Region, KernelError> {
        debug_assert!(align.is_power_of_two());
        for i in 0..self.free.len() {
            let hole = self.free[i];
            let start = align_up(hole.base as u64, align as u64);
            if start + len as u64 <= hole.end() {
                let start = start as u32;
                self.free.remove(i);
                if start > hole.base {
                    self.free.push(Region {
                        base: hole.base,
                        len: start - hole.base,
                    });
                }
                let tail = (hole.end() - (start as u64 + len as u64)) as u32;
                if tail > 0 {
                    self.free.push(Region {
                        base: start + len,
                        len: tail,
                    });
                }
                self.free.sort();
                return Ok(Region { base: start, len });
            }
        }
        let cur = self.base as u64 + self.watermark as u64;
        let start = align_up(cur, align as u64);
        let end = start + len as u64;
        if end > self.base as u64 + self.size as u64 {
            return Err(KernelError::OutOfMemory);
        }
        if start > cur {
            self.free.push(Region {
                base: cur as u32,
                len: (start - cur) as u32,
            });
            self.free.sort();
        }
        self.watermark = (end - self.base as u64) as u32;
        Ok(Region {
            base: start as u32,
            len,
        })
    }

    /// Return a region previously produced by [`retype`](Self::retype).
    pub fn reclaim(&mut self, region: Region) {
        self.free.push(region);
        self.free.sort();
        let mut merged: Vec<Region> = Vec::with_capacity(self.free.len());
        for r in self.free.drain(..) {
            match merged.last_mut() {
                Some(last) if last.end() == r.base as u64 => last.len += r.len,
                _ => merged.push(r),
            }
        }
        // Holes touching the watermark lower it again.
        while let Some(last) = merged.last() {
            if last.end() == self.base as u64 + self.watermark as u64 {
                self.watermark -= last.len;
                merged.pop();
            } else {
                break;
            }
        }
        self.free = merged;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PagePerms {
    pub read: bool,
    pub write: bool,
}

impl PagePerms {
    pub const RW: PagePerms = PagePerms {
        read: true,
        write: true,
    };
    pub const RO: PagePerms = PagePerms {
        read: true,
        write: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mapping {
    pub frame: ObjId,
    pub paddr: u32,
    pub perms: PagePerms,
}

/// A task's virtual address space: virtual page number to frame mapping.
#[derive(Debug, Clone, Default)]
pub struct VSpace {
    pages: BTreeMap<u32, Mapping>,
}

impl VSpace {
    pub fn lookup(&self, vaddr: u32) -> Option<&Mapping> {
        self.pages.get(&(vaddr / PAGE_SIZE))
    }

    pub(crate) fn map(&mut self, vaddr: u32, mapping: Mapping) -> Result<(), KernelError> {
        let vpn = vaddr / PAGE_SIZE;
        if !vaddr.is_multiple_of(PAGE_SIZE) {
            return Err(KernelError::Misaligned);
        }
        if self.pages.contains_key(&vpn) {
            return Err(KernelError::AlreadyMapped);
        }
        self.pages.insert(vpn, mapping);
        Ok(())
    }

    pub(crate) fn unmap_frame(&mut self, frame: ObjId) {
        self.pages.retain(|_, m| m.frame != frame);
    }

    pub fn mappings(&self) -> impl Iterator<Item = (u32, &Mapping)> {
        self.pages.iter().map(|(vpn, m)| (vpn * PAGE_SIZE, m))
    }

    /// Translate `[vaddr, vaddr+len)` into physical chunks, checking permissions.
    pub(crate) fn translate(
        &self,
        vaddr: u32,
        len: usize,
        write: bool,
    ) -> Result<Vec<(u32, usize)>, u32> {
        let mut chunks = Vec::new();
        let mut addr = vaddr as u64;
        let end = vaddr as u64 + len as u64;
        while addr < end {
            let a = addr as u32;
            let m = self.lookup(a).ok_or(a)?;
            let allowed = if write { m.perms.write } else { m.perms.read };
            if !allowed {
                return Err(a);
            }
            let in_page = (a % PAGE_SIZE) as u64;
            let n = (PAGE_SIZE as u64 - in_page).min(end - addr);
            chunks.push((m.paddr + in_page as u32, n as usize));
            addr += n;
        }
        Ok(chunks)
    }
}

/// Physical page frame, possibly mapped into several address spaces when it
/// backs a shared buffer.
#[derive(Debug, Clone)]
pub struct Frame {
    pub shared: bool,
    pub mapped_in: Vec<ObjId>,
}
