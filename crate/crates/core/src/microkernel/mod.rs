//! Secure-world microkernel model.
//!
//! The kernel is a single-threaded state machine. Every operation names the
//! calling thread explicitly and is authorised against that thread's
//! capability table. "Blocking" means the calling TCB leaves the runnable
//! set; whoever drives the simulated CPU (see [`crate::runtime`]) picks the
//! next thread with [`Kernel::schedule`].
//!
//! Failed memory accesses and failed capability checks by a non-root thread
//! suspend that thread and queue a [`FaultRecord`] for the Root Task.

mod capability;
mod interrupt;
mod ipc;
mod memory;
mod tcb;

use std::collections::BTreeMap;

use thiserror::Error;

pub use capability::{CPtr, CSpace, Capability, ObjId, Rights};
pub use interrupt::IrqLine;
pub use ipc::{EndpointObject, Message, Received, SenderKind, SharedBuf, MAX_MSG_WORDS};
pub use memory::{
    Frame, Mapping, PagePerms, PhysMem, Region, UntypedMemory, VSpace, PAGE_SIZE, PHYS_BASE,
};
pub use tcb::{FaultKind, FaultRecord, TcbRecord, TcbRef, ThreadState, TCB_SIZE};

use capability::CSPACE_SLOTS;
use ipc::QueuedSender;
use tcb::IpcMeta;

pub const ENDPOINT_SIZE: u32 = 64;
pub const CSPACE_SIZE: u32 = 4096;
pub const VSPACE_SIZE: u32 = 16 * 1024;
/// Memory kept back by the kernel for its own data and the root task's objects.
pub const KERNEL_RESERVED: u32 = 256 * 1024;
pub const ROOT_PRIORITY: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("untyped memory exhausted")]
    OutOfMemory,
    #[error("priority outside 0..=255")]
    InvalidPriority,
    #[error("no capability for the requested object")]
    CapMissing,
    #[error("capability lacks the send right")]
    NoSendRight,
    #[error("capability lacks the receive right")]
    NoRecvRight,
    #[error("capability lacks the grant right")]
    NoGrantRight,
    #[error("capability lacks the read right")]
    NoReadRight,
    #[error("capability lacks the write right")]
    NoWriteRight,
    #[error("message exceeds {MAX_MSG_WORDS} words")]
    MsgTooLong,
    #[error("stale or unknown TCB")]
    InvalidTcb,
    #[error("no runnable thread")]
    Idle,
    #[error("interrupt line not registered")]
    UnregisteredIrq,
    #[error("interrupt line already registered")]
    IrqInUse,
    #[error("no delivered interrupt to acknowledge")]
    NotPending,
    #[error("capability rights must be non-empty")]
    EmptyRights,
    #[error("derived capability would gain rights")]
    RightsEscalation,
    #[error("capability table full")]
    CSpaceFull,
    #[error("address not page aligned")]
    Misaligned,
    #[error("virtual page already mapped")]
    AlreadyMapped,
    #[error("memory fault at {addr:#010x}")]
    VmFault { addr: u32 },
    #[error("no caller waiting for a reply")]
    NoReplyTarget,
    #[error("shared buffer not mapped in the sender's address space")]
    InvalidSharedBuffer,
    #[error("capability refers to an object of another type")]
    WrongObjectType,
    #[error("thread is suspended")]
    Suspended,
}

impl KernelError {
    /// Errors that count as a fault of the calling task.
    pub fn is_fault(&self) -> bool {
        matches!(
            self,
            KernelError::CapMissing
                | KernelError::NoSendRight
                | KernelError::NoRecvRight
                | KernelError::NoGrantRight
                | KernelError::NoReadRight
                | KernelError::NoWriteRight
                | KernelError::VmFault { .. }
        )
    }
}

#[derive(Debug, Clone)]
pub enum KernelObject {
    Untyped(UntypedMemory),
    CSpace(CSpace),
    VSpace(VSpace),
    Tcb(Box<TcbRecord>),
    Endpoint(EndpointObject),
    Frame(Frame),
}

#[derive(Debug)]
struct ObjectEntry {
    object: KernelObject,
    region: Region,
    /// Index of the untyped object this was retyped from.
    parent: Option<u32>,
}

#[derive(Debug, Default)]
struct ObjectSlot {
    generation: u32,
    entry: Option<ObjectEntry>,
}

#[derive(Debug, Clone, Copy)]
pub struct KernelConfig {
    pub memory_bytes: u32,
    pub untyped_regions: u32,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            memory_bytes: 48 * 1024 * 1024,
            untyped_regions: 1,
        }
    }
}

/// What the kernel hands to the Root Task at boot.
#[derive(Debug, Clone)]
pub struct BootEnvironment {
    pub root_tcb: TcbRef,
    pub root_cspace: ObjId,
    pub root_vspace: ObjId,
    /// The Root Task's capability to its own address space.
    pub root_vspace_cap: CPtr,
    pub untyped: Vec<CPtr>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KernelStats {
    /// Message transfers between two parties (one thread switch each).
    pub transfers: u64,
    pub schedules: u64,
}

#[derive(Debug)]
pub struct Kernel {
    objects: Vec<ObjectSlot>,
    phys: PhysMem,
    root: Option<ObjId>,
    irqs: BTreeMap<u32, IrqLine>,
    faults: Vec<FaultRecord>,
    tick: u64,
    next_ta_id: u32,
    stats: KernelStats,
}

impl Kernel {
    /// Boot the kernel: carve the root task's objects from kernel-reserved
    /// memory and hand the remainder over as untyped regions.
    pub fn boot(config: KernelConfig) -> Result<(Kernel, BootEnvironment), KernelError> {
        if config.memory_bytes < KERNEL_RESERVED + PAGE_SIZE {
            return Err(KernelError::OutOfMemory);
        }
        let mut k = Kernel {
            objects: Vec::new(),
            phys: PhysMem::new(config.memory_bytes),
            root: None,
            irqs: BTreeMap::new(),
            faults: Vec::new(),
            tick: 0,
            next_ta_id: 0,
            stats: KernelStats::default(),
        };
        let mut boot_ut = UntypedMemory::new(PHYS_BASE, KERNEL_RESERVED);
        let cs_region = boot_ut.retype(CSPACE_SIZE, CSPACE_SIZE)?;
        let vs_region = boot_ut.retype(VSPACE_SIZE, VSPACE_SIZE)?;
        let tcb_region = boot_ut.retype(TCB_SIZE, TCB_SIZE)?;
        let cspace = k.insert_object(KernelObject::CSpace(CSpace::default()), cs_region, None);
        let vspace = k.insert_object(KernelObject::VSpace(VSpace::default()), vs_region, None);
        let mut record = TcbRecord::new(k.fresh_ta_id(), ROOT_PRIORITY, cspace, vspace, tcb_region);
        record.state = ThreadState::Runnable;
        let root = k.insert_object(KernelObject::Tcb(Box::new(record)), tcb_region, None);
        k.root = Some(root);

        let pool = config.memory_bytes - KERNEL_RESERVED;
        let n = config.untyped_regions.max(1);
        let chunk = (pool / n) & !(PAGE_SIZE - 1);
        let mut untyped = Vec::new();
        if config.untyped_regions > 0 && chunk > 0 {
            for i in 0..n {
                let base = PHYS_BASE + KERNEL_RESERVED + i * chunk;
                let region = Region { base, len: chunk };
                let ut = k.insert_object(
                    KernelObject::Untyped(UntypedMemory::new(base, chunk)),
                    region,
                    None,
                );
                let cap = Capability::new(ut, Rights::READ | Rights::WRITE, 0)?;
                untyped.push(k.cspace_mut(cspace).insert(cap)?);
            }
        }
        let vs_cap = Capability::new(vspace, Rights::READ | Rights::WRITE, 0)?;
        let root_vspace_cap = k.cspace_mut(cspace).insert(vs_cap)?;
        let env = BootEnvironment {
            root_tcb: TcbRef(root),
            root_cspace: cspace,
            root_vspace: vspace,
            root_vspace_cap,
            untyped,
        };
        Ok((k, env))
    }

    fn fresh_ta_id(&mut self) -> u32 {
        let id = self.next_ta_id;
        self.next_ta_id += 1;
        id
    }

    fn insert_object(&mut self, object: KernelObject, region: Region, parent: Option<u32>) -> ObjId {
        let entry = ObjectEntry {
            object,
            region,
            parent,
        };
        if let Some(i) = self.objects.iter().position(|s| s.entry.is_none()) {
            let slot = &mut self.objects[i];
            slot.generation += 1;
            slot.entry = Some(entry);
            ObjId {
                index: i as u32,
                generation: slot.generation,
            }
        } else {
            self.objects.push(ObjectSlot {
                generation: 0,
                entry: Some(entry),
            });
            ObjId {
                index: self.objects.len() as u32 - 1,
                generation: 0,
            }
        }
    }

    fn entry(&self, id: ObjId) -> Option<&ObjectEntry> {
        self.objects
            .get(id.index as usize)
            .filter(|s| s.generation == id.generation)
            .and_then(|s| s.entry.as_ref())
    }

    fn entry_mut(&mut self, id: ObjId) -> Option<&mut ObjectEntry> {
        self.objects
            .get_mut(id.index as usize)
            .filter(|s| s.generation == id.generation)
            .and_then(|s| s.entry.as_mut())
    }

    pub fn is_live(&self, id: ObjId) -> bool {
        self.entry(id).is_some()
    }

    pub fn object(&self, id: ObjId) -> Option<&KernelObject> {
        self.entry(id).map(|e| &e.object)
    }

    /// Physical region backing a live object.
    pub fn object_region(&self, id: ObjId) -> Option<Region> {
        self.entry(id).map(|e| e.region)
    }

    pub fn phys(&self) -> &PhysMem {
        &self.phys
    }

    pub fn root(&self) -> Option<TcbRef> {
        self.root.map(TcbRef)
    }

    pub fn stats(&self) -> KernelStats {
        self.stats
    }

    pub fn tcb(&self, t: TcbRef) -> Result<&TcbRecord, KernelError> {
        match self.object(t.0) {
            Some(KernelObject::Tcb(r)) => Ok(r),
            _ => Err(KernelError::InvalidTcb),
        }
    }

    fn tcb_mut(&mut self, t: ObjId) -> Result<&mut TcbRecord, KernelError> {
        match self.entry_mut(t).map(|e| &mut e.object) {
            Some(KernelObject::Tcb(r)) => Ok(r),
            _ => Err(KernelError::InvalidTcb),
        }
    }

    fn cspace_mut(&mut self, id: ObjId) -> &mut CSpace {
        match self.entry_mut(id).map(|e| &mut e.object) {
            Some(KernelObject::CSpace(c)) => c,
            _ => panic!("tcb references a dead cspace"),
        }
    }

    fn endpoint_mut(&mut self, id: ObjId) -> Result<&mut EndpointObject, KernelError> {
        match self.entry_mut(id).map(|e| &mut e.object) {
            Some(KernelObject::Endpoint(ep)) => Ok(ep),
            Some(_) => Err(KernelError::WrongObjectType),
            None => Err(KernelError::CapMissing),
        }
    }

    pub fn endpoint(&self, id: ObjId) -> Option<&EndpointObject> {
        match self.object(id) {
            Some(KernelObject::Endpoint(ep)) => Some(ep),
            _ => None,
        }
    }

    pub fn cspace_of(&self, t: TcbRef) -> Result<&CSpace, KernelError> {
        let cs = self.tcb(t)?.cspace;
        match self.object(cs) {
            Some(KernelObject::CSpace(c)) => Ok(c),
            _ => Err(KernelError::InvalidTcb),
        }
    }

    pub fn vspace_of(&self, t: TcbRef) -> Result<&VSpace, KernelError> {
        let vs = self.tcb(t)?.vspace;
        match self.object(vs) {
            Some(KernelObject::VSpace(v)) => Ok(v),
            _ => Err(KernelError::InvalidTcb),
        }
    }

    pub fn untyped(&self, id: ObjId) -> Option<&UntypedMemory> {
        match self.object(id) {
            Some(KernelObject::Untyped(u)) => Some(u),
            _ => None,
        }
    }

    // ---- authorisation -------------------------------------------------

    fn check_caller(&self, caller: TcbRef) -> Result<(), KernelError> {
        let t = self.tcb(caller)?;
        if t.is_faulted() {
            return Err(KernelError::Suspended);
        }
        Ok(())
    }

    fn lookup_raw(&self, caller: TcbRef, slot: CPtr, need: Rights) -> Result<Capability, KernelError> {
        self.check_caller(caller)?;
        let cap = *self
            .cspace_of(caller)?
            .get(slot)
            .ok_or(KernelError::CapMissing)?;
        if !self.is_live(cap.object()) {
            return Err(KernelError::CapMissing);
        }
        for (flag, err) in [
            (Rights::SEND, KernelError::NoSendRight),
            (Rights::RECV, KernelError::NoRecvRight),
            (Rights::GRANT, KernelError::NoGrantRight),
            (Rights::READ, KernelError::NoReadRight),
            (Rights::WRITE, KernelError::NoWriteRight),
        ] {
            if need.contains(flag) && !cap.rights().contains(flag) {
                return Err(err);
            }
        }
        Ok(cap)
    }

    /// Record a fault for `caller` when `err` is fault-class.
    fn fail<T>(&mut self, caller: TcbRef, err: KernelError) -> Result<T, KernelError> {
        if err.is_fault() {
            let kind = match err {
                KernelError::VmFault { addr } => FaultKind::Vm { addr, write: false },
                e => FaultKind::Capability(e),
            };
            self.raise_fault(caller, kind);
        }
        Err(err)
    }

    fn lookup(&mut self, caller: TcbRef, slot: CPtr, need: Rights) -> Result<Capability, KernelError> {
        match self.lookup_raw(caller, slot, need) {
            Ok(c) => Ok(c),
            Err(e) => self.fail(caller, e),
        }
    }

    /// Require that `caller` holds a capability with `need` to `target`.
    fn require_authority(&mut self, caller: TcbRef, target: ObjId, need: Rights) -> Result<(), KernelError> {
        self.check_caller(caller)?;
        let ok = self
            .cspace_of(caller)?
            .iter()
            .any(|(_, c)| c.object() == target && c.rights().contains(need));
        if ok {
            Ok(())
        } else {
            self.fail(caller, KernelError::CapMissing)
        }
    }

    /// Suspend a non-root thread and notify the Root Task.
    pub fn raise_fault(&mut self, t: TcbRef, kind: FaultKind) {
        if Some(t.0) == self.root {
            return;
        }
        self.cancel_ipc(t.0);
        if let Ok(rec) = self.tcb_mut(t.0) {
            rec.state = ThreadState::Inactive;
            rec.fault = Some(kind);
            self.faults.push(FaultRecord { tcb: t, kind });
        }
    }

    /// Drain fault notifications addressed to the Root Task.
    pub fn take_faults(&mut self) -> Vec<FaultRecord> {
        std::mem::take(&mut self.faults)
    }

    // ---- object creation ------------------------------------------------

    fn retype(&mut self, caller: TcbRef, ut: CPtr, len: u32) -> Result<(Region, u32), KernelError> {
        let cap = self.lookup(caller, ut, Rights::WRITE)?;
        let idx = cap.object().index;
        match self.entry_mut(cap.object()).map(|e| &mut e.object) {
            Some(KernelObject::Untyped(u)) => Ok((u.retype(len, len.next_power_of_two())?, idx)),
            _ => Err(KernelError::WrongObjectType),
        }
    }

    fn install(&mut self, caller: TcbRef, obj: ObjId, rights: Rights) -> Result<CPtr, KernelError> {
        let cs = self.tcb(caller)?.cspace;
        let cap = Capability::new(obj, rights, 0)?;
        self.cspace_mut(cs).insert(cap)
    }

    pub fn create_cspace(&mut self, caller: TcbRef, ut: CPtr) -> Result<CPtr, KernelError> {
        let (region, parent) = self.retype(caller, ut, CSPACE_SIZE)?;
        let id = self.insert_object(KernelObject::CSpace(CSpace::default()), region, Some(parent));
        self.install(caller, id, Rights::READ | Rights::WRITE)
    }

    pub fn create_vspace(&mut self, caller: TcbRef, ut: CPtr) -> Result<CPtr, KernelError> {
        let (region, parent) = self.retype(caller, ut, VSPACE_SIZE)?;
        let id = self.insert_object(KernelObject::VSpace(VSpace::default()), region, Some(parent));
        self.install(caller, id, Rights::READ | Rights::WRITE)
    }

    /// Create an inactive TCB bound to the given capability and address spaces.
    pub fn create_tcb(
        &mut self,
        caller: TcbRef,
        ut: CPtr,
        priority: u32,
        cspace: CPtr,
        vspace: CPtr,
    ) -> Result<TcbRef, KernelError> {
        let priority = u8::try_from(priority).map_err(|_| KernelError::InvalidPriority)?;
        let cs = self.lookup(caller, cspace, Rights::WRITE)?.object();
        let vs = self.lookup(caller, vspace, Rights::WRITE)?.object();
        if !matches!(self.object(cs), Some(KernelObject::CSpace(_)))
            || !matches!(self.object(vs), Some(KernelObject::VSpace(_)))
        {
            return Err(KernelError::WrongObjectType);
        }
        let (region, parent) = self.retype(caller, ut, TCB_SIZE)?;
        self.phys.zero(region);
        let ta_id = self.fresh_ta_id();
        let record = TcbRecord::new(ta_id, priority, cs, vs, region);
        let id = self.insert_object(KernelObject::Tcb(Box::new(record)), region, Some(parent));
        self.install(caller, id, Rights::READ | Rights::WRITE)?;
        Ok(TcbRef(id))
    }

    /// Create an endpoint; the caller receives a cap with send, recv and grant.
    pub fn create_endpoint(&mut self, caller: TcbRef, ut: CPtr) -> Result<CPtr, KernelError> {
        let (region, parent) = self.retype(caller, ut, ENDPOINT_SIZE)?;
        let id = self.insert_object(
            KernelObject::Endpoint(EndpointObject::default()),
            region,
            Some(parent),
        );
        self.install(caller, id, Rights::ENDPOINT_FULL)
    }

    fn vspace_obj(&mut self, caller: TcbRef, vspace: CPtr) -> Result<ObjId, KernelError> {
        let vs = self.lookup(caller, vspace, Rights::WRITE)?.object();
        match self.object(vs) {
            Some(KernelObject::VSpace(_)) => Ok(vs),
            _ => Err(KernelError::WrongObjectType),
        }
    }

    fn new_frames(
        &mut self,
        caller: TcbRef,
        ut: CPtr,
        vspaces: &[ObjId],
        vaddr: u32,
        pages: u32,
        perms: PagePerms,
        shared: bool,
    ) -> Result<(), KernelError> {
        if !vaddr.is_multiple_of(PAGE_SIZE) {
            return Err(KernelError::Misaligned);
        }
        for vs in vspaces {
            let Some(KernelObject::VSpace(v)) = self.object(*vs) else {
                return Err(KernelError::WrongObjectType);
            };
            for p in 0..pages {
                if v.lookup(vaddr + p * PAGE_SIZE).is_some() {
                    return Err(KernelError::AlreadyMapped);
                }
            }
        }
        for p in 0..pages {
            let (region, parent) = self.retype(caller, ut, PAGE_SIZE)?;
            let frame = Frame {
                shared,
                mapped_in: vspaces.to_vec(),
            };
            let fid = self.insert_object(KernelObject::Frame(frame), region, Some(parent));
            for vs in vspaces {
                if let Some(KernelObject::VSpace(v)) = self.entry_mut(*vs).map(|e| &mut e.object) {
                    v.map(
                        vaddr + p * PAGE_SIZE,
                        Mapping {
                            frame: fid,
                            paddr: region.base,
                            perms,
                        },
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Back `pages` pages at `vaddr` in one address space with fresh frames.
    pub fn map_new_frames(
        &mut self,
        caller: TcbRef,
        ut: CPtr,
        vspace: CPtr,
        vaddr: u32,
        pages: u32,
        perms: PagePerms,
    ) -> Result<(), KernelError> {
        let vs = self.vspace_obj(caller, vspace)?;
        self.new_frames(caller, ut, &[vs], vaddr, pages, perms, false)
    }

    /// Map the same fresh frames read-write at `vaddr` in every listed vspace.
    pub fn create_shared_buffer(
        &mut self,
        caller: TcbRef,
        ut: CPtr,
        vspaces: &[CPtr],
        vaddr: u32,
        bytes: u32,
    ) -> Result<SharedBuf, KernelError> {
        let mut ids = Vec::with_capacity(vspaces.len());
        for v in vspaces {
            ids.push(self.vspace_obj(caller, *v)?);
        }
        let pages = bytes.div_ceil(PAGE_SIZE);
        self.new_frames(caller, ut, &ids, vaddr, pages, PagePerms::RW, true)?;
        Ok(SharedBuf {
            base: vaddr,
            len: pages * PAGE_SIZE,
        })
    }

    // ---- capability management -----------------------------------------

    /// Mint a copy of `src` with a subset of its rights into the caller's cspace.
    pub fn derive_capability(
        &mut self,
        caller: TcbRef,
        src: CPtr,
        rights: Rights,
        badge: Option<u32>,
    ) -> Result<CPtr, KernelError> {
        let cap = self.lookup(caller, src, Rights::empty())?;
        let derived = cap.derive(rights, badge)?;
        let cs = self.tcb(caller)?.cspace;
        self.cspace_mut(cs).insert(derived)
    }

    /// Copy `src` into `target`'s cspace. The copy loses the grant right
    /// unless `keep_grant` is set.
    pub fn grant_capability(
        &mut self,
        caller: TcbRef,
        target: TcbRef,
        src: CPtr,
        keep_grant: bool,
    ) -> Result<CPtr, KernelError> {
        self.tcb(target)?;
        self.require_authority(caller, target.0, Rights::WRITE)?;
        let cap = self.lookup(caller, src, Rights::GRANT)?;
        let mut rights = cap.rights();
        if !keep_grant {
            rights.remove(Rights::GRANT);
        }
        let copy = cap.derive(rights, None)?;
        let cs = self.tcb(target)?.cspace;
        self.cspace_mut(cs).insert(copy)
    }

    pub fn delete_capability(&mut self, caller: TcbRef, slot: CPtr) -> Result<(), KernelError> {
        self.check_caller(caller)?;
        let cs = self.tcb(caller)?.cspace;
        self.cspace_mut(cs)
            .remove(slot)
            .map(|_| ())
            .ok_or(KernelError::CapMissing)
    }

    // ---- thread control (Root Task only: requires a TCB capability) ------

    pub fn resume(&mut self, caller: TcbRef, t: TcbRef) -> Result<(), KernelError> {
        self.tcb(t)?;
        self.require_authority(caller, t.0, Rights::WRITE)?;
        let rec = self.tcb_mut(t.0)?;
        rec.fault = None;
        if rec.state == ThreadState::Inactive {
            rec.state = ThreadState::Runnable;
        }
        Ok(())
    }

    pub fn suspend(&mut self, caller: TcbRef, t: TcbRef) -> Result<(), KernelError> {
        self.tcb(t)?;
        self.require_authority(caller, t.0, Rights::WRITE)?;
        self.cancel_ipc(t.0);
        self.tcb_mut(t.0)?.state = ThreadState::Inactive;
        Ok(())
    }

    pub fn set_priority(&mut self, caller: TcbRef, t: TcbRef, priority: u32) -> Result<(), KernelError> {
        let priority = u8::try_from(priority).map_err(|_| KernelError::InvalidPriority)?;
        self.tcb(t)?;
        self.require_authority(caller, t.0, Rights::WRITE)?;
        self.tcb_mut(t.0)?.priority = priority;
        Ok(())
    }

    /// Park the Root Task while the normal world runs.
    pub fn smc_block(&mut self, caller: TcbRef) -> Result<(), KernelError> {
        self.check_caller(caller)?;
        self.tcb_mut(caller.0)?.state = ThreadState::BlockedRecv;
        Ok(())
    }

    /// Wake the Root Task when a secure monitor call arrives.
    pub fn smc_wake(&mut self, t: TcbRef) -> Result<(), KernelError> {
        let rec = self.tcb_mut(t.0)?;
        if rec.state == ThreadState::BlockedRecv && rec.waiting_on.is_none() && !rec.awaiting_reply {
            rec.state = ThreadState::Runnable;
        }
        Ok(())
    }

    // ---- scheduling ---------------------------------------------------------

    /// Highest-priority runnable thread; least recently chosen among equals.
    pub fn schedule(&mut self) -> Result<TcbRef, KernelError> {
        self.schedule_among(|_| true)
    }

    /// As [`schedule`](Self::schedule), considering only threads for which
    /// `eligible` holds.
    pub fn schedule_among(&mut self, eligible: impl Fn(TcbRef) -> bool) -> Result<TcbRef, KernelError> {
        let mut best: Option<(u8, u64, ObjId)> = None;
        for (i, slot) in self.objects.iter().enumerate() {
            let Some(ObjectEntry {
                object: KernelObject::Tcb(t),
                ..
            }) = &slot.entry
            else {
                continue;
            };
            if t.state != ThreadState::Runnable {
                continue;
            }
            let id = ObjId {
                index: i as u32,
                generation: slot.generation,
            };
            if !eligible(TcbRef(id)) {
                continue;
            }
            let better = match best {
                None => true,
                Some((p, last, _)) => t.priority > p || (t.priority == p && t.last_run < last),
            };
            if better {
                best = Some((t.priority, t.last_run, id));
            }
        }
        let (_, _, id) = best.ok_or(KernelError::Idle)?;
        self.tick += 1;
        self.stats.schedules += 1;
        let tick = self.tick;
        self.tcb_mut(id)?.last_run = tick;
        Ok(TcbRef(id))
    }

    pub fn runnable(&self) -> Vec<TcbRef> {
        self.live_tcbs()
            .into_iter()
            .filter(|t| self.tcb(*t).is_ok_and(|r| r.state == ThreadState::Runnable))
            .collect()
    }

    pub fn live_tcbs(&self) -> Vec<TcbRef> {
        self.objects
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match &s.entry {
                Some(ObjectEntry {
                    object: KernelObject::Tcb(_),
                    ..
                }) => Some(TcbRef(ObjId {
                    index: i as u32,
                    generation: s.generation,
                })),
                _ => None,
            })
            .collect()
    }

    // ---- IPC -------------------------------------------------------------

    fn stage_outgoing(&mut self, t: ObjId, msg: &Message) -> Result<(), KernelError> {
        let buf = self.tcb_mut(t)?.ipc_buffer;
        self.phys.write_word(buf, msg.label);
        for (i, w) in msg.words.iter().enumerate() {
            self.phys.write_word(buf + 4 + 4 * i as u32, *w);
        }
        Ok(())
    }

    /// Copy a staged message from one IPC buffer into another.
    fn copy_ipc_buffer(&mut self, from: ObjId, to: ObjId, len: u32) -> Result<(), KernelError> {
        let src = self.tcb_mut(from)?.ipc_buffer;
        let dst = self.tcb_mut(to)?.ipc_buffer;
        for i in 0..=len {
            let w = self.phys.read_word(src + 4 * i);
            self.phys.write_word(dst + 4 * i, w);
        }
        Ok(())
    }

    fn deliver(&mut self, to: ObjId, meta: IpcMeta) -> Result<(), KernelError> {
        let rec = self.tcb_mut(to)?;
        rec.inbox = Some(meta);
        rec.waiting_on = None;
        rec.state = ThreadState::Runnable;
        self.stats.transfers += 1;
        Ok(())
    }

    fn check_message(&mut self, caller: TcbRef, msg: &Message) -> Result<(), KernelError> {
        if msg.words.len() > MAX_MSG_WORDS {
            return Err(KernelError::MsgTooLong);
        }
        if let Some(b) = msg.shared_buf {
            let vs = self.vspace_of(caller)?;
            if vs.translate(b.base, b.len as usize, false).is_err() {
                return Err(KernelError::InvalidSharedBuffer);
            }
        }
        Ok(())
    }

    fn send_inner(&mut self, caller: TcbRef, ep: CPtr, msg: &Message, is_call: bool) -> Result<bool, KernelError> {
        let cap = self.lookup(caller, ep, Rights::SEND)?;
        self.endpoint_mut(cap.object())?;
        self.check_message(caller, msg)?;
        self.stage_outgoing(caller.0, msg)?;
        let meta = IpcMeta {
            label: msg.label,
            len: msg.words.len() as u32,
            shared_buf: msg.shared_buf,
            badge: cap.badge(),
            kind: SenderKind::Thread,
        };
        let receiver = self.endpoint_mut(cap.object())?.recv_queue.pop_front();
        match receiver {
            Some(r) => {
                self.copy_ipc_buffer(caller.0, r, meta.len)?;
                self.deliver(r, meta)?;
                if is_call {
                    self.tcb_mut(r)?.reply_to = Some(caller.0);
                    let me = self.tcb_mut(caller.0)?;
                    me.awaiting_reply = true;
                    me.state = ThreadState::BlockedRecv;
                }
                Ok(true)
            }
            None => {
                self.endpoint_mut(cap.object())?
                    .send_queue
                    .push_back(QueuedSender::Thread {
                        tcb: caller.0,
                        badge: cap.badge(),
                        is_call,
                    });
                let me = self.tcb_mut(caller.0)?;
                me.outgoing = Some(meta);
                me.waiting_on = Some(cap.object());
                me.awaiting_reply = is_call;
                me.state = ThreadState::BlockedSend;
                Ok(false)
            }
        }
    }

    /// Send `msg` on the endpoint named by `ep`. Returns `true` if a waiting
    /// receiver took it immediately; otherwise the caller is now blocked on
    /// the endpoint's send queue.
    pub fn ipc_send(&mut self, caller: TcbRef, ep: CPtr, msg: &Message) -> Result<bool, KernelError> {
        self.send_inner(caller, ep, msg, false)
    }

    /// Send `msg` and wait for the receiver's reply. The reply arrives in the
    /// caller's inbox; fetch it with [`take_message`](Self::take_message).
    pub fn ipc_call(&mut self, caller: TcbRef, ep: CPtr, msg: &Message) -> Result<bool, KernelError> {
        self.send_inner(caller, ep, msg, true)
    }

    /// Receive on `ep`. Returns the message if a sender was already queued,
    /// otherwise blocks the caller and returns `None`.
    pub fn ipc_recv(&mut self, caller: TcbRef, ep: CPtr) -> Result<Option<Received>, KernelError> {
        let cap = self.lookup(caller, ep, Rights::RECV)?;
        let sender = self.endpoint_mut(cap.object())?.send_queue.pop_front();
        match sender {
            Some(QueuedSender::Thread { tcb, is_call, .. }) => {
                let meta = self
                    .tcb_mut(tcb)?
                    .outgoing
                    .take()
                    .expect("queued sender without staged message");
                self.copy_ipc_buffer(tcb, caller.0, meta.len)?;
                self.deliver(caller.0, meta)?;
                let s = self.tcb_mut(tcb)?;
                s.waiting_on = None;
                if is_call {
                    s.state = ThreadState::BlockedRecv;
                    self.tcb_mut(caller.0)?.reply_to = Some(tcb);
                } else {
                    s.state = ThreadState::Runnable;
                }
                Ok(self.take_message(caller))
            }
            Some(QueuedSender::Interrupt { irq, badge }) => {
                let buf = self.tcb_mut(caller.0)?.ipc_buffer;
                self.phys.write_word(buf, irq);
                self.deliver(
                    caller.0,
                    IpcMeta {
                        label: irq,
                        len: 0,
                        shared_buf: None,
                        badge,
                        kind: SenderKind::Interrupt,
                    },
                )?;
                Ok(self.take_message(caller))
            }
            None => {
                self.endpoint_mut(cap.object())?.recv_queue.push_back(caller.0);
                let me = self.tcb_mut(caller.0)?;
                me.waiting_on = Some(cap.object());
                me.state = ThreadState::BlockedRecv;
                Ok(None)
            }
        }
    }

    /// Answer the thread whose call the caller last received.
    pub fn ipc_reply(&mut self, caller: TcbRef, msg: &Message) -> Result<(), KernelError> {
        self.check_caller(caller)?;
        if msg.words.len() > MAX_MSG_WORDS {
            return Err(KernelError::MsgTooLong);
        }
        let target = self
            .tcb_mut(caller.0)?
            .reply_to
            .take()
            .ok_or(KernelError::NoReplyTarget)?;
        match self.tcb(TcbRef(target)) {
            Ok(t) if t.awaiting_reply => {}
            _ => return Err(KernelError::NoReplyTarget),
        }
        self.stage_outgoing(caller.0, msg)?;
        let len = msg.words.len() as u32;
        self.copy_ipc_buffer(caller.0, target, len)?;
        self.tcb_mut(target)?.awaiting_reply = false;
        self.deliver(
            target,
            IpcMeta {
                label: msg.label,
                len,
                shared_buf: msg.shared_buf,
                badge: 0,
                kind: SenderKind::Reply,
            },
        )
    }

    /// Read out a delivered message from `t`'s IPC buffer.
    pub fn take_message(&mut self, t: TcbRef) -> Option<Received> {
        let rec = self.tcb_mut(t.0).ok()?;
        let meta = rec.inbox.take()?;
        let buf = rec.ipc_buffer;
        let label = self.phys.read_word(buf);
        let words = (0..meta.len)
            .map(|i| self.phys.read_word(buf + 4 + 4 * i))
            .collect();
        debug_assert_eq!(label, meta.label);
        Some(Received {
            msg: Message {
                label,
                words,
                shared_buf: meta.shared_buf,
            },
            badge: meta.badge,
            kind: meta.kind,
        })
    }

    /// The caller whose request `t` is currently serving, if any.
    pub fn reply_target(&self, t: TcbRef) -> Option<TcbRef> {
        self.tcb(t).ok()?.reply_to.map(TcbRef)
    }

    /// Abandon a call whose server can no longer answer.
    pub fn abort_call(&mut self, t: TcbRef) -> Result<(), KernelError> {
        self.cancel_ipc(t.0);
        let rec = self.tcb_mut(t.0)?;
        rec.awaiting_reply = false;
        if matches!(rec.state, ThreadState::BlockedRecv | ThreadState::BlockedSend) {
            rec.state = ThreadState::Runnable;
        }
        Ok(())
    }

    fn cancel_ipc(&mut self, t: ObjId) {
        let Ok(rec) = self.tcb_mut(t) else { return };
        let waiting = rec.waiting_on.take();
        rec.outgoing = None;
        if let Some(ep) = waiting {
            if let Ok(e) = self.endpoint_mut(ep) {
                e.remove_thread(t);
            }
        }
        for slot in &mut self.objects {
            if let Some(ObjectEntry {
                object: KernelObject::Tcb(other),
                ..
            }) = &mut slot.entry
            {
                if other.reply_to == Some(t) {
                    other.reply_to = None;
                }
            }
        }
    }

    // ---- memory access on behalf of a task ------------------------------

    pub fn mem_read(&mut self, caller: TcbRef, vaddr: u32, len: usize) -> Result<Vec<u8>, KernelError> {
        self.check_caller(caller)?;
        match self.vspace_of(caller)?.translate(vaddr, len, false) {
            Ok(chunks) => {
                let mut out = vec![0u8; len];
                let mut off = 0;
                for (paddr, n) in chunks {
                    self.phys.read(paddr, &mut out[off..off + n]);
                    off += n;
                }
                Ok(out)
            }
            Err(addr) => {
                self.raise_fault(caller, FaultKind::Vm { addr, write: false });
                Err(KernelError::VmFault { addr })
            }
        }
    }

    pub fn mem_write(&mut self, caller: TcbRef, vaddr: u32, data: &[u8]) -> Result<(), KernelError> {
        self.check_caller(caller)?;
        match self.vspace_of(caller)?.translate(vaddr, data.len(), true) {
            Ok(chunks) => {
                let mut off = 0;
                for (paddr, n) in chunks {
                    self.phys.write(paddr, &data[off..off + n]);
                    off += n;
                }
                Ok(())
            }
            Err(addr) => {
                self.raise_fault(caller, FaultKind::Vm { addr, write: true });
                Err(KernelError::VmFault { addr })
            }
        }
    }

    // ---- teardown ---------------------------------------------------------

    fn free_object(&mut self, id: ObjId) {
        let Some(slot) = self.objects.get_mut(id.index as usize) else {
            return;
        };
        if slot.generation != id.generation {
            return;
        }
        let Some(entry) = slot.entry.take() else { return };
        self.phys.zero(entry.region);
        if let Some(p) = entry.parent {
            let pslot = &mut self.objects[p as usize];
            if let Some(ObjectEntry {
                object: KernelObject::Untyped(u),
                ..
            }) = &mut pslot.entry
            {
                u.reclaim(entry.region);
            }
        }
    }

    /// Destroy a task: scrub and reclaim its frames, address space,
    /// capability table and TCB, and revoke every capability naming them.
    pub fn destroy_ta(&mut self, caller: TcbRef, t: TcbRef) -> Result<(), KernelError> {
        let rec = self.tcb(t)?.clone();
        if Some(t.0) == self.root {
            return Err(KernelError::InvalidTcb);
        }
        self.require_authority(caller, t.0, Rights::WRITE)?;
        self.cancel_ipc(t.0);

        let frames: Vec<ObjId> = match self.object(rec.vspace) {
            Some(KernelObject::VSpace(v)) => {
                let mut f: Vec<ObjId> = v.mappings().map(|(_, m)| m.frame).collect();
                f.sort();
                f.dedup();
                f
            }
            _ => Vec::new(),
        };
        for f in &frames {
            let others = match self.object(*f) {
                Some(KernelObject::Frame(fr)) => fr.mapped_in.clone(),
                _ => Vec::new(),
            };
            for vs in others {
                if let Some(KernelObject::VSpace(v)) = self.entry_mut(vs).map(|e| &mut e.object) {
                    v.unmap_frame(*f);
                }
            }
        }
        let shares_cspace = self.live_tcbs().iter().any(|o| {
            *o != t && self.tcb(*o).is_ok_and(|r| r.cspace == rec.cspace)
        });
        let shares_vspace = self.live_tcbs().iter().any(|o| {
            *o != t && self.tcb(*o).is_ok_and(|r| r.vspace == rec.vspace)
        });
        let mut dead: Vec<ObjId> = frames;
        if !shares_vspace {
            dead.push(rec.vspace);
        }
        if !shares_cspace {
            dead.push(rec.cspace);
        }
        dead.push(t.0);
        for id in &dead {
            self.free_object(*id);
        }
        for slot in &mut self.objects {
            if let Some(ObjectEntry {
                object: KernelObject::CSpace(cs),
                ..
            }) = &mut slot.entry
            {
                cs.purge(|o| dead.contains(&o));
            }
        }
        Ok(())
    }

    /// Frames currently mapped in `t`'s address space.
    pub fn frames_of(&self, t: TcbRef) -> Result<Vec<(ObjId, Region)>, KernelError> {
        let vs = self.vspace_of(t)?;
        let mut out: Vec<(ObjId, Region)> = vs
            .mappings()
            .filter_map(|(_, m)| self.object_region(m.frame).map(|r| (m.frame, r)))
            .collect();
        out.sort();
        out.dedup();
        Ok(out)
    }

    // ---- interrupts -----------------------------------------------------

    /// Route `irq` to the endpoint named by `handler`.
    pub fn register_interrupt(&mut self, caller: TcbRef, irq: u32, handler: CPtr) -> Result<(), KernelError> {
        let cap = self.lookup(caller, handler, Rights::SEND)?;
        self.endpoint_mut(cap.object())?;
        if self.irqs.contains_key(&irq) {
            return Err(KernelError::IrqInUse);
        }
        self.irqs.insert(irq, IrqLine::new(cap.object(), cap.badge()));
        Ok(())
    }

    /// Raise `irq`. Returns whether a notification was delivered; signals
    /// arriving before the previous one was acknowledged are suppressed.
    pub fn signal_interrupt(&mut self, irq: u32) -> Result<bool, KernelError> {
        let line = self.irqs.get_mut(&irq).ok_or(KernelError::UnregisteredIrq)?;
        if line.pending {
            line.suppressed += 1;
            return Ok(false);
        }
        line.pending = true;
        line.deliveries += 1;
        let (ep, badge) = (line.endpoint, line.badge);
        let receiver = self.endpoint_mut(ep)?.recv_queue.pop_front();
        match receiver {
            Some(r) => {
                let buf = self.tcb_mut(r)?.ipc_buffer;
                self.phys.write_word(buf, irq);
                self.deliver(
                    r,
                    IpcMeta {
                        label: irq,
                        len: 0,
                        shared_buf: None,
                        badge,
                        kind: SenderKind::Interrupt,
                    },
                )?;
            }
            None => self
                .endpoint_mut(ep)?
                .send_queue
                .push_back(QueuedSender::Interrupt { irq, badge }),
        }
        Ok(true)
    }

    /// Handler acknowledges `irq`; requires receive rights on its endpoint.
    pub fn ack_interrupt(&mut self, caller: TcbRef, irq: u32) -> Result<(), KernelError> {
        let ep = self.irqs.get(&irq).ok_or(KernelError::UnregisteredIrq)?.endpoint;
        self.require_authority(caller, ep, Rights::RECV)?;
        let line = self.irqs.get_mut(&irq).ok_or(KernelError::UnregisteredIrq)?;
        if !line.pending {
            return Err(KernelError::NotPending);
        }
        line.pending = false;
        line.acks += 1;
        Ok(())
    }

    pub fn irq_line(&self, irq: u32) -> Option<&IrqLine> {
        self.irqs.get(&irq)
    }
}

/// Number of capability slots per task.
pub const CSPACE_CAPACITY: usize = CSPACE_SLOTS;
