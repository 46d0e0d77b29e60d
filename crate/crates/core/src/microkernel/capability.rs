//! Capabilities, rights and per-task capability tables.

use std::fmt;

use bitflags::bitflags;

use super::KernelError;

bitflags! {
    /// Rights carried by a capability.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct Rights: u8 {
        const SEND = 1 << 0;
        const RECV = 1 << 1;
        const GRANT = 1 << 2;
        const READ = 1 << 3;
        const WRITE = 1 << 4;
    }
}

impl Rights {
    /// Rights handed out with a fresh endpoint.
    pub const ENDPOINT_FULL: Rights = Rights::SEND.union(Rights::RECV).union(Rights::GRANT);
}

/// Identifier of an entry in the kernel-object table.
///
/// The generation counter changes every time a slot is reused, so an `ObjId`
/// held past the destruction of its object never resolves again.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjId {
    pub(crate) index: u32,
    pub(crate) generation: u32,
}

impl fmt::Display for ObjId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "obj#{}.{}", self.index, self.generation)
    }
}

/// Index of a slot in the caller's capability table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CPtr(pub u32);

/// Unforgeable reference to a kernel object together with the rights it conveys.
///
/// Fields are private: user code can only obtain capabilities from the kernel,
/// and [`Capability::derive`] never adds rights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capability {
    object: ObjId,
    rights: Rights,
    badge: u32,
}

impl Capability {
    pub(crate) fn new(object: ObjId, rights: Rights, badge: u32) -> Result<Self, KernelError> {
        if rights.is_empty() {
            return Err(KernelError::EmptyRights);
        }
        Ok(Self {
            object,
            rights,
            badge,
        })
    }

    pub fn object(&self) -> ObjId {
        self.object
    }

    pub fn rights(&self) -> Rights {
        self.rights
    }

    pub fn badge(&self) -> u32 {
        self.badge
    }

    /// Copy of this capability restricted to `rights`, optionally re-badged.
    pub fn derive(&self, rights: Rights, badge: Option<u32>) -> Result<Self, KernelError> {
        if !self.rights.contains(rights) {
            return Err(KernelError::RightsEscalation);
        }
        Capability::new(self.object, rights, badge.unwrap_or(self.badge))
    }
}

pub(crate) const CSPACE_SLOTS: usize = 256;

/// A task's capability table.
#[derive(Debug, Clone)]
pub struct CSpace {
    slots: Vec<Option<Capability>>,
}

impl Default for CSpace {
    fn default() -> Self {
        Self {
            slots: vec![None; CSPACE_SLOTS],
        }
    }
}

impl CSpace {
    pub fn get(&self, slot: CPtr) -> Option<&Capability> {
        self.slots.get(slot.0 as usize).and_then(Option::as_ref)
    }

    pub(crate) fn insert(&mut self, cap: Capability) -> Result<CPtr, KernelError> {
        let free = self
            .slots
            .iter()
            .position(Option::is_none)
            .ok_or(KernelError::CSpaceFull)?;
        self.slots[free] = Some(cap);
        Ok(CPtr(free as u32))
    }

    pub(crate) fn remove(&mut self, slot: CPtr) -> Option<Capability> {
        self.slots.get_mut(slot.0 as usize).and_then(Option::take)
    }

    /// Drop every capability whose object satisfies `dead`.
    pub(crate) fn purge(&mut self, dead: impl Fn(ObjId) -> bool) {
        for slot in &mut self.slots {
            if slot.is_some_and(|c| dead(c.object)) {
                *slot = None;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (CPtr, &Capability)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|c| (CPtr(i as u32), c)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj() -> ObjId {
        ObjId {
            index: 7,
            generation: 1,
        }
    }

    #[test]
    fn derive_subsets_rights() {
        let full = Capability::new(obj(), Rights::ENDPOINT_FULL, 0).unwrap();
        let send = full.derive(Rights::SEND, Some(9)).unwrap();
        assert_eq!(send.rights(), Rights::SEND);
        assert_eq!(send.badge(), 9);
        assert_eq!(
            send.derive(Rights::SEND | Rights::RECV, None),
            Err(KernelError::RightsEscalation)
        );
    }

    #[test]
    fn empty_rights_rejected() {
        assert_eq!(
            Capability::new(obj(), Rights::empty(), 0),
            Err(KernelError::EmptyRights)
        );
    }

    #[test]
    fn cspace_fills_lowest_free_slot() {
        let mut cs = CSpace::default();
        let cap = Capability::new(obj(), Rights::SEND, 0).unwrap();
        assert_eq!(cs.insert(cap).unwrap(), CPtr(0));
        assert_eq!(cs.insert(cap).unwrap(), CPtr(1));
        cs.remove(CPtr(0));
        assert_eq!(cs.insert(cap).unwrap(), CPtr(0));
        for _ in 2..CSPACE_SLOTS {
            cs.insert(cap).unwrap();
        }
        assert_eq!(cs.insert(cap), Err(KernelError::CSpaceFull));
    }
}
