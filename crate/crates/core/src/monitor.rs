//! TrustZone monitor mode: SMC traps, per-world context save/restore and the
//! NS bit.
//!
//! [`smc_trap`] is the pure transition function. [`Monitor`] wraps it with
//! the calling convention used by the normal world: command ID in r0,
//! argument in r1, result back in r0.

use std::collections::BTreeMap;

use thiserror::Error;

pub const NUM_REGS: usize = 16;
/// `args` values with this bit set name a shared-memory region.
pub const SHM_HANDLE_BIT: u32 = 0x8000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum World {
    Secure,
    Normal,
}

impl World {
    pub fn other(self) -> World {
        match self {
            World::Secure => World::Normal,
            World::Normal => World::Secure,
        }
    }

    fn ns_bit(self) -> bool {
        self == World::Normal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorldContext {
    pub register_file: [u32; NUM_REGS],
    pub stack_pointer: u32,
    pub program_counter: u32,
    pub status_flags: u32,
    pub world: World,
}

impl WorldContext {
    pub fn zeroed(world: World) -> Self {
        Self {
            register_file: [0; NUM_REGS],
            stack_pointer: 0,
            program_counter: 0,
            status_flags: 0,
            world,
        }
    }

    pub fn entry(world: World, pc: u32, sp: u32) -> Self {
        Self {
            program_counter: pc,
            stack_pointer: sp,
            ..Self::zeroed(world)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MonitorError {
    #[error("destination world has no saved context")]
    NoSavedContext,
    #[error("restore from an empty slot")]
    EmptySlot,
    #[error("SMC issued from the {0:?} world where the other was expected")]
    WrongWorld(World),
    #[error("secure world did not return to the normal world")]
    SecureWorldHung,
    #[error("unknown shared-memory handle {0:#x}")]
    BadHandle(u32),
}

/// One save area on the monitor stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SavedSlot(Option<WorldContext>);

impl SavedSlot {
    pub const EMPTY: SavedSlot = SavedSlot(None);

    pub fn is_empty(&self) -> bool {
        self.0.is_none()
    }
}

pub fn save_context(ctx: WorldContext) -> SavedSlot {
    SavedSlot(Some(ctx))
}

pub fn restore_context(slot: SavedSlot) -> Result<WorldContext, MonitorError> {
    slot.0.ok_or(MonitorError::EmptySlot)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmcRequest {
    pub command_id: u32,
    pub args: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonitorState {
    pub ns_bit: bool,
    /// Registers of the world currently executing.
    pub live: WorldContext,
    pub saved_secure: SavedSlot,
    pub saved_normal: SavedSlot,
    pub switch_counter: u64,
}

impl MonitorState {
    /// Reset state: the secure world runs first; the normal world's entry
    /// context, if given, waits in its save slot.
    pub fn power_on(secure: WorldContext, normal_entry: Option<WorldContext>) -> Self {
        Self {
            ns_bit: false,
            live: WorldContext {
                world: World::Secure,
                ..secure
            },
            saved_secure: SavedSlot::EMPTY,
            saved_normal: SavedSlot(normal_entry.map(|c| WorldContext {
                world: World::Normal,
                ..c
            })),
            switch_counter: 0,
        }
    }

    pub fn current_world(&self) -> World {
        if self.ns_bit {
            World::Normal
        } else {
            World::Secure
        }
    }

    fn slot_mut(&mut self, w: World) -> &mut SavedSlot {
        match w {
            World::Secure => &mut self.saved_secure,
            World::Normal => &mut self.saved_normal,
        }
    }
}

/// Trap an SMC issued by the executing world and resume the other one with
/// `req` in r0/r1.
pub fn smc_trap(state: &MonitorState, req: SmcRequest) -> Result<MonitorState, MonitorError> {
    let from = state.current_world();
    let to = from.other();
    let mut next = state.clone();
    let dest = std::mem::take(next.slot_mut(to));
    if dest.is_empty() {
        return Err(MonitorError::NoSavedContext);
    }
    *next.slot_mut(from) = save_context(state.live);
    next.switch_counter += 1;
    let mut resumed = restore_context(dest)?;
    next.switch_counter += 1;
    resumed.register_file[0] = req.command_id;
    resumed.register_file[1] = req.args;
    next.live = resumed;
    next.ns_bit = to.ns_bit();
    Ok(next)
}

/// The secure-world side of an SMC: runs when the monitor resumes the secure
/// world and must eventually hand control back with
/// [`Monitor::return_to_normal`].
pub trait SecureWorld {
    fn on_smc(&mut self, monitor: &mut Monitor) -> Result<(), MonitorError>;
}

/// Shared memory the normal world exposes to the secure world by handle.
#[derive(Debug, Default)]
pub struct ShmTable {
    next: u32,
    regions: BTreeMap<u32, ShmRegion>,
}

#[derive(Debug)]
struct ShmRegion {
    bytes: Vec<u8>,
    written: bool,
}

impl ShmTable {
    pub fn register(&mut self, bytes: Vec<u8>) -> u32 {
        let h = SHM_HANDLE_BIT | (self.next & !SHM_HANDLE_BIT);
        self.next = self.next.wrapping_add(1);
        self.regions.insert(h, ShmRegion { bytes, written: false });
        h
    }

    pub fn get(&self, h: u32) -> Result<&[u8], MonitorError> {
        self.regions
            .get(&h)
            .map(|r| r.bytes.as_slice())
            .ok_or(MonitorError::BadHandle(h))
    }

    /// Secure-world write-back of a result.
    pub fn put(&mut self, h: u32, bytes: Vec<u8>) -> Result<(), MonitorError> {
        let r = self.regions.get_mut(&h).ok_or(MonitorError::BadHandle(h))?;
        r.bytes = bytes;
        r.written = true;
        Ok(())
    }

    /// Drop the region; returns its contents if the secure world wrote to it.
    pub fn release(&mut self, h: u32) -> Option<Vec<u8>> {
        self.regions.remove(&h).filter(|r| r.written).map(|r| r.bytes)
    }
}

#[derive(Debug)]
pub struct Monitor {
    state: MonitorState,
    pub shm: ShmTable,
}

impl Monitor {
    pub fn new(state: MonitorState) -> Self {
        Self {
            state,
            shm: ShmTable::default(),
        }
    }

    pub fn state(&self) -> &MonitorState {
        &self.state
    }

    pub fn switch_counter(&self) -> u64 {
        self.state.switch_counter
    }

    pub fn trap(&mut self, req: SmcRequest) -> Result<(), MonitorError> {
        self.state = smc_trap(&self.state, req)?;
        Ok(())
    }

    /// r0/r1 as seen by the executing world.
    pub fn request_registers(&self) -> SmcRequest {
        SmcRequest {
            command_id: self.state.live.register_file[0],
            args: self.state.live.register_file[1],
        }
    }

    /// Secure world hands `result` back; the normal world resumes with it in r0.
    pub fn return_to_normal(&mut self, result: u32) -> Result<(), MonitorError> {
        if self.state.current_world() != World::Secure {
            return Err(MonitorError::WrongWorld(World::Normal));
        }
        self.trap(SmcRequest {
            command_id: result,
            args: 0,
        })
    }

    /// Issue `MicroTEE_SMC(command_id, args)` from the normal world and
    /// return the result word the secure world sends back.
    pub fn microtee_smc(
        &mut self,
        secure: &mut dyn SecureWorld,
        command_id: u32,
        args: u32,
    ) -> Result<u32, MonitorError> {
        if self.state.current_world() != World::Normal {
            return Err(MonitorError::WrongWorld(World::Secure));
        }
        self.trap(SmcRequest { command_id, args })?;
        secure.on_smc(self)?;
        if self.state.current_world() != World::Normal {
            return Err(MonitorError::SecureWorldHung);
        }
        Ok(self.state.live.register_file[0])
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ctx_strategy(world: World) -> impl Strategy<Value = WorldContext> {
        (any::<[u32; NUM_REGS]>(), any::<u32>(), any::<u32>(), any::<u32>()).prop_map(move |(r, sp, pc, st)| {
            WorldContext {
                register_file: r,
                stack_pointer: sp,
                program_counter: pc,
                status_flags: st,
                world,
            }
        })
    }

    fn booted() -> MonitorState {
        let s = MonitorState::power_on(
            WorldContext::entry(World::Secure, 0x100, 0x8000),
            Some(WorldContext::entry(World::Normal, 0x200, 0x9000)),
        );
        smc_trap(&s, SmcRequest { command_id: 0, args: 0 }).unwrap()
    }

    #[test]
    fn trap_from_normal_passes_registers() {
        let s = booted();
        assert!(s.ns_bit);
        let t = smc_trap(&s, SmcRequest { command_id: 3, args: 0 }).unwrap();
        assert!(!t.ns_bit);
        assert_eq!(t.live.world, World::Secure);
        assert_eq!(t.live.register_file[..2], [3, 0]);
        assert_eq!(t.live.program_counter, 0x100);
        assert_eq!(t.switch_counter, s.switch_counter + 2);
    }

    #[test]
    fn trap_back_restores_normal() {
        let s = booted();
        let t = smc_trap(&s, SmcRequest { command_id: 3, args: 0 }).unwrap();
        let u = smc_trap(&t, SmcRequest { command_id: 1, args: 0 }).unwrap();
        assert!(u.ns_bit);
        assert_eq!(u.live.register_file[0], 1);
        assert_eq!(u.live.program_counter, 0x200);
        assert_eq!(u.switch_counter, s.switch_counter + 4);
    }

    #[test]
    fn uninitialised_secure_world() {
        let s = MonitorState {
            ns_bit: true,
            live: WorldContext::zeroed(World::Normal),
            saved_secure: SavedSlot::EMPTY,
            saved_normal: SavedSlot::EMPTY,
            switch_counter: 0,
        };
        assert_eq!(
            smc_trap(&s, SmcRequest { command_id: 1, args: 2 }),
            Err(MonitorError::NoSavedContext)
        );
        let p = MonitorState::power_on(WorldContext::zeroed(World::Secure), None);
        assert_eq!(
            smc_trap(&p, SmcRequest { command_id: 1, args: 2 }),
            Err(MonitorError::NoSavedContext)
        );
    }

    #[test]
    fn save_restore_edge_cases() {
        let z = WorldContext::zeroed(World::Secure);
        assert_eq!(restore_context(save_context(z)), Ok(z));
        assert_eq!(restore_context(SavedSlot::EMPTY), Err(MonitorError::EmptySlot));
    }

    #[test]
    fn shm_handles() {
        let mut t = ShmTable::default();
        let h = t.register(vec![1, 2]);
        assert_ne!(h & SHM_HANDLE_BIT, 0);
        assert_eq!(t.get(h).unwrap(), [1, 2]);
        t.put(h, vec![3]).unwrap();
        assert_eq!(t.release(h), Some(vec![3]));
        assert_eq!(t.get(h), Err(MonitorError::BadHandle(h)));
        let untouched = t.register(vec![4]);
        assert_eq!(t.release(untouched), None);
    }

    struct Echo;
    impl SecureWorld for Echo {
        fn on_smc(&mut self, m: &mut Monitor) -> Result<(), MonitorError> {
            let r = m.request_registers();
            m.return_to_normal(r.command_id ^ r.args)
        }
    }

    struct Hang;
    impl SecureWorld for Hang {
        fn on_smc(&mut self, _: &mut Monitor) -> Result<(), MonitorError> {
            Ok(())
        }
    }

    #[test]
    fn smc_call_and_return() {
        let mut m = Monitor::new(booted());
        let before = m.switch_counter();
        assert_eq!(m.microtee_smc(&mut Echo, 6, 3), Ok(5));
        assert_eq!(m.switch_counter() - before, 4);
        assert_eq!(m.microtee_smc(&mut Hang, 6, 3), Err(MonitorError::SecureWorldHung));
    }

    proptest! {
        #[test]
        fn save_restore_identity(c in ctx_strategy(World::Secure)) {
            prop_assert_eq!(restore_context(save_context(c)).unwrap(), c);
        }

        #[test]
        fn secure_context_survives_round_trip(c in ctx_strategy(World::Secure), cmd in any::<u32>(), args in any::<u32>()) {
            // Secure world parks itself with arbitrary registers, normal world
            // calls in: everything except r0/r1 must come back unchanged.
            let s = MonitorState::power_on(c, Some(WorldContext::zeroed(World::Normal)));
            let s = smc_trap(&s, SmcRequest { command_id: 0, args: 0 }).unwrap();
            prop_assert_eq!(s.saved_secure, save_context(c));
            let t = smc_trap(&s, SmcRequest { command_id: cmd, args }).unwrap();
            prop_assert_eq!(t.live.register_file[0], cmd);
            prop_assert_eq!(t.live.register_file[1], args);
            prop_assert_eq!(&t.live.register_file[2..], &c.register_file[2..]);
            prop_assert_eq!((t.live.stack_pointer, t.live.program_counter, t.live.status_flags),
                            (c.stack_pointer, c.program_counter, c.status_flags));
        }

        #[test]
        fn ns_bit_tracks_world(steps in 1usize..20) {
            let mut s = booted();
            for i in 0..steps {
                let before = s.switch_counter;
                s = smc_trap(&s, SmcRequest { command_id: i as u32, args: 0 }).unwrap();
                prop_assert_eq!(s.ns_bit, s.live.world == World::Normal);
                prop_assert_eq!(s.switch_counter, before + 2);
            }
        }
    }
}
