//! Thread control blocks.

use std::fmt;

use super::ipc::SharedBuf;
use super::memory::Region;
use super::{KernelError, ObjId};

/// Handle to a thread control block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TcbRef(pub(crate) ObjId);

impl TcbRef {
    pub fn object(&self) -> ObjId {
        self.0
    }
}

impl fmt::Display for TcbRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tcb#{}", self.0.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadState {
    Inactive,
    Runnable,
    BlockedSend,
    BlockedRecv,
}

/// Why the kernel suspended a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// Access to an address not mapped (or not writable) in the task's vspace.
    Vm { addr: u32, write: bool },
    /// A kernel invocation without the required capability or right.
    Capability(KernelError),
    /// The task's own behaviour aborted while serving a request.
    User,
}

/// Fault notification queued for the Root Task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultRecord {
    pub tcb: TcbRef,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct IpcMeta {
    pub label: u32,
    pub len: u32,
    pub shared_buf: Option<SharedBuf>,
    pub badge: u32,
    pub kind: super::ipc::SenderKind,
}

pub const TCB_SIZE: u32 = 1024;
pub(crate) const IPC_BUFFER_OFFSET: u32 = 512;

#[derive(Debug, Clone)]
pub struct TcbRecord {
    pub ta_id: u32,
    pub register_file: [u32; 16],
    pub stack_pointer: u32,
    pub program_counter: u32,
    pub priority: u8,
    pub cspace: ObjId,
    pub vspace: ObjId,
    pub state: ThreadState,
    pub fault: Option<FaultKind>,
    pub(crate) ipc_buffer: u32,
    /// Metadata for a message staged in our IPC buffer while blocked on send.
    pub(crate) outgoing: Option<IpcMeta>,
    /// Metadata for a message delivered into our IPC buffer, not yet read.
    pub(crate) inbox: Option<IpcMeta>,
    pub(crate) awaiting_reply: bool,
    pub(crate) reply_to: Option<ObjId>,
    pub(crate) waiting_on: Option<ObjId>,
    pub(crate) last_run: u64,
}

impl TcbRecord {
    pub(crate) fn new(ta_id: u32, priority: u8, cspace: ObjId, vspace: ObjId, region: Region) -> Self {
        Self {
            ta_id,
            register_file: [0; 16],
            stack_pointer: 0,
            program_counter: 0,
            priority,
            cspace,
            vspace,
            state: ThreadState::Inactive,
            fault: None,
            ipc_buffer: region.base + IPC_BUFFER_OFFSET,
            outgoing: None,
            inbox: None,
            awaiting_reply: false,
            reply_to: None,
            waiting_on: None,
            last_run: 0,
        }
    }

    pub fn is_faulted(&self) -> bool {
        self.fault.is_some()
    }

    pub fn has_message(&self) -> bool {
        self.inbox.is_some()
    }
}
