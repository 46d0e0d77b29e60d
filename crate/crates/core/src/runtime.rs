//! The simulated secure-world CPU.
//!
//! User-level tasks (TAs and security services) are in-process behaviours
//! attached to kernel TCBs. The [`Executor`] owns the kernel and runs tasks
//! one step at a time in the order chosen by [`Kernel::schedule`]: a task
//! that has a delivered message handles it and replies, any other runnable
//! task goes back to receiving on its endpoint.
//!
//! A synchronous call ([`Executor::call`]) drives the scheduler until the
//! caller's reply arrives. Nested calls (a TA calling a service while
//! serving the Root Task) simply drive the loop recursively.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::microkernel::{
    CPtr, FaultKind, Kernel, KernelError, Message, Received, TcbRef,
};

/// Who performed a traced action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Actor {
    RootTask,
    Ta(u32),
    Service(&'static str),
    Client,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::RootTask => write!(f, "RootTask"),
            Actor::Ta(id) => write!(f, "TA{id}"),
            Actor::Service(name) => write!(f, "{name}"),
            Actor::Client => write!(f, "client"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Sent a request; `arg` is the first payload word, if any.
    Send { label: u32, arg: Option<u32> },
    Recv { label: u32 },
    Compute,
    Reply { label: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub actor: Actor,
    pub action: Action,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.action {
            Action::Send { label, arg: Some(a) } => write!(f, "{} send({label}, {a})", self.actor),
            Action::Send { label, arg: None } => write!(f, "{} send({label})", self.actor),
            Action::Recv { label } => write!(f, "{} recv({label})", self.actor),
            Action::Compute => write!(f, "{} compute", self.actor),
            Action::Reply { label } => write!(f, "{} reply({label})", self.actor),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("kernel: {0}")]
    Kernel(#[from] KernelError),
    #[error("call failed: {0}")]
    Call(#[from] CallError),
    #[error("{0}")]
    Abort(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CallError {
    #[error("kernel: {0}")]
    Kernel(#[from] KernelError),
    #[error("server faulted before replying")]
    PeerFaulted,
    #[error("no runnable task can answer the call")]
    Stalled,
}

/// Behaviour of a user-level task: turn one received message into a reply.
pub trait Task: Send {
    fn handle(&mut self, ctx: &mut TaskCtx<'_>, req: Received) -> Result<Message, TaskError>;
}

/// Read/write access to the calling task's own address space.
pub trait UserMemory {
    fn read(&mut self, vaddr: u32, len: usize) -> Result<Vec<u8>, KernelError>;
    fn write(&mut self, vaddr: u32, data: &[u8]) -> Result<(), KernelError>;
}

struct TaskEntry {
    actor: Actor,
    endpoint: CPtr,
    program: Option<Box<dyn Task>>,
    invocations: u64,
}

pub struct Executor {
    kernel: Kernel,
    tasks: BTreeMap<TcbRef, TaskEntry>,
    drivers: HashMap<TcbRef, Actor>,
    pending: HashMap<TcbRef, Received>,
    failed_calls: HashSet<TcbRef>,
    trace: Vec<TraceEvent>,
    tracing: bool,
    log: Vec<String>,
    tap: Option<ResponseTap>,
}

/// Observer of every payload a service sends back.
pub type ResponseTap = Box<dyn FnMut(&[u8]) + Send>;

impl Executor {
    pub fn new(kernel: Kernel) -> Self {
        let mut drivers = HashMap::new();
        if let Some(root) = kernel.root() {
            drivers.insert(root, Actor::RootTask);
        }
        Self {
            kernel,
            tasks: BTreeMap::new(),
            drivers,
            pending: HashMap::new(),
            failed_calls: HashSet::new(),
            trace: Vec::new(),
            tracing: true,
            log: Vec::new(),
            tap: None,
        }
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut Kernel {
        &mut self.kernel
    }

    /// Attach a behaviour to `tcb`; it serves requests arriving on `endpoint`.
    pub fn attach(&mut self, tcb: TcbRef, endpoint: CPtr, actor: Actor, program: Box<dyn Task>) {
        self.tasks.insert(
            tcb,
            TaskEntry {
                actor,
                endpoint,
                program: Some(program),
                invocations: 0,
            },
        );
    }

    /// Register a thread that is driven from outside (no behaviour).
    pub fn attach_driver(&mut self, tcb: TcbRef, actor: Actor) {
        self.drivers.insert(tcb, actor);
    }

    pub fn detach(&mut self, tcb: TcbRef) {
        self.tasks.remove(&tcb);
        self.drivers.remove(&tcb);
        self.pending.remove(&tcb);
    }

    pub fn actor(&self, tcb: TcbRef) -> Actor {
        self.tasks
            .get(&tcb)
            .map(|e| e.actor)
            .or_else(|| self.drivers.get(&tcb).copied())
            .unwrap_or(Actor::Client)
    }

    /// How many requests the task attached to `tcb` has handled.
    pub fn invocations(&self, tcb: TcbRef) -> u64 {
        self.tasks.get(&tcb).map_or(0, |e| e.invocations)
    }

    pub fn total_invocations(&self) -> u64 {
        self.tasks.values().map(|e| e.invocations).sum()
    }

    pub fn set_tracing(&mut self, on: bool) {
        self.tracing = on;
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    fn record(&mut self, actor: Actor, action: Action) {
        if self.tracing {
            self.trace.push(TraceEvent { actor, action });
        }
    }

    pub fn log(&mut self, line: impl Into<String>) {
        self.log.push(line.into());
    }

    pub fn log_lines(&self) -> &[String] {
        &self.log
    }

    pub fn set_response_tap(&mut self, tap: Option<ResponseTap>) {
        self.tap = tap;
    }

    pub(crate) fn observe_response(&mut self, payload: &[u8]) {
        if let Some(t) = self.tap.as_mut() {
            t(payload);
        }
    }

    /// Synchronous call from `caller`: send `msg` on `ep` and run the system
    /// until the reply arrives.
    pub fn call(&mut self, caller: TcbRef, ep: CPtr, msg: Message) -> Result<Received, CallError> {
        let actor = self.actor(caller);
        self.record(
            actor,
            Action::Send {
                label: msg.label,
                arg: msg.words.first().copied(),
            },
        );
        self.kernel.ipc_call(caller, ep, &msg)?;
        let reply = self.run_until_reply(caller)?;
        self.record(actor, Action::Recv { label: reply.msg.label });
        Ok(reply)
    }

    fn run_until_reply(&mut self, waiter: TcbRef) -> Result<Received, CallError> {
        loop {
            if self.failed_calls.remove(&waiter) {
                return Err(CallError::PeerFaulted);
            }
            if let Some(m) = self.kernel.take_message(waiter) {
                return Ok(m);
            }
            // Threads driven from outside (the Root Task, benchmark clients)
            // are never picked here: only tasks with a behaviour can run.
            let tasks = &self.tasks;
            let next = self
                .kernel
                .schedule_among(|t| t != waiter && tasks.get(&t).is_some_and(|e| e.program.is_some()));
            match next {
                Ok(t) => self.step(t),
                Err(_) => {
                    self.kernel.abort_call(waiter)?;
                    return Err(CallError::Stalled);
                }
            }
        }
    }

    /// Run one scheduling quantum of `t`.
    fn step(&mut self, t: TcbRef) {
        let msg = self.pending.remove(&t).or_else(|| self.kernel.take_message(t));
        let Some(msg) = msg else {
            self.recv_next(t);
            return;
        };
        let serving = self.kernel.reply_target(t);
        let (actor, mut program) = {
            let entry = self.tasks.get_mut(&t).expect("stepped a task without behaviour");
            entry.invocations += 1;
            (entry.actor, entry.program.take().expect("task re-entered"))
        };
        self.record(actor, Action::Recv { label: msg.msg.label });
        self.record(actor, Action::Compute);
        let result = program.handle(&mut TaskCtx { exec: self, me: t }, msg);
        if let Some(e) = self.tasks.get_mut(&t) {
            e.program = Some(program);
        }
        let faulted = self.kernel.tcb(t).map_or(true, |r| r.is_faulted());
        match result {
            Ok(reply) if !faulted => {
                if serving.is_some() {
                    self.record(actor, Action::Reply { label: reply.label });
                    if let Err(e) = self.kernel.ipc_reply(t, &reply) {
                        self.log(format!("{actor}: reply failed: {e}"));
                    }
                }
                self.recv_next(t);
            }
            other => {
                if !faulted {
                    self.kernel.raise_fault(t, FaultKind::User);
                }
                if let Err(e) = other {
                    self.log(format!("{actor}: faulted: {e}"));
                } else {
                    self.log(format!("{actor}: faulted"));
                }
                if let Some(c) = serving {
                    self.failed_calls.insert(c);
                    let _ = self.kernel.abort_call(c);
                }
            }
        }
    }

    fn recv_next(&mut self, t: TcbRef) {
        let Some(ep) = self.tasks.get(&t).map(|e| e.endpoint) else {
            return;
        };
        match self.kernel.ipc_recv(t, ep) {
            Ok(Some(m)) => {
                self.pending.insert(t, m);
            }
            Ok(None) => {}
            Err(e) => {
                if !e.is_fault() {
                    self.kernel.raise_fault(t, FaultKind::User);
                }
                let actor = self.actor(t);
                self.log(format!("{actor}: receive failed: {e}"));
            }
        }
    }

    /// Run `t` until it blocks waiting for its next request.
    pub fn settle(&mut self, t: TcbRef) {
        for _ in 0..4 {
            match self.kernel.tcb(t) {
                Ok(r) if r.state == crate::microkernel::ThreadState::Runnable => self.step(t),
                _ => return,
            }
        }
    }
}

/// Execution context handed to a task while it handles one request. Every
/// kernel operation made through it is performed as the task itself.
pub struct TaskCtx<'a> {
    exec: &'a mut Executor,
    me: TcbRef,
}

impl<'a> TaskCtx<'a> {
    pub fn me(&self) -> TcbRef {
        self.me
    }

    pub fn call(&mut self, ep: CPtr, msg: Message) -> Result<Received, CallError> {
        self.exec.call(self.me, ep, msg)
    }

    pub fn send(&mut self, ep: CPtr, msg: &Message) -> Result<bool, KernelError> {
        self.exec.kernel.ipc_send(self.me, ep, msg)
    }

    pub fn destroy_ta(&mut self, target: TcbRef) -> Result<(), KernelError> {
        self.exec.kernel.destroy_ta(self.me, target)
    }

    pub fn suspend(&mut self, target: TcbRef) -> Result<(), KernelError> {
        self.exec.kernel.suspend(self.me, target)
    }

    pub fn grant(&mut self, target: TcbRef, slot: CPtr) -> Result<CPtr, KernelError> {
        self.exec.kernel.grant_capability(self.me, target, slot, false)
    }

    pub fn log(&mut self, line: impl Into<String>) {
        self.exec.log(line);
    }

    pub(crate) fn observe_response(&mut self, payload: &[u8]) {
        self.exec.observe_response(payload);
    }
}

impl UserMemory for TaskCtx<'_> {
    fn read(&mut self, vaddr: u32, len: usize) -> Result<Vec<u8>, KernelError> {
        self.exec.kernel.mem_read(self.me, vaddr, len)
    }

    fn write(&mut self, vaddr: u32, data: &[u8]) -> Result<(), KernelError> {
        self.exec.kernel.mem_write(self.me, vaddr, data)
    }
}

/// A task's view of the system: synchronous calls plus its own memory.
pub trait IpcPort: UserMemory {
    fn call(&mut self, ep: CPtr, msg: Message) -> Result<Received, CallError>;
}

impl IpcPort for TaskCtx<'_> {
    fn call(&mut self, ep: CPtr, msg: Message) -> Result<Received, CallError> {
        TaskCtx::call(self, ep, msg)
    }
}

/// Port for a thread driven from outside the executor, such as the Root Task.
pub struct DriverPort<'a> {
    pub exec: &'a mut Executor,
    pub me: TcbRef,
}

impl UserMemory for DriverPort<'_> {
    fn read(&mut self, vaddr: u32, len: usize) -> Result<Vec<u8>, KernelError> {
        self.exec.kernel.mem_read(self.me, vaddr, len)
    }

    fn write(&mut self, vaddr: u32, data: &[u8]) -> Result<(), KernelError> {
        self.exec.kernel.mem_write(self.me, vaddr, data)
    }
}

impl IpcPort for DriverPort<'_> {
    fn call(&mut self, ep: CPtr, msg: Message) -> Result<Received, CallError> {
        self.exec.call(self.me, ep, msg)
    }
}
