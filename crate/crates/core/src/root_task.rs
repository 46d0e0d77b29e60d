//! The Root Task: owns all untyped memory after boot, builds the security
//! services and TAs, and serves normal-world requests by command ID.

use std::collections::BTreeMap;

use rand::RngCore;
use thiserror::Error;

use crate::microkernel::{
    BootEnvironment, CPtr, Kernel, KernelError, Message, PagePerms, Rights, TcbRef, PAGE_SIZE,
    ROOT_PRIORITY,
};
use crate::monitor::{Monitor, MonitorError, SecureWorld, SHM_HANDLE_BIT};
use crate::runtime::{Actor, CallError, DriverPort, Executor, TraceEvent, UserMemory};
use crate::security_services::keys::KeyBundle;
use crate::security_services::{CryptoService, KeyManagement, ServiceClient, ServiceHandler, ServiceTask};
use crate::trusted_apps::{ta_serve_loop, TaLayout, TaServer, TaSpec, TA_PAYLOAD_MAX};

/// Returned for command IDs with no registered TA.
pub const IGNORED: u32 = 0xFFFF_FFFF;
/// The TA faulted (or could not answer) while serving the request.
pub const TA_FAULTED: u32 = 0xFFFF_FFFE;
/// The TA replied with an error, or its output could not be returned.
pub const TA_ERROR: u32 = 0xFFFF_FFFD;
/// `args` named a shared-memory handle the monitor does not know.
pub const BAD_HANDLE: u32 = 0xFFFF_FFFC;

pub const INVALID_COMMAND_ID: u32 = 0;
/// IDs below this are reserved for provisioned TAs.
pub const FIRST_DYNAMIC_ID: u32 = 4;

pub const SERVICE_PRIORITY: u8 = 200;
const DATA_BASE: u32 = 0x0040_0000;
const DATA_STRIDE: u32 = 0x0010_0000;
const SHARED_BASE: u32 = 0x4000_0000;
/// Per-client buffer for payloads too large to travel inline.
pub const SERVICE_BUFFER: u32 = TA_PAYLOAD_MAX + PAGE_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RootError {
    #[error("boot environment is invalid")]
    BootEnvInvalid,
    #[error("command ID {0} is already taken")]
    IdInUse(u32),
    #[error("command ID {0} is reserved")]
    ReservedId(u32),
    #[error("no free command ID")]
    NoFreeId,
    #[error("TA priority must be below the Root Task's")]
    PriorityTooHigh,
    #[error("{0}")]
    Kernel(#[from] KernelError),
}

/// A service task as seen by the Root Task.
#[derive(Debug, Clone, Copy)]
pub struct ServiceHandle {
    pub tcb: TcbRef,
    /// Root Task's capability to the service endpoint (all rights).
    pub endpoint: CPtr,
    /// The service's own receive capability, in its cspace.
    pub own_endpoint: CPtr,
    vspace: CPtr,
}

#[derive(Debug, Clone)]
pub struct TaEntry {
    pub name: &'static str,
    pub tcb: TcbRef,
    /// Root Task's capability to the TA's request endpoint.
    pub endpoint: CPtr,
    pub layout: TaLayout,
}

#[derive(Debug, Default)]
pub struct TaRegistry {
    entries: BTreeMap<u32, TaEntry>,
    next_id: u32,
}

impl TaRegistry {
    fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            next_id: FIRST_DYNAMIC_ID,
        }
    }

    pub fn get(&self, id: u32) -> Option<&TaEntry> {
        self.entries.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn allocate(&mut self, reserved: Option<u32>) -> Result<u32, RootError> {
        match reserved {
            Some(INVALID_COMMAND_ID) => Err(RootError::ReservedId(INVALID_COMMAND_ID)),
            Some(id) if self.entries.contains_key(&id) => Err(RootError::IdInUse(id)),
            Some(id) => Ok(id),
            None => {
                while self.entries.contains_key(&self.next_id) {
                    self.next_id = self.next_id.checked_add(1).ok_or(RootError::NoFreeId)?;
                }
                if self.next_id >= SHM_HANDLE_BIT {
                    return Err(RootError::NoFreeId);
                }
                Ok(self.next_id)
            }
        }
    }
}

/// A thread driven directly by the caller (e.g. a benchmark client) with
/// send capabilities to both services.
#[derive(Debug, Clone, Copy)]
pub struct ClientHandle {
    pub tcb: TcbRef,
    pub crypto: ServiceClient,
    pub key_mgmt: ServiceClient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchOutcome {
    pub result: u32,
    pub output: Option<Vec<u8>>,
}

impl DispatchOutcome {
    fn word(result: u32) -> Self {
        Self { result, output: None }
    }
}

pub struct RootTask {
    exec: Executor,
    env: BootEnvironment,
    ut: CPtr,
    registry: TaRegistry,
    crypto: ServiceHandle,
    key_mgmt: ServiceHandle,
    next_data: u32,
    next_shared: u32,
    requests: u64,
}

/// Check the kernel's hand-over, then start both security services.
pub fn root_init(
    kernel: Kernel,
    env: BootEnvironment,
    keys: KeyBundle,
    rng: Box<dyn RngCore + Send>,
) -> Result<RootTask, RootError> {
    let ut = *env.untyped.first().ok_or(RootError::BootEnvInvalid)?;
    if kernel.root() != Some(env.root_tcb) {
        return Err(RootError::BootEnvInvalid);
    }
    match kernel.tcb(env.root_tcb) {
        Ok(r) if r.priority == ROOT_PRIORITY && r.cspace == env.root_cspace && r.vspace == env.root_vspace => {}
        _ => return Err(RootError::BootEnvInvalid),
    }
    let mut exec = Executor::new(kernel);
    let (root_key, device_key) = keys.into_platform_keys();
    let crypto = start_service(&mut exec, &env, ut, CryptoService)?;
    let key_mgmt = start_service(&mut exec, &env, ut, KeyManagement::new(root_key, device_key, rng))?;
    let mut root = RootTask {
        exec,
        env,
        ut,
        registry: TaRegistry::new(),
        crypto,
        key_mgmt,
        next_data: 0,
        next_shared: SHARED_BASE,
        requests: 0,
    };
    root.exec.take_trace();
    let r = root.env.root_tcb;
    root.exec.kernel_mut().smc_block(r)?;
    Ok(root)
}

struct Spawned {
    tcb: TcbRef,
    vspace: CPtr,
    endpoint: CPtr,
    own_endpoint: CPtr,
}

/// TCB, cspace, vspace and request endpoint for a new task. The task gets a
/// receive-only copy of the endpoint; the Root Task keeps the original.
fn spawn(exec: &mut Executor, env: &BootEnvironment, ut: CPtr, priority: u8) -> Result<Spawned, KernelError> {
    let root = env.root_tcb;
    let k = exec.kernel_mut();
    let cs = k.create_cspace(root, ut)?;
    let vs = k.create_vspace(root, ut)?;
    let tcb = k.create_tcb(root, ut, priority as u32, cs, vs)?;
    let endpoint = k.create_endpoint(root, ut)?;
    let own_endpoint = grant_copy(k, root, tcb, endpoint, Rights::RECV, None)?;
    Ok(Spawned {
        tcb,
        vspace: vs,
        endpoint,
        own_endpoint,
    })
}

/// Give `target` a copy of `src` restricted to `rights`.
fn grant_copy(
    k: &mut Kernel,
    root: TcbRef,
    target: TcbRef,
    src: CPtr,
    rights: Rights,
    badge: Option<u32>,
) -> Result<CPtr, KernelError> {
    let tmp = k.derive_capability(root, src, rights | Rights::GRANT, badge)?;
    let slot = k.grant_capability(root, target, tmp, false);
    k.delete_capability(root, tmp)?;
    slot
}

fn start_service<H: ServiceHandler + 'static>(
    exec: &mut Executor,
    env: &BootEnvironment,
    ut: CPtr,
    handler: H,
) -> Result<ServiceHandle, RootError> {
    let name = handler.name();
    let s = spawn(exec, env, ut, SERVICE_PRIORITY)?;
    exec.kernel_mut().resume(env.root_tcb, s.tcb)?;
    exec.attach(s.tcb, s.own_endpoint, Actor::Service(name), Box::new(ServiceTask::new(handler)));
    exec.settle(s.tcb);
    Ok(ServiceHandle {
        tcb: s.tcb,
        endpoint: s.endpoint,
        own_endpoint: s.own_endpoint,
        vspace: s.vspace,
    })
}

impl RootTask {
    pub fn tcb(&self) -> TcbRef {
        self.env.root_tcb
    }

    pub fn executor(&self) -> &Executor {
        &self.exec
    }

    pub fn executor_mut(&mut self) -> &mut Executor {
        &mut self.exec
    }

    pub fn kernel(&self) -> &Kernel {
        self.exec.kernel()
    }

    pub fn registry(&self) -> &TaRegistry {
        &self.registry
    }

    pub fn crypto_service(&self) -> ServiceHandle {
        self.crypto
    }

    pub fn key_management_service(&self) -> ServiceHandle {
        self.key_mgmt
    }

    /// Requests served since boot, including ignored ones.
    pub fn requests(&self) -> u64 {
        self.requests
    }

    fn alloc_shared(&mut self, bytes: u32) -> u32 {
        let base = self.next_shared;
        let span = bytes.div_ceil(PAGE_SIZE) * PAGE_SIZE + PAGE_SIZE;
        self.next_shared = self.next_shared.wrapping_add(span);
        base
    }

    /// Send capability (badged with the client's TA id) plus a shared
    /// buffer between `client` and the service.
    fn connect(
        &mut self,
        client: TcbRef,
        client_vs: CPtr,
        svc: ServiceHandle,
        buffer: u32,
    ) -> Result<ServiceClient, KernelError> {
        let root = self.tcb();
        let badge = self.kernel().tcb(client)?.ta_id;
        let vaddr = self.alloc_shared(buffer);
        let k = self.exec.kernel_mut();
        let ep = grant_copy(k, root, client, svc.endpoint, Rights::SEND, Some(badge))?;
        let buf = k.create_shared_buffer(root, self.ut, &[client_vs, svc.vspace], vaddr, buffer)?;
        Ok(ServiceClient::new(ep, Some(buf)))
    }

    /// Create a TA from `spec`, start its server loop and assign it a
    /// command ID.
    pub fn register_ta(&mut self, spec: TaSpec) -> Result<u32, RootError> {
        if spec.priority == ROOT_PRIORITY {
            return Err(RootError::PriorityTooHigh);
        }
        let id = self.registry.allocate(spec.reserved_id)?;
        let root = self.tcb();
        let s = spawn(&mut self.exec, &self.env, self.ut, spec.priority)?;
        let data_base = DATA_BASE + self.next_data * DATA_STRIDE;
        self.next_data += 1;
        let data_len = spec.data_pages * PAGE_SIZE;
        if spec.data_pages > 0 {
            self.exec
                .kernel_mut()
                .map_new_frames(root, self.ut, s.vspace, data_base, spec.data_pages, PagePerms::RW)?;
        }
        let crypto = if spec.needs_crypto {
            Some(self.connect(s.tcb, s.vspace, self.crypto, SERVICE_BUFFER)?)
        } else {
            None
        };
        let key_mgmt = if spec.needs_key_mgmt {
            Some(self.connect(s.tcb, s.vspace, self.key_mgmt, SERVICE_BUFFER)?)
        } else {
            None
        };
        let payload = if spec.payload_buffer {
            let vaddr = self.alloc_shared(TA_PAYLOAD_MAX);
            let root_vs = self.env.root_vspace_cap;
            Some(self.exec.kernel_mut().create_shared_buffer(
                root,
                self.ut,
                &[root_vs, s.vspace],
                vaddr,
                TA_PAYLOAD_MAX,
            )?)
        } else {
            None
        };
        let layout = TaLayout {
            command_id: id,
            data_base,
            data_len,
            crypto,
            key_mgmt,
            payload,
        };
        self.exec.kernel_mut().resume(root, s.tcb)?;
        ta_serve_loop(
            &mut self.exec,
            s.tcb,
            s.own_endpoint,
            Actor::Ta(id),
            TaServer::new(layout, spec.program),
        )?;
        self.registry.entries.insert(
            id,
            TaEntry {
                name: spec.name,
                tcb: s.tcb,
                endpoint: s.endpoint,
                layout,
            },
        );
        self.exec.log(format!("registered TA {} as command {id}", spec.name));
        Ok(id)
    }

    /// Destroy a TA and free its command ID.
    pub fn destroy_ta(&mut self, id: u32) -> Result<(), RootError> {
        let entry = self.registry.entries.remove(&id).ok_or(RootError::Kernel(KernelError::InvalidTcb))?;
        let root = self.tcb();
        self.exec.detach(entry.tcb);
        self.exec.kernel_mut().destroy_ta(root, entry.tcb)?;
        let _ = self.exec.kernel_mut().delete_capability(root, entry.endpoint);
        Ok(())
    }

    /// A thread with service connections, driven directly by the caller.
    pub fn create_client(&mut self, priority: u8, buffer: u32) -> Result<ClientHandle, RootError> {
        if priority == ROOT_PRIORITY {
            return Err(RootError::PriorityTooHigh);
        }
        let root = self.tcb();
        let k = self.exec.kernel_mut();
        let cs = k.create_cspace(root, self.ut)?;
        let vs = k.create_vspace(root, self.ut)?;
        let tcb = k.create_tcb(root, self.ut, priority as u32, cs, vs)?;
        let crypto = self.connect(tcb, vs, self.crypto, buffer)?;
        let key_mgmt = self.connect(tcb, vs, self.key_mgmt, buffer)?;
        let actor = Actor::Ta(self.kernel().tcb(tcb)?.ta_id);
        self.exec.kernel_mut().resume(root, tcb)?;
        self.exec.attach_driver(tcb, actor);
        Ok(ClientHandle { tcb, crypto, key_mgmt })
    }

    pub fn destroy_client(&mut self, client: ClientHandle) -> Result<(), RootError> {
        let root = self.tcb();
        self.exec.detach(client.tcb);
        self.exec.kernel_mut().destroy_ta(root, client.tcb)?;
        Ok(())
    }

    /// Port for issuing calls as `client`.
    pub fn port(&mut self, client: TcbRef) -> DriverPort<'_> {
        DriverPort {
            exec: &mut self.exec,
            me: client,
        }
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.exec.take_trace()
    }

    pub fn dispatch(&mut self, command_id: u32, args: u32) -> u32 {
        self.dispatch_with_payload(command_id, args, None).result
    }

    /// Forward one normal-world request to the TA registered under
    /// `command_id`. Unknown IDs are ignored without touching any TA.
    pub fn dispatch_with_payload(&mut self, command_id: u32, args: u32, payload: Option<&[u8]>) -> DispatchOutcome {
        self.requests += 1;
        let Some(entry) = self.registry.get(command_id).cloned() else {
            return DispatchOutcome::word(IGNORED);
        };
        let root = self.tcb();
        let mut msg = Message::new(command_id, vec![args]);
        let buf = entry.layout.payload;
        if let Some(p) = payload {
            let Some(b) = buf.filter(|b| p.len() <= b.len as usize) else {
                return DispatchOutcome::word(TA_ERROR);
            };
            if self.port(root).write(b.base, p).is_err() {
                return DispatchOutcome::word(TA_ERROR);
            }
            msg = Message::new(command_id, vec![args, p.len() as u32]).with_shared(b);
        }
        let outcome = match self.exec.call(root, entry.endpoint, msg) {
            Ok(reply) if reply.msg.label == 0 && !reply.msg.words.is_empty() => {
                let output = match (reply.msg.words.get(1), reply.msg.shared_buf, buf) {
                    (Some(&n), Some(rb), Some(b)) if rb == b && n <= b.len => {
                        self.port(root).read(b.base, n as usize).ok()
                    }
                    _ => None,
                };
                DispatchOutcome {
                    result: reply.msg.words[0],
                    output,
                }
            }
            Ok(_) => DispatchOutcome::word(TA_ERROR),
            Err(CallError::PeerFaulted | CallError::Stalled) => DispatchOutcome::word(TA_FAULTED),
            Err(CallError::Kernel(e)) => {
                self.exec.log(format!("root: request to command {command_id} failed: {e}"));
                DispatchOutcome::word(TA_ERROR)
            }
        };
        self.recover_faults();
        outcome
    }

    /// Restart every task the kernel suspended for a fault.
    pub fn recover_faults(&mut self) {
        let root = self.tcb();
        for f in self.exec.kernel_mut().take_faults() {
            let actor = self.exec.actor(f.tcb);
            self.exec.log(format!("root: {actor} faulted ({:?}); restarting", f.kind));
            if self.exec.kernel_mut().resume(root, f.tcb).is_ok() {
                self.exec.settle(f.tcb);
            }
        }
    }

    /// Hand `result` back to the normal world and park until the next SMC.
    pub fn return_to_normal(&mut self, monitor: &mut Monitor, result: u32) -> Result<(), MonitorError> {
        let root = self.tcb();
        let _ = self.exec.kernel_mut().smc_block(root);
        monitor.return_to_normal(result)
    }
}

impl SecureWorld for RootTask {
    fn on_smc(&mut self, monitor: &mut Monitor) -> Result<(), MonitorError> {
        let req = monitor.request_registers();
        let root = self.tcb();
        let _ = self.exec.kernel_mut().smc_wake(root);
        let wants_payload = self
            .registry
            .get(req.command_id)
            .is_some_and(|e| e.layout.payload.is_some());
        let result = if wants_payload && req.args & SHM_HANDLE_BIT != 0 {
            match monitor.shm.get(req.args).map(<[u8]>::to_vec) {
                Ok(bytes) => {
                    let out = self.dispatch_with_payload(req.command_id, req.args, Some(&bytes));
                    if let Some(o) = out.output {
                        monitor.shm.put(req.args, o)?;
                    }
                    out.result
                }
                Err(_) => BAD_HANDLE,
            }
        } else {
            self.dispatch(req.command_id, req.args)
        };
        self.return_to_normal(monitor, result)
    }
}
